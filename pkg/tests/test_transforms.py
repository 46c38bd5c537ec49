import numpy as np
import pytest
from hypothesis import given, strategies as st

from wrml.transforms import TransformKind, forward, sensitivity, to_permeability

KINDS = list(TransformKind)


def test_parse():
    assert TransformKind.parse("non_monotonic") is TransformKind.NON_MONOTONIC
    assert TransformKind.parse("Monotonic") is TransformKind.MONOTONIC
    with pytest.raises(ValueError):
        TransformKind.parse("cubic")


def test_scalar_values():
    assert forward("monotonic", 0.0) == pytest.approx(0.0, abs=1e-15)
    assert forward("non-monotonic", 0.0) == pytest.approx(3 * np.tanh(2) - 1, rel=1e-14)
    assert forward("non-monotonic", 0.0) == pytest.approx(1.8921, abs=1e-4)
    assert abs(forward("monotonic", 10.0) - 2.0) < 1e-6
    assert sensitivity("monotonic", 0.0) == pytest.approx(8 - 8 * np.tanh(2) ** 2, rel=1e-14)
    assert sensitivity("monotonic", 0.0) == pytest.approx(0.56521, abs=1e-5)
    assert np.all(sensitivity("identity", np.linspace(-3, 3, 7)) == 1.0)


@pytest.mark.parametrize("kind", KINDS)
@given(x=st.floats(-3, 3))
def test_sensitivity_matches_finite_difference(kind, x):
    h = 1e-6
    fd = (forward(kind, x + h) - forward(kind, x - h)) / (2 * h)
    assert sensitivity(kind, x) == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_monotonic_strictly_increasing():
    x = np.arange(-5, 5, 1e-3)
    # In the saturated tails the increments fall below float resolution.
    inner = np.abs(x) < 2.5
    assert np.all(np.diff(forward("monotonic", x[inner])) > 0)
    assert np.all(sensitivity("monotonic", x) > 0)


def test_non_monotonic_shape():
    x = np.linspace(-3, 3, 601)
    m = forward("non-monotonic", x)
    assert np.any(np.diff(m) < 0) and np.any(np.diff(m) > 0)
    assert np.all(forward("non-monotonic", np.linspace(2, 5, 50)) <= 2 + 1e-6)
    d = sensitivity("non-monotonic", x)
    assert d.min() < 0 < d.max()


def test_permeability():
    assert to_permeability(0.0) == 1.0
    assert to_permeability(2.0) == pytest.approx(7.389056, rel=1e-6)
    assert to_permeability(-2.0) == pytest.approx(0.1353353, rel=1e-6)
    k = np.array([0.3, 1.0, 8.0])
    assert np.allclose(to_permeability(np.log(k)), k, rtol=1e-12, atol=0)

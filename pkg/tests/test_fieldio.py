import numpy as np
import pytest

from wrml import fieldio
from wrml.grf import Grid2D


def test_field_roundtrip(tmp_path):
    g = Grid2D(4, 3, 0.5, 1.0)
    v = np.arange(12) * 0.1 - 0.3
    path = fieldio.write_field(tmp_path / "a.field", v, g, {"sigma": 0.8})
    raw = path.read_bytes()
    assert raw[:8] == fieldio.MAGIC and len(raw) == 16 + 12 * 8
    back, nx1, ny1 = fieldio.read_field(path)
    assert np.array_equal(back, v) and (nx1, ny1) == (4, 3)
    assert '"sigma": 0.8' in (tmp_path / "a.field.json").read_text()


def test_field_errors(tmp_path):
    g = Grid2D(2, 2, 1.0, 1.0)
    with pytest.raises(ValueError):
        fieldio.write_field(tmp_path / "b.field", np.zeros(3), g)
    (tmp_path / "c.field").write_bytes(b"NOTAFILE" + bytes(8))
    with pytest.raises(ValueError):
        fieldio.read_field(tmp_path / "c.field")


def test_ensemble_roundtrip(tmp_path):
    g = Grid2D(3, 3, 1.0, 1.0)
    X = np.random.default_rng(0).standard_normal((9, 4))
    fieldio.write_ensemble(tmp_path / "ens", X, g, {"mode": "ies"})
    assert np.array_equal(fieldio.read_ensemble(tmp_path / "ens"), X)

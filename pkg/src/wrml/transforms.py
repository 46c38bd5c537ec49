"""Pointwise maps from the latent Gaussian field to log-permeability."""
from __future__ import annotations

from enum import Enum

import numpy as np


class TransformKind(str, Enum):
    IDENTITY = "identity"
    MONOTONIC = "monotonic"
    NON_MONOTONIC = "non-monotonic"

    @classmethod
    def parse(cls, value) -> "TransformKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("_", "-"))
        except ValueError:
            raise ValueError(
                f"unknown transform {value!r}; expected one of "
                + ", ".join(k.value for k in cls)
            ) from None


def forward(kind, x) -> np.ndarray:
    """Log-permeability ``m = f(x)``, elementwise.

    The monotonic map is a soft two-level threshold (``m`` near -2 or +2); the
    non-monotonic one produces high values only where ``x`` is near zero,
    which yields channel-like structures.
    """
    kind = TransformKind.parse(kind)
    x = np.asarray(x, dtype=float)
    if kind is TransformKind.IDENTITY:
        return x.copy()
    if kind is TransformKind.MONOTONIC:
        return np.tanh(4 * x + 2) + np.tanh(4 * x - 2)
    return 2 * np.tanh(4 * x + 2) + np.tanh(2 - 4 * x) - 1


def sensitivity(kind, x) -> np.ndarray:
    """Diagonal of ``M_x = dm/dx`` (returned as a vector, never a matrix)."""
    kind = TransformKind.parse(kind)
    x = np.asarray(x, dtype=float)
    if kind is TransformKind.IDENTITY:
        return np.ones_like(x)
    if kind is TransformKind.MONOTONIC:
        return 8 - 4 * np.tanh(4 * x + 2) ** 2 - 4 * np.tanh(4 * x - 2) ** 2
    return 4 - 8 * np.tanh(4 * x + 2) ** 2 + 4 * np.tanh(2 - 4 * x) ** 2


def to_permeability(m) -> np.ndarray:
    return np.exp(np.asarray(m, dtype=float))

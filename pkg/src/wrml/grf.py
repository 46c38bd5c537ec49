"""Stationary Gaussian random fields on regular 2D grids.

Covariance matrices of stationary kernels on equispaced grids are symmetric
level-2 block Toeplitz. Embedding them in a block-circulant matrix makes the
FFT diagonalize them, which gives O(N log N) matrix-vector products and cheap
prior sampling.

Field vectors are ordered left to right, then bottom to top: node ``(i, j)``
(``i`` along x) has flat index ``j * nx_plus1 + i``. Reshaping a field to
``(ny_plus1, nx_plus1)`` gives the natural 2D view.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DimensionMismatch, NonPositiveEmbedding

DENSE_MAX_NODES = 4096
CLIP_TOL = 1e-8
# Embedding sizes tried, as multiples of the grid size; 2 is the minimal one.
# Beyond the last factor the size keeps doubling up to MAX_EMBED_SIDE nodes.
EMBEDDING_FACTORS = (2, 3, 4, 6, 8)
MAX_EMBED_SIDE = 4096


@dataclass(frozen=True)
class Grid2D:
    nx_plus1: int
    ny_plus1: int
    hx: float
    hy: float

    def __post_init__(self):
        if self.nx_plus1 < 2 or self.ny_plus1 < 2:
            raise ValueError("grid needs at least 2 nodes per direction")
        if not (self.hx > 0 and self.hy > 0):
            raise ValueError("mesh sizes must be positive")

    @classmethod
    def square(cls, n: int, length: float = 2.0) -> "Grid2D":
        """``n x n`` nodes spanning ``[0, length]^2``."""
        h = length / (n - 1)
        return cls(n, n, h, h)

    @property
    def n_nodes(self) -> int:
        return self.nx_plus1 * self.ny_plus1

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the 2D view, ``(ny_plus1, nx_plus1)``."""
        return (self.ny_plus1, self.nx_plus1)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Flat x and y coordinates of all nodes, in field order."""
        yy, xx = np.meshgrid(
            np.arange(self.ny_plus1) * self.hy,
            np.arange(self.nx_plus1) * self.hx,
            indexing="ij",
        )
        return xx.ravel(), yy.ravel()

    def nearest_node(self, x: float, y: float) -> int:
        i = int(np.clip(np.rint(x / self.hx), 0, self.nx_plus1 - 1))
        j = int(np.clip(np.rint(y / self.hy), 0, self.ny_plus1 - 1))
        return j * self.nx_plus1 + i


@dataclass(frozen=True)
class CovarianceSpec:
    """Oscillatory-exponential ("hole effect") kernel.

    ``C(dx, dy) = sigma^2 (1 - r^2/rho^2) exp(-r^2/rho^2)`` with
    ``r^2 = dx^2 + dy^2``.
    """

    sigma: float
    rho: float
    kind: str = "hole-exponential"

    def __post_init__(self):
        if not (self.sigma > 0 and self.rho > 0):
            raise ValueError("sigma and rho must be positive")
        if self.kind != "hole-exponential":
            raise ValueError(f"unknown covariance kind {self.kind!r}")


def covariance_value(spec: CovarianceSpec, dx, dy):
    """Evaluate the kernel at lag ``(dx, dy)``; broadcasts over arrays."""
    q = (np.asarray(dx, dtype=float) ** 2 + np.asarray(dy, dtype=float) ** 2) / spec.rho**2
    return spec.sigma**2 * (1.0 - q) * np.exp(-q)


def dense_covariance(spec: CovarianceSpec, grid: Grid2D) -> np.ndarray:
    """Materialize C_x by direct kernel evaluation (small grids only)."""
    if grid.n_nodes > DENSE_MAX_NODES:
        raise ValueError(
            f"dense covariance limited to {DENSE_MAX_NODES} nodes, got {grid.n_nodes}"
        )
    x, y = grid.coordinates()
    return covariance_value(spec, x[:, None] - x[None, :], y[:, None] - y[None, :])


def _embedded_first_column(spec: CovarianceSpec, grid: Grid2D, factor: int) -> np.ndarray:
    # Periodic lags; index n (the fill value phi_j) maps to the wrap-around lag n*h.
    mx = factor * grid.nx_plus1
    my = factor * grid.ny_plus1
    ix = np.arange(mx)
    iy = np.arange(my)
    lag_x = np.minimum(ix, mx - ix) * grid.hx
    lag_y = np.minimum(iy, my - iy) * grid.hy
    return covariance_value(spec, lag_x[None, :], lag_y[:, None])


@dataclass(frozen=True, eq=False)
class CovarianceOperator:
    """C_x exposed through its circulant embedding.

    ``embedded_spectrum`` has shape ``(factor*ny_plus1, factor*nx_plus1)`` with
    ``factor`` 2 for the minimal embedding, larger when it had to be enlarged.
    """

    spec: CovarianceSpec
    grid: Grid2D
    embedded_spectrum: np.ndarray
    min_raw_eigenvalue: float
    dense: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.grid.n_nodes

    @property
    def embedding_shape(self) -> tuple[int, int]:
        return self.embedded_spectrum.shape

    def __matmul__(self, v):
        return apply_cov(self, v)

    def to_dense(self) -> np.ndarray:
        """Dense C_x (materialized lazily; small grids only)."""
        if self.dense is not None:
            return self.dense
        return dense_covariance(self.spec, self.grid)


def _embedding_factors(grid: Grid2D):
    side = max(grid.nx_plus1, grid.ny_plus1)
    factors = [f for f in EMBEDDING_FACTORS if f * side <= MAX_EMBED_SIDE] or [2]
    f = factors[-1] * 2
    while f * side <= MAX_EMBED_SIDE:
        factors.append(f)
        f *= 2
    return factors


def build_embedding(
    spec: CovarianceSpec, grid: Grid2D, materialize_dense: bool = False
) -> CovarianceOperator:
    """Minimal circulant embedding of the block-Toeplitz covariance.

    If the minimal embedding is indefinite beyond round-off, the periodic box
    is enlarged through :data:`EMBEDDING_FACTORS` and then by doubling while
    its side stays within :data:`MAX_EMBED_SIDE`; when every size fails,
    :class:`NonPositiveEmbedding` is raised. The raw spectrum is kept for
    exact matrix-vector products; sampling clips eigenvalues in
    ``[-1e-8 * max, 0)`` to zero.
    """
    worst = None
    for factor in _embedding_factors(grid):
        c = _embedded_first_column(spec, grid, factor)
        lam = np.fft.fft2(c).real
        lmax = lam.max()
        lmin = lam.min()
        if lmin >= -CLIP_TOL * lmax:
            lam.setflags(write=False)
            dense = None
            if materialize_dense and grid.n_nodes <= DENSE_MAX_NODES:
                dense = dense_covariance(spec, grid)
                dense.setflags(write=False)
            return CovarianceOperator(spec, grid, lam, float(lmin), dense)
        worst = (lmin, lmax)
    raise NonPositiveEmbedding(*worst)


def _as_batch(op: CovarianceOperator, v: np.ndarray) -> np.ndarray:
    if v.shape[0] != op.n:
        raise DimensionMismatch(f"expected leading dimension {op.n}, got {v.shape}")
    ny, nx = op.grid.shape
    if v.ndim == 1:
        return v.reshape(1, ny, nx)
    return v.T.reshape(-1, ny, nx)


def apply_cov(op: CovarianceOperator, v) -> np.ndarray:
    """Return ``C_x @ v`` for a vector ``(N,)`` or a block of columns ``(N, k)``."""
    v = np.asarray(v, dtype=float)
    if v.ndim not in (1, 2):
        raise DimensionMismatch("expected a vector or a matrix of column vectors")
    batch = _as_batch(op, v)
    ny, nx = op.grid.shape
    my, mx = op.embedding_shape
    lam = op.embedded_spectrum[:, : mx // 2 + 1]
    spec = np.fft.rfft2(batch, s=(my, mx))
    out = np.fft.irfft2(spec * lam, s=(my, mx))[:, :ny, :nx]
    out = out.reshape(batch.shape[0], -1)
    return out[0] if v.ndim == 1 else out.T


def sample_prior(
    op: CovarianceOperator, mean, rng_seed: int, count: int
) -> list[np.ndarray]:
    """Draw ``count`` fields from N(mean, C_x) by circulant-embedding sampling.

    Each complex FFT yields two independent real fields (real and imaginary
    parts). Deterministic given ``rng_seed``.
    """
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (op.n,))
    if count <= 0:
        return []
    rng = np.random.default_rng(rng_seed)
    ny, nx = op.grid.shape
    my, mx = op.embedding_shape
    amp = np.sqrt(np.maximum(op.embedded_spectrum, 0.0) / (my * mx))
    n_pairs = (count + 1) // 2
    noise = rng.standard_normal((n_pairs, 2, my, mx))
    z = np.fft.fft2(amp * (noise[:, 0] + 1j * noise[:, 1]))[:, :ny, :nx]
    fields = np.stack([z.real, z.imag], axis=1).reshape(2 * n_pairs, -1)[:count]
    return [mean + f for f in fields]


def sample_matrix(op: CovarianceOperator, mean, rng_seed: int, count: int) -> np.ndarray:
    """Like :func:`sample_prior` but returns the draws as columns ``(N, count)``."""
    draws = sample_prior(op, mean, rng_seed, count)
    if not draws:
        return np.zeros((op.n, 0))
    return np.column_stack(draws)

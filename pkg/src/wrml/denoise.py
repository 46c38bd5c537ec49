"""Denoising of computed log-weights and power-transform regularization.

Computed log-weights ``omega_obs`` are modelled as true values ``omega`` plus
Gaussian noise of std ``sigma_o``. The prior on ``omega`` is a shifted,
scaled chi-square law: ``omega = omega_pr + sigma_pr * chi2(nu)``, whose log
density is ``(nu/2 - 1) log((omega - omega_pr)/sigma_pr) - (omega -
omega_pr)/(2 sigma_pr)`` up to a constant. Weights are then replaced by the
MAP estimate of ``omega`` given ``omega_obs``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import EmptyGrid, InsufficientReplicates
from .weights import WeightSet

KS_DRAWS = 10_000


@dataclass(frozen=True)
class NoiseModel:
    sigma_o: float
    sigma_pr: float
    nu: float
    omega_pr: float

    def __post_init__(self):
        if not self.sigma_o > 0:
            raise ValueError("sigma_o must be positive")
        if not self.sigma_pr > 0:
            raise ValueError("sigma_pr must be positive")
        if not self.nu >= 1:
            raise ValueError("nu must be at least 1")

    @property
    def prior_mode(self) -> float:
        """Mode of the prior (its lower bound when ``nu <= 2``)."""
        return self.omega_pr + max(self.nu - 2.0, 0.0) * self.sigma_pr


def default_omega_pr(omega, sigma_pr: float, nu: float, sigma_o: float) -> float:
    """``max(omega) - 6 sigma_pr nu``, but never above ``min(omega) - sigma_o``."""
    omega = np.asarray(omega, dtype=float)
    return float(min(omega.max() - 6.0 * sigma_pr * nu, omega.min() - sigma_o))


def log_posterior(model: NoiseModel, omega, omega_obs) -> np.ndarray:
    """Unnormalized log posterior of ``omega``; ``-inf`` at or below ``omega_pr``."""
    omega = np.asarray(omega, dtype=float)
    t = omega - model.omega_pr
    out = np.full(np.broadcast(omega, np.asarray(omega_obs)).shape, -np.inf)
    ok = np.broadcast_to(t > 0, out.shape)
    t_b = np.broadcast_to(t, out.shape)[ok]
    w_b = np.broadcast_to(omega, out.shape)[ok]
    o_b = np.broadcast_to(np.asarray(omega_obs, dtype=float), out.shape)[ok]
    a = model.nu / 2.0 - 1.0
    prior = -t_b / (2.0 * model.sigma_pr)
    if a != 0.0:
        prior = prior + a * np.log(t_b / model.sigma_pr)
    out[ok] = -((w_b - o_b) ** 2) / (2.0 * model.sigma_o**2) + prior
    return out[()] if out.ndim == 0 else out


def denoise_map(model: NoiseModel, omega_obs) -> np.ndarray:
    """MAP estimate of ``omega`` for every observed log-weight.

    With ``t = omega - omega_pr`` the stationarity condition is the quadratic
    ``t^2 - b t - a sigma_o^2 = 0`` where ``a = nu/2 - 1`` and
    ``b = omega_obs - omega_pr - sigma_o^2 / (2 sigma_pr)``, so the maximizer
    is available in closed form:

    * ``nu > 2``: the positive root (the log posterior is concave in ``t``);
    * ``nu = 2``: ``max(b, 0)``, the boundary value when ``b <= 0``;
    * ``nu < 2``: the prior is unbounded at ``omega_pr``; the interior local
      maximum (larger root) is used when it exists, otherwise ``omega_obs``
      projected above ``omega_pr``.
    """
    obs = np.asarray(omega_obs, dtype=float)
    s2 = model.sigma_o**2
    a = model.nu / 2.0 - 1.0
    b = obs - model.omega_pr - s2 / (2.0 * model.sigma_pr)
    if a > 0:
        root = np.sqrt(b * b + 4.0 * a * s2)
        # Avoid cancellation when b is large and negative.
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(b >= 0, 0.5 * (b + root), 2.0 * a * s2 / (root - b))
    elif a == 0:
        t = np.maximum(b, 0.0)
    else:
        disc = b * b + 4.0 * a * s2
        t_inner = 0.5 * (b + np.sqrt(np.maximum(disc, 0.0)))
        fallback = np.maximum(obs - model.omega_pr, np.spacing(np.abs(model.omega_pr) + 1.0))
        t = np.where((disc >= 0) & (b > 0), t_inner, fallback)
    return model.omega_pr + t


def denoise_weights(model: NoiseModel, log_weights) -> WeightSet:
    return WeightSet.from_log_weights(denoise_map(model, log_weights), "denoised")


def fit_noise_sigma(omega_replicates) -> float:
    """Sample standard deviation (``n - 1``) of replicate final log-weights.

    A 2D input ``(n_ensembles, n_particles)`` gives the pooled estimate, the
    root mean of the per-particle variances.
    """
    r = np.asarray(omega_replicates, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    if r.shape[0] < 3:
        raise InsufficientReplicates(f"need at least 3 replicates, got {r.shape[0]}")
    return float(np.sqrt(np.mean(np.var(r, axis=0, ddof=1))))


@dataclass(frozen=True)
class PriorGrid:
    """Candidate prior parameters. ``omega_pr=None`` selects :func:`default_omega_pr`."""

    sigma_pr: Sequence[float]
    nu: Sequence[float]
    omega_pr: Optional[Sequence[float]] = None

    def points(self, omega, sigma_o: float) -> list[tuple[float, float, float]]:
        pts = []
        for s, n in product(self.sigma_pr, self.nu):
            locs = self.omega_pr if self.omega_pr is not None else [
                default_omega_pr(omega, s, n, sigma_o)
            ]
            pts.extend((float(s), float(n), float(w)) for w in locs)
        return pts


def simulate_noisy(model: NoiseModel, uniforms: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Noisy log-weights from common random numbers (inverse-CDF prior draws)."""
    prior = model.omega_pr + model.sigma_pr * stats.chi2.ppf(uniforms, model.nu)
    return prior + model.sigma_o * normals


def tune_prior(
    omega_all,
    sigma_o: float,
    grid: PriorGrid | Iterable[tuple[float, float, float]],
    seed: int,
    n_draws: int = KS_DRAWS,
) -> NoiseModel:
    """Grid search for the prior whose noisy draws best match ``omega_all``.

    Distance is the two-sample Kolmogorov-Smirnov statistic. All grid points
    share the same underlying uniforms and normals (common random numbers), so
    the choice does not depend on Monte Carlo noise differing between points.
    """
    omega_all = np.asarray(omega_all, dtype=float)
    pts = grid.points(omega_all, sigma_o) if isinstance(grid, PriorGrid) else list(grid)
    if not pts:
        raise EmptyGrid("prior grid has no points")
    rng = np.random.default_rng(seed)
    u = rng.random(n_draws)
    z = rng.standard_normal(n_draws)
    best, best_d = None, np.inf
    for s, n, w in pts:
        model = NoiseModel(sigma_o, s, n, w)
        d = stats.ks_2samp(omega_all, simulate_noisy(model, u, z), method="asymp").statistic
        if d < best_d:
            best, best_d = model, d
    return best


def power_regularize(log_weights, exponent: float) -> WeightSet:
    """Tempered weights ``w ~ exp(exponent * omega)``; 0 gives uniform, 1 the raw weights."""
    if not 0.0 <= exponent <= 1.0:
        raise ValueError("exponent must lie in [0, 1]")
    lw = np.asarray(log_weights, dtype=float)
    return WeightSet.from_log_weights(exponent * lw, "power")

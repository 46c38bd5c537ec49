"""Importance weights of RML samples.

For a member ``x`` with anchor pair ``(x*, delta*)`` the (log) importance
weight is

    omega = 1/2 log|V| - 1/2 eta^T V^-1 eta - log|J|

with ``V = C_d + G C_x G^T``, ``eta = g(m(x)) - d_obs - G (x - x_pr)`` and
``J = I + C_x G^T C_d^-1 G``. Since ``|V| = |C_d| |J|``, this differs from
``-1/2 log|V| - 1/2 eta^T V^-1 eta`` only by a constant shared by all members.

All determinants are taken in data space,
``log|J| = log|I + C_d^-1 G C_x G^T|``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

from . import grf
from .errors import (
    DimensionMismatch,
    LinearSolveFailure,
    NonFiniteInput,
    UnnormalizedWeights,
)
from .smoother import ObservationSet, PriorPrecision, center, hybrid_factors
from .transforms import TransformKind, forward, sensitivity

NORMALIZATION_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class WeightSet:
    log_weights: np.ndarray
    weights: np.ndarray
    ess: float
    variant: str

    @classmethod
    def from_log_weights(cls, log_weights, variant: str = "raw") -> "WeightSet":
        lw = np.asarray(log_weights, dtype=float).ravel()
        if not np.all(np.isfinite(lw)):
            raise NonFiniteInput("log-weights must be finite")
        w = normalize(lw)
        return cls(lw, w, effective_sample_size(w), variant)

    @property
    def n(self) -> int:
        return self.weights.size


def normalize(log_weights) -> np.ndarray:
    """Normalized weights ``exp(omega - logsumexp(omega))``."""
    lw = np.asarray(log_weights, dtype=float)
    w = np.exp(lw - logsumexp(lw))
    return w / w.sum()


def effective_sample_size(weights) -> float:
    """Kong's estimator ``1 / sum(w^2)`` for normalized weights."""
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > NORMALIZATION_TOL:
        raise UnnormalizedWeights(f"weights sum to {w.sum():.12g}, expected 1")
    return float(1.0 / np.sum(w * w))


def _spd_cholesky(A: np.ndarray):
    """Cholesky factor with one jitter retry of ``1e-10 * trace/n``."""
    A = 0.5 * (A + A.T)
    try:
        return sla.cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(A) / A.shape[0]
        try:
            return sla.cho_factor(A + jitter * np.eye(A.shape[0]), lower=True)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveFailure("V is not positive definite") from exc


def _scaled_terms(cd_diag: np.ndarray, GCGt: np.ndarray, eta: np.ndarray):
    """Return ``(eta^T V^-1 eta, log|J|, log|V|)`` from one Cholesky factorization.

    ``V = C_d^{1/2} S C_d^{1/2}`` with ``S = I + C_d^{-1/2} G C G^T C_d^{-1/2}``,
    so ``log|J| = log|S|`` and ``log|V| = log|C_d| + log|S|``.
    """
    s = 1.0 / np.sqrt(cd_diag)
    S = np.eye(cd_diag.size) + s[:, None] * GCGt * s[None, :]
    L = _spd_cholesky(S)
    logdet_s = 2.0 * np.sum(np.log(np.diag(L[0])))
    e = eta * (s if eta.ndim == 1 else s[:, None])
    quad = np.sum(e * sla.cho_solve(L, e), axis=0)
    return quad, logdet_s, logdet_s + np.sum(np.log(cd_diag))


def weight_terms(
    x,
    x_pr,
    g_of_m,
    d_obs,
    G_action: Union[np.ndarray, Callable[[np.ndarray], np.ndarray]],
    CxGt: np.ndarray,
    cd_diag,
):
    """Ingredients ``(V, eta, log|J|)`` of a single member's weight.

    ``G_action`` is either the matrix ``G`` or a callable applying it to a
    vector or to the columns of a matrix; ``CxGt`` is the precomputed
    ``C_x G^T`` of shape ``(N_x, N_d)``.
    """
    arrays = [np.asarray(a, dtype=float) for a in (x, x_pr, g_of_m, d_obs, CxGt, cd_diag)]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise NonFiniteInput("weight inputs contain NaN or Inf")
    x, x_pr, g, d, CxGt, cd = arrays
    cd = np.broadcast_to(cd, d.shape)
    apply = G_action if callable(G_action) else (lambda v: G_action @ v)
    if CxGt.shape != (x.size, d.size):
        raise DimensionMismatch(f"C_x G^T has shape {CxGt.shape}, expected {(x.size, d.size)}")
    GCGt = np.asarray(apply(CxGt), dtype=float)
    GCGt = 0.5 * (GCGt + GCGt.T)
    V = np.diag(cd) + GCGt
    eta = g - d - np.asarray(apply(x - x_pr), dtype=float)
    _, logdet_j, _ = _scaled_terms(cd, GCGt, eta)
    return V, eta, float(logdet_j)


def log_weight(V: np.ndarray, eta: np.ndarray, logdetJ: float) -> float:
    """Full ``omega = 1/2 log|V| - 1/2 eta^T V^-1 eta - log|J|``."""
    L = _spd_cholesky(V)
    logdet_v = 2.0 * np.sum(np.log(np.diag(L[0])))
    return float(0.5 * logdet_v - 0.5 * eta @ sla.cho_solve(L, eta) - logdetJ)


def default_weight_precision(n_e: int, n_x: int,
                             op: Optional[grf.CovarianceOperator] = None) -> PriorPrecision:
    """Precision policy for IES weights.

    With ``N_e > N_x`` the deviations span the whole space and
    ``dD dX^+`` is the least-squares sensitivity, exact for linear ``g``, so
    Gauss-linear weights come out uniform. With ``N_e <= N_x`` that choice is
    degenerate (``dD dX^+ (x_i - mean) = d_i - mean`` makes every ``eta_i``
    equal), so the smoother's ``C_x^+`` policy is used instead.
    """
    if n_e > n_x:
        return PriorPrecision(mode="ensemble")
    if op is None:
        raise ValueError("IES weights with N_e <= N_x need the covariance operator")
    return PriorPrecision(op)


def ies_weights(
    members: np.ndarray,
    predictions: np.ndarray,
    obs: ObservationSet,
    x_pr,
    precision: Optional[PriorPrecision] = None,
    full_formula: bool = False,
    op: Optional[grf.CovarianceOperator] = None,
) -> WeightSet:
    """Weights with the ensemble-average sensitivity shared by all members.

    ``G ~ dD dX^T C_x^-1``, ``C_x G^T ~ dX dD^T`` and ``G C_x G^T ~ dD dD^T``.
    With ``V`` and ``J`` common to all members only ``-1/2 eta^T V^-1 eta`` is
    kept unless ``full_formula`` is set (the extra terms are then a common
    constant).

    The inverse is taken according to ``precision``; see
    :func:`default_weight_precision` for the choice made when it is omitted.
    """
    X = np.asarray(members, dtype=float)
    D = np.asarray(predictions, dtype=float)
    dX, dD = center(X), center(D)
    if precision is None:
        precision = default_weight_precision(X.shape[1], X.shape[0], op)
    x_pr = np.broadcast_to(np.asarray(x_pr, dtype=float), (X.shape[0],))
    eta = D - obs.d_obs[:, None] - dD @ precision.whiten(dX, X - x_pr[:, None])
    quad, logdet_j, logdet_v = _scaled_terms(obs.cd_diag, dD @ dD.T, eta)
    omega = -0.5 * quad
    if full_formula:
        omega = omega + 0.5 * logdet_v - logdet_j
    return WeightSet.from_log_weights(omega, "ies")


def hybrid_weights(
    members: np.ndarray,
    predictions: np.ndarray,
    obs: ObservationSet,
    x_pr,
    op: grf.CovarianceOperator,
    transform=TransformKind.IDENTITY,
    dM: Optional[np.ndarray] = None,
    Mx: Optional[np.ndarray] = None,
) -> WeightSet:
    """Weights with member-specific sensitivities ``G_i = dD dM^+ diag(Mx_i)``.

    ``dM`` and ``Mx`` default to the deviations of ``f(members)`` and the
    transform sensitivities at the members. The full formula is used since
    ``V_i`` and ``J_i`` differ between members.
    """
    X = np.asarray(members, dtype=float)
    D = np.asarray(predictions, dtype=float)
    transform = TransformKind.parse(transform)
    if dM is None:
        dM = center(forward(transform, X))
    if Mx is None:
        Mx = sensitivity(transform, X)
    x_pr = np.broadcast_to(np.asarray(x_pr, dtype=float), (X.shape[0],))
    P, U = hybrid_factors(center(D), dM)
    omega = np.empty(X.shape[1])
    for i in range(X.shape[1]):
        Qt = U * Mx[:, i][:, None]
        W = Qt.T @ grf.apply_cov(op, Qt)
        GCGt = P @ (0.5 * (W + W.T)) @ P.T
        eta = D[:, i] - obs.d_obs - P @ (Qt.T @ (X[:, i] - x_pr))
        quad, logdet_j, logdet_v = _scaled_terms(obs.cd_diag, GCGt, eta)
        omega[i] = 0.5 * logdet_v - 0.5 * quad - logdet_j
    return WeightSet.from_log_weights(omega, "hybrid")

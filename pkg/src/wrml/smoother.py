"""Levenberg-Marquardt iterative ensemble smoothers for RML sampling.

Two update rules are provided:

* :func:`ies_update`, the standard iterative ensemble smoother, where every
  member shares the ensemble-average sensitivity ``G ~ dD dX^T C_x^-1``;
* :func:`hybrid_update`, where ``G = G_m M_x`` combines an ensemble estimate
  of ``G_m ~ dD dM^+`` with the analytic (diagonal) sensitivity ``M_x`` of
  each member, so every member gets its own gain.

Ensembles are stored column-wise: ``members[:, i]`` is member ``i``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg as sla

from . import grf
from .errors import (
    DimensionMismatch,
    LinearSolveFailure,
    MaxIterationsExceeded,
    NumericalError,
    RankDeficient,
)
from .transforms import TransformKind, forward, sensitivity

PINV_RCOND = 1e-8
DM_RCOND = 1e-6


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observed data ``d_obs`` with diagonal noise covariance ``cd_diag``."""

    d_obs: np.ndarray
    cd_diag: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d_obs, dtype=float).ravel()
        cd = np.broadcast_to(np.asarray(self.cd_diag, dtype=float), d.shape).copy()
        if np.any(cd <= 0):
            raise ValueError("observation variances must be positive")
        object.__setattr__(self, "d_obs", d)
        object.__setattr__(self, "cd_diag", cd)

    @classmethod
    def iid(cls, d_obs, std: float) -> "ObservationSet":
        return cls(np.asarray(d_obs, dtype=float), np.full(np.size(d_obs), std**2))

    @property
    def n_d(self) -> int:
        return self.d_obs.size

    def perturb(self, n_e: int, rng_seed: int) -> np.ndarray:
        """Perturbed observations ``d_obs + C_d^{1/2} eps``, one column per member."""
        rng = np.random.default_rng(rng_seed)
        eps = rng.standard_normal((self.n_d, n_e))
        return self.d_obs[:, None] + np.sqrt(self.cd_diag)[:, None] * eps


def data_misfits(predictions, obs: ObservationSet) -> np.ndarray:
    """Half the C_d-weighted squared residual of every column of ``predictions``."""
    D = np.asarray(predictions, dtype=float)
    if D.shape[0] != obs.n_d:
        raise DimensionMismatch(f"predictions have {D.shape[0]} rows, expected {obs.n_d}")
    r = D - (obs.d_obs if D.ndim == 1 else obs.d_obs[:, None])
    return 0.5 * np.sum(r * r / (obs.cd_diag if D.ndim == 1 else obs.cd_diag[:, None]), axis=0)


def center(A: np.ndarray) -> np.ndarray:
    """Scaled deviations ``A (I - 11^T/N) / sqrt(N - 1)``."""
    n = A.shape[1]
    return (A - A.mean(axis=1, keepdims=True)) / np.sqrt(n - 1)


def truncated_pinv(A: np.ndarray, rcond: float) -> np.ndarray:
    """Pseudo-inverse dropping singular values below ``rcond * s_max``."""
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    keep = s > rcond * s[0] if s.size else np.zeros(0, bool)
    return (Vt[keep].T / s[keep]) @ U[:, keep].T


class PriorPrecision:
    """Action of ``dX^T C_x^{-1}`` on residual vectors.

    ``mode="dense"`` uses a truncated eigen pseudo-inverse of the dense C_x;
    ``mode="ensemble"`` replaces ``dX dX^T C_x^{-1}`` by the projection
    ``dX dX^+``, i.e. ``dX^T C_x^{-1} ~ dX^+``. ``"auto"`` picks dense when the
    grid is small enough to materialize C_x.
    """

    def __init__(self, op: Optional[grf.CovarianceOperator] = None, mode: str = "auto",
                 rcond: float = PINV_RCOND):
        if mode == "auto" and op is None:
            mode = "ensemble"
        elif mode == "auto":
            mode = "dense" if op.n <= grf.DENSE_MAX_NODES else "ensemble"
        if mode not in ("dense", "ensemble"):
            raise ValueError(f"unknown precision mode {mode!r}")
        self.mode = mode
        self.rcond = rcond
        self._pinv = None
        if mode == "dense":
            if op is None:
                raise ValueError("dense precision needs the covariance operator")
            w, V = np.linalg.eigh(op.to_dense())
            keep = w > rcond * w.max()
            self._pinv = (V[:, keep] / w[keep]) @ V[:, keep].T

    @property
    def dense_pinv(self) -> Optional[np.ndarray]:
        return self._pinv

    def whiten(self, dX: np.ndarray, R: np.ndarray) -> np.ndarray:
        """Return ``dX^T C_x^{-1} R``."""
        if self.mode == "dense":
            return dX.T @ (self._pinv @ R)
        return truncated_pinv(dX, self.rcond) @ R


@dataclass(eq=False)
class Ensemble:
    """Current members plus the frozen RML pairs ``(anchors, perturbed_obs)``."""

    members: np.ndarray
    anchors: np.ndarray
    perturbed_obs: np.ndarray
    lam: float = 1.0
    iteration: int = 0

    def __post_init__(self):
        n_e = self.members.shape[1]
        if self.anchors.shape != self.members.shape or self.perturbed_obs.shape[1] != n_e:
            raise DimensionMismatch("members, anchors and perturbed_obs must have N_e columns")
        self.anchors.setflags(write=False)
        self.perturbed_obs.setflags(write=False)

    @property
    def n_e(self) -> int:
        return self.members.shape[1]


@dataclass(frozen=True, eq=False)
class EnsembleDeviations:
    dX: np.ndarray
    dD: np.ndarray
    dM: Optional[np.ndarray] = None

    @classmethod
    def from_arrays(cls, X, D, M=None) -> "EnsembleDeviations":
        return cls(center(X), center(D), None if M is None else center(M))


@dataclass
class IterationReport:
    iteration: int
    mean_misfit: float
    lam: float
    misfits: np.ndarray
    accepted: bool


@dataclass(frozen=True)
class LMSchedule:
    """Levenberg-Marquardt damping schedule and stopping rule."""

    gamma: float = 5.0
    lambda0: Optional[float] = None
    max_iter: int = 50
    rel_tol: float = 0.01
    n_small: int = 2
    max_rejections: int = 5


@dataclass
class AssimilationResult:
    ensemble: Ensemble
    predictions: np.ndarray
    reports: list = field(default_factory=list)
    stop_reason: str = ""

    @property
    def converged(self) -> bool:
        return self.stop_reason == "converged"


def init_ensemble(
    op: grf.CovarianceOperator,
    x_pr,
    obs: ObservationSet,
    n_e: int,
    seed: int,
) -> Ensemble:
    """Draw the RML pairs: anchors from N(x_pr, C_x), perturbed data from N(d_obs, C_d)."""
    if n_e < 2:
        raise ValueError("need at least two ensemble members")
    ss = np.random.SeedSequence(seed)
    s_prior, s_obs = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    anchors = grf.sample_matrix(op, x_pr, s_prior, n_e)
    perturbed = obs.perturb(n_e, s_obs)
    return Ensemble(anchors.copy(), anchors, perturbed, lam=1.0)


def _check_finite(X):
    if not np.all(np.isfinite(X)):
        raise NumericalError("update produced non-finite members")
    return X


def ies_update(
    ens: Ensemble,
    predictions: np.ndarray,
    precision: PriorPrecision,
    obs: ObservationSet,
) -> Ensemble:
    """One standard IES step (ensemble-average sensitivity shared by all members)."""
    X = ens.members
    D = np.asarray(predictions, dtype=float)
    if D.shape != ens.perturbed_obs.shape:
        raise DimensionMismatch(f"predictions {D.shape} vs perturbed data {ens.perturbed_obs.shape}")
    damp = 1.0 + ens.lam
    dX, dD = center(X), center(D)
    Y = precision.whiten(dX, X - ens.anchors)  # dX^T C_x^-1 (x - x*)
    inner = damp * np.diag(obs.cd_diag) + dD @ dD.T
    rhs = D - ens.perturbed_obs - dD @ Y / damp
    try:
        sol = sla.cho_solve(sla.cho_factor(inner), rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise LinearSolveFailure(f"IES inner system: {exc}") from exc
    X_new = X - dX @ Y / damp - dX @ (dD.T @ sol)
    return replace(ens, members=_check_finite(X_new))


def hybrid_factors(dD: np.ndarray, dM: np.ndarray, rcond: float = DM_RCOND):
    """Factor ``dD dM^+ = P U^T`` using a truncated SVD of ``dM``.

    Returns ``(P, U)`` with ``P`` of shape ``(N_d, r)`` and ``U`` of shape
    ``(N_m, r)``, ``r`` the retained rank.
    """
    U, s, Vt = np.linalg.svd(dM, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        raise RankDeficient("intermediate-variable deviations are zero")
    keep = s > rcond * s[0]
    P = dD @ (Vt[keep].T / s[keep])
    return P, U[:, keep]


def hybrid_update(
    ens: Ensemble,
    predictions: np.ndarray,
    devs: EnsembleDeviations,
    Mx: np.ndarray,
    op: grf.CovarianceOperator,
    obs: ObservationSet,
) -> Ensemble:
    """One hybrid IES step with a member-specific gain.

    ``Mx[:, i]`` is the diagonal of ``dm/dx`` at member ``i``. The ensemble
    estimate ``G_i = dD dM^+ diag(Mx_i)`` has rank ``r <= N_e - 1``, so the
    ``N_d``-sized inverse in the gain is reduced to an ``r x r`` solve via
    ``P^T (D + P W P^T)^-1 = (I + P^T D^-1 P W)^-1 P^T D^-1``.
    """
    X = ens.members
    D = np.asarray(predictions, dtype=float)
    if D.shape != ens.perturbed_obs.shape:
        raise DimensionMismatch(f"predictions {D.shape} vs perturbed data {ens.perturbed_obs.shape}")
    if devs.dM is None:
        raise ValueError("hybrid update needs intermediate-variable deviations dM")
    damp = 1.0 + ens.lam
    P, U = hybrid_factors(devs.dD, devs.dM)
    r = P.shape[1]
    PtDinv = P.T / (damp * obs.cd_diag)
    PtDinvP = PtDinv @ P
    X_new = np.empty_like(X)
    for i in range(ens.n_e):
        Qt = U * Mx[:, i][:, None]  # M_x^T U, shape (N_x, r)
        CQt = grf.apply_cov(op, Qt)
        W = Qt.T @ CQt
        W = 0.5 * (W + W.T)
        dx = X[:, i] - ens.anchors[:, i]
        resid = D[:, i] - ens.perturbed_obs[:, i] - P @ (Qt.T @ dx) / damp
        try:
            y = np.linalg.solve(np.eye(r) + PtDinvP @ W, PtDinv @ resid)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveFailure(f"hybrid gain for member {i}: {exc}") from exc
        X_new[:, i] = X[:, i] - dx / damp - CQt @ y
    return replace(ens, members=_check_finite(X_new))


def run_assimilation(
    ens: Ensemble,
    model: Callable[[np.ndarray], np.ndarray],
    obs: ObservationSet,
    op: grf.CovarianceOperator,
    mode: str = "ies",
    transform=TransformKind.IDENTITY,
    schedule: LMSchedule = LMSchedule(),
    precision: Optional[PriorPrecision] = None,
    callback: Optional[Callable[[IterationReport], None]] = None,
) -> AssimilationResult:
    """Iterate IES or hybrid IES updates until the stopping rule fires.

    ``model`` maps members ``(N_x, N_e)`` to predictions ``(N_d, N_e)``.
    A step is accepted when the ensemble-mean data misfit decreases; then
    ``lam /= gamma``, otherwise the step is discarded and ``lam *= gamma``.
    Iteration stops when the relative decrease stays below ``rel_tol`` for
    ``n_small`` consecutive accepted steps, after ``max_rejections``
    consecutive rejections, or at ``max_iter`` (with a
    :class:`MaxIterationsExceeded` warning; the best ensemble is returned).
    """
    mode = mode.lower()
    if mode not in ("ies", "hybrid"):
        raise ValueError(f"unknown mode {mode!r}")
    transform = TransformKind.parse(transform)
    if mode == "ies" and precision is None:
        precision = PriorPrecision(op)

    D = model(ens.members)
    misfits = data_misfits(D, obs)
    mean = float(misfits.mean())
    lam = schedule.lambda0 if schedule.lambda0 is not None else mean / obs.n_d
    ens = replace(ens, lam=lam, iteration=0)
    reports = [IterationReport(0, mean, lam, misfits, True)]
    if callback:
        callback(reports[-1])

    small = rejections = 0
    stop = "max_iterations"
    for it in range(1, schedule.max_iter + 1):
        if mode == "ies":
            cand = ies_update(ens, D, precision, obs)
        else:
            X = ens.members
            devs = EnsembleDeviations.from_arrays(X, D, forward(transform, X))
            cand = hybrid_update(ens, D, devs, sensitivity(transform, X), op, obs)
        D_new = model(cand.members)
        mis_new = data_misfits(D_new, obs)
        mean_new = float(mis_new.mean())
        if np.isfinite(mean_new) and mean_new < mean:
            rel = (mean - mean_new) / mean if mean > 0 else 0.0
            ens = replace(cand, lam=ens.lam / schedule.gamma, iteration=it)
            D, misfits, mean = D_new, mis_new, mean_new
            rejections = 0
            small = small + 1 if rel < schedule.rel_tol else 0
            reports.append(IterationReport(it, mean, ens.lam, misfits, True))
        else:
            ens = replace(ens, lam=ens.lam * schedule.gamma, iteration=it)
            rejections += 1
            reports.append(IterationReport(it, mean_new, ens.lam, mis_new, False))
        if callback:
            callback(reports[-1])
        if small >= schedule.n_small:
            stop = "converged"
            break
        if rejections >= schedule.max_rejections:
            stop = "stalled"
            break
    if stop == "max_iterations":
        warnings.warn(
            f"smoother stopped after {schedule.max_iter} iterations without converging",
            MaxIterationsExceeded,
            stacklevel=2,
        )
    return AssimilationResult(ens, D, reports, stop)

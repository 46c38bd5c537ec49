"""End-to-end experiments on the two-phase flow testbed and their metrics."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import fieldio, grf
from .config import ExperimentConfig
from .denoise import (
    NoiseModel,
    PriorGrid,
    default_omega_pr,
    denoise_weights,
    fit_noise_sigma,
    power_regularize,
    tune_prior,
)
from .errors import (
    ConfigError,
    DegenerateBasis,
    DegenerateEnsemble,
    DimensionMismatch,
    MaxIterationsExceeded,
    NumericalError,
    WRMLError,
    ZeroVariance,
)
from .flowsim import simulate_batch
from .smoother import (
    Ensemble,
    ObservationSet,
    PriorPrecision,
    data_misfits,
    init_ensemble,
    run_assimilation,
)
from .transforms import forward, to_permeability
from .weights import WeightSet, hybrid_weights, ies_weights

log = logging.getLogger(__name__)

GS_TOL = 1e-10


# -- forward model ---------------------------------------------------------

class FlowModel:
    """Latent fields ``(N_x, B)`` to water-cut data, flattened time-major.

    Entry ``k * n_wells + w`` of a data vector is well ``w`` at the ``k``-th
    observation time.
    """

    def __init__(self, cfg: ExperimentConfig):
        self.flow = cfg.flow_config()
        self.transform = cfg.transform_kind
        self.times = cfg.observations.history_times()
        self.forecast_time = cfg.observations.forecast_time
        self.n_wells = len(self.flow.wells.producers)

    @property
    def n_d(self) -> int:
        return len(self.times) * self.n_wells

    def permeability(self, X) -> np.ndarray:
        return to_permeability(forward(self.transform, np.asarray(X, dtype=float)))

    def water_cut(self, X, times: Sequence[float]) -> np.ndarray:
        """Water cut of every column of ``X``, shape ``(B, n_times, n_wells)``."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return simulate_batch(self.permeability(X).T, self.flow, times).water_cut

    def __call__(self, X) -> np.ndarray:
        wc = self.water_cut(X, self.times)
        return wc.reshape(wc.shape[0], -1).T

    def history_and_forecast(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Data at the history times ``(N_d, B)`` and the forecast ``(n_wells, B)``."""
        wc = self.water_cut(X, list(self.times) + [self.forecast_time])
        hist = wc[:, :-1].reshape(wc.shape[0], -1).T
        return hist, wc[:, -1].T


@dataclass(frozen=True, eq=False)
class Truth:
    x_true: np.ndarray
    d_clean: np.ndarray
    d_obs: np.ndarray
    forecast_clean: np.ndarray
    forecast_obs: np.ndarray


def generate_truth(cfg: ExperimentConfig, op: Optional[grf.CovarianceOperator] = None,
                   model: Optional[FlowModel] = None) -> Truth:
    """Draw the reference field from the prior and simulate noisy data from it.

    Noisy water cut is not clipped to ``[0, 1]``. The noisy value at the
    forecast time is the outcome used by the log score.
    """
    op = op or grf.build_embedding(cfg.covariance.build(), cfg.grid.build())
    model = model or FlowModel(cfg)
    x_true = grf.sample_matrix(op, cfg.prior_mean, cfg.seed("truth"), 1)[:, 0]
    hist, fc = model.history_and_forecast(x_true)
    hist, fc = hist[:, 0], fc[:, 0]
    rng = np.random.default_rng(cfg.seed("observation-noise"))
    std = cfg.observations.noise_std
    noise = rng.standard_normal(hist.size + fc.size) * std
    return Truth(x_true, hist, hist + noise[: hist.size], fc, fc + noise[hist.size:])


# -- metrics ---------------------------------------------------------------

def misfit(prediction, d_obs, cd_diag) -> float:
    """``1/2 (g - d)^T C_d^-1 (g - d)`` for diagonal ``C_d``."""
    g = np.asarray(prediction, dtype=float)
    d = np.asarray(d_obs, dtype=float)
    if g.shape != d.shape:
        raise DimensionMismatch(f"prediction {g.shape} vs data {d.shape}")
    r = g - d
    return float(0.5 * np.sum(r * r / np.broadcast_to(cd_diag, d.shape)))


def weighted_moments(samples, weights) -> tuple[float, float]:
    """Weighted mean and variance with the ``1/(1 - sum w^2)`` bias correction.

    When one member carries all the weight the correction is undefined and the
    variance is reported as zero.
    """
    x = np.asarray(samples, dtype=float)
    w = np.asarray(weights, dtype=float)
    mu = float(np.sum(w * x))
    denom = 1.0 - float(np.sum(w * w))
    if denom <= 1e-12:
        return mu, 0.0
    return mu, float(np.sum(w * (x - mu) ** 2) / denom)


def log_score(forecast_samples, weights, outcome: float, noise_var: float = 0.0) -> float:
    """Negative log density of ``outcome`` under a Gaussian fit to the weighted samples.

    Lower is better. ``noise_var`` is added to the predictive variance when
    the outcome is a noisy observation.
    """
    mu, var = weighted_moments(forecast_samples, weights)
    var += noise_var
    if var < 1e-12:
        raise DegenerateEnsemble(f"weighted predictive variance {var:.3e} is too small")
    return 0.5 * math.log(2.0 * math.pi * var) + (outcome - mu) ** 2 / (2.0 * var)


def weight_misfit_correlation(log_weights, misfits) -> float:
    """Pearson correlation between log-weights and data misfits."""
    a = np.asarray(getattr(log_weights, "log_weights", log_weights), dtype=float)
    b = np.asarray(misfits, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch("log-weights and misfits differ in length")
    if a.size < 3:
        raise ValueError("need at least 3 members")
    if np.std(a) == 0 or np.std(b) == 0:
        raise ZeroVariance("correlation undefined for constant input")
    return float(np.corrcoef(a, b)[0, 1])


@dataclass(frozen=True, eq=False)
class ForecastReport:
    label: str
    mean: np.ndarray
    std: np.ndarray
    outcome: np.ndarray
    scores: np.ndarray
    ess: float

    @property
    def total_score(self) -> float:
        return float(np.sum(self.scores))


def forecast_report(label: str, forecasts: np.ndarray, weights: WeightSet,
                    outcome, noise_var: float = 0.0) -> ForecastReport:
    """Per-well weighted predictive moments and log scores; ``forecasts`` is ``(n_wells, N_e)``."""
    forecasts = np.asarray(forecasts, dtype=float)
    outcome = np.asarray(outcome, dtype=float)
    means, stds, scores = [], [], []
    for k in range(forecasts.shape[0]):
        mu, var = weighted_moments(forecasts[k], weights.weights)
        means.append(mu)
        stds.append(math.sqrt(var))
        scores.append(log_score(forecasts[k], weights.weights, outcome[k], noise_var))
    return ForecastReport(label, np.array(means), np.array(stds), outcome,
                          np.array(scores), weights.ess)


# -- posterior landscape ---------------------------------------------------

class NegLogPosterior:
    """``O(x) = 1/2 (x - x_pr)^T C_x^+ (x - x_pr) + 1/2 (g - d)^T C_d^-1 (g - d)``.

    ``model`` maps latent columns ``(N_x, B)`` to data ``(N_d, B)``.
    """

    def __init__(self, model: Callable, obs: ObservationSet, op: grf.CovarianceOperator, x_pr):
        self.model = model
        self.obs = obs
        self.x_pr = np.broadcast_to(np.asarray(x_pr, dtype=float), (op.n,))
        self.pinv = PriorPrecision(op, "dense").dense_pinv

    def prior_term(self, X) -> np.ndarray:
        R = np.asarray(X, dtype=float) - self.x_pr[:, None]
        return 0.5 * np.sum(R * (self.pinv @ R), axis=0)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        D = self.model(X)
        r = D - self.obs.d_obs[:, None]
        return self.prior_term(X) + 0.5 * np.sum(r * r / self.obs.cd_diag[:, None], axis=0)


@dataclass(frozen=True, eq=False)
class LandscapeSlice:
    alpha: np.ndarray
    beta: np.ndarray
    values: np.ndarray  # (len(beta), len(alpha))
    anchors: np.ndarray  # (3, 2) coordinates of the input points
    anchor_values: np.ndarray
    origin: np.ndarray
    basis: np.ndarray  # (N_x, 2)

    def point(self, a: float, b: float) -> np.ndarray:
        return self.origin + a * self.basis[:, 0] + b * self.basis[:, 1]

    def strict_local_minima(self) -> list[tuple[int, int]]:
        """Grid indices ``(j, i)`` strictly below all of their 8 neighbours."""
        v = self.values
        out = []
        for j in range(1, v.shape[0] - 1):
            for i in range(1, v.shape[1] - 1):
                nb = v[j - 1:j + 2, i - 1:i + 2].copy()
                nb[1, 1] = np.inf
                if v[j, i] < nb.min():
                    out.append((j, i))
        return out

    def nearest_index(self, a: float, b: float) -> tuple[int, int]:
        return int(np.argmin(np.abs(self.beta - b))), int(np.argmin(np.abs(self.alpha - a)))


def _aligned_axis(target: float, others: Sequence[float], extent: float, n: int) -> np.ndarray:
    """Equispaced axis through 0 and ``target`` covering ``others`` with a relative margin."""
    pts = [0.0, target, *others]
    lo, hi = min(pts), max(pts)
    span = hi - lo
    lo, hi = lo - extent * span, hi + extent * span
    q = max(1, round(abs(target) * (n - 1) / (hi - lo)))
    h = abs(target) / q
    k0 = math.floor(lo / h + 1e-9)
    k1 = math.ceil(hi / h - 1e-9)
    return np.arange(k0, k1 + 1) * h


def landscape_slice(
    x_a, x_b, x_c,
    objective: Callable[[np.ndarray], np.ndarray],
    grid_res: int = 31,
    extent: float = 0.5,
    batch: int = 256,
) -> LandscapeSlice:
    """Evaluate ``objective`` on the plane through three points.

    Gram-Schmidt on ``(x_b - x_a, x_c - x_a)`` gives the basis; the grid is
    aligned so that ``x_a`` and ``x_b`` fall on grid nodes and covers all three
    points with a margin of ``extent`` times their spread.
    """
    x_a, x_b, x_c = (np.asarray(v, dtype=float) for v in (x_a, x_b, x_c))
    u, v = x_b - x_a, x_c - x_a
    nu = np.linalg.norm(u)
    if nu < GS_TOL:
        raise DegenerateBasis("x_a and x_b coincide")
    e1 = u / nu
    w = v - (v @ e1) * e1
    nw = np.linalg.norm(w)
    if nw < GS_TOL * max(1.0, np.linalg.norm(v)):
        raise DegenerateBasis("the three points are collinear")
    e2 = w / nw
    anchors = np.array([[0.0, 0.0], [nu, 0.0], [v @ e1, nw]])
    alpha = _aligned_axis(nu, [anchors[2, 0]], extent, grid_res)
    beta = _aligned_axis(nw, [], extent, grid_res)
    A, B = np.meshgrid(alpha, beta)
    pts = x_a[:, None] + e1[:, None] * A.ravel() + e2[:, None] * B.ravel()
    vals = np.concatenate([objective(pts[:, k:k + batch]) for k in range(0, pts.shape[1], batch)])
    anchor_values = objective(np.column_stack([x_a, x_b, x_c]))
    return LandscapeSlice(alpha, beta, vals.reshape(A.shape), anchors, anchor_values,
                          x_a, np.column_stack([e1, e2]))


def fit_quadratic(slc: LandscapeSlice) -> np.ndarray:
    """Least-squares quadratic ``c0 + c1 a + c2 b + c3 a^2 + c4 a b + c5 b^2``; returns its Hessian."""
    A, B = np.meshgrid(slc.alpha, slc.beta)
    a, b = A.ravel(), B.ravel()
    design = np.column_stack([np.ones_like(a), a, b, a * a, a * b, b * b])
    c, *_ = np.linalg.lstsq(design, slc.values.ravel(), rcond=None)
    return np.array([[2 * c[3], c[4]], [c[4], 2 * c[5]]])


# -- run pipeline ----------------------------------------------------------

STAGES = ("truth", "prior", "assimilate", "weigh", "denoise", "sweep", "forecast", "landscape")


class StageError(WRMLError):
    """A pipeline stage failed; ``cause`` holds the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_matrix_csv(path, A: np.ndarray, prefix: str = "member") -> Path:
    A = np.atleast_2d(A)
    return write_csv(path, [f"{prefix}_{i:04d}" for i in range(A.shape[1])], A)


def read_matrix_csv(path) -> np.ndarray:
    _, rows = read_csv(path)
    return np.array([[float(v) for v in r] for r in rows])


def _write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


class Run:
    """A run directory plus the objects shared by all stages."""

    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.grid = cfg.grid.build()
        self.op = grf.build_embedding(cfg.covariance.build(), self.grid)
        self.model = FlowModel(cfg)
        self.x_pr = np.full(self.grid.n_nodes, float(cfg.prior_mean))
        self.noise_var = cfg.observations.noise_std**2

    # -- paths and loaders ------------------------------------------------
    def path(self, *parts) -> Path:
        return self.dir.joinpath(*parts)

    def manifest(self) -> dict:
        p = self.path("manifest.json")
        return json.loads(p.read_text()) if p.exists() else {}

    def update_manifest(self, stage: str, info: dict) -> None:
        m = self.manifest()
        m.setdefault("config_hash", self.cfg.config_hash())
        m.setdefault("seeds", {})
        m.setdefault("stages", {})
        m["master_seed"] = self.cfg.master_seed
        m["wells"] = self.model.flow.wells.as_dict(self.grid)
        m["stages"][stage] = info
        _write_json(self.path("manifest.json"), m)

    def record_seed(self, name: str) -> int:
        s = self.cfg.seed(name)
        m = self.manifest()
        m.setdefault("seeds", {})[name] = s
        _write_json(self.path("manifest.json"), m)
        return s

    def obs(self) -> ObservationSet:
        d = read_matrix_csv(self.path("truth", "observations.csv"))[:, 1:].ravel()
        return ObservationSet(d, np.full(d.size, self.noise_var))

    def forecast_outcome(self) -> np.ndarray:
        _, rows = read_csv(self.path("truth", "forecast.csv"))
        return np.array([float(r[2]) for r in rows])

    def x_true(self) -> np.ndarray:
        return fieldio.read_field(self.path("truth", "x_true.field"))[0]

    def modes(self) -> list[str]:
        return list(self.cfg.smoother.modes)

    def final_members(self, mode: str) -> np.ndarray:
        return fieldio.read_ensemble(self.path("assimilate", mode, "members"))

    def predictions(self, mode: str) -> np.ndarray:
        return read_matrix_csv(self.path("assimilate", mode, "predictions.csv"))

    def forecasts(self, mode: str) -> np.ndarray:
        return read_matrix_csv(self.path("assimilate", mode, "forecasts.csv"))

    def raw_weights(self, mode: str) -> WeightSet:
        _, rows = read_csv(self.path("weights", f"{mode}.csv"))
        return WeightSet.from_log_weights([float(r[1]) for r in rows], mode)

    def misfits(self, mode: str) -> np.ndarray:
        _, rows = read_csv(self.path("weights", f"{mode}.csv"))
        return np.array([float(r[3]) for r in rows])

    def denoised_weights(self, mode: str) -> Optional[WeightSet]:
        p = self.path("denoise", f"{mode}.csv")
        if not p.exists():
            return None
        _, rows = read_csv(p)
        return WeightSet.from_log_weights([float(r[2]) for r in rows], "denoised")

    # -- computations shared by stages ------------------------------------
    def assimilate(self, ens: Ensemble, mode: str, obs: ObservationSet):
        s = self.cfg.smoother
        precision = PriorPrecision(self.op, s.precision) if mode == "ies" else None
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", MaxIterationsExceeded)
            res = run_assimilation(ens, self.model, obs, self.op, mode=mode,
                                   transform=self.cfg.transform_kind,
                                   schedule=s.schedule(), precision=precision)
        return res, [str(w.message) for w in caught if issubclass(w.category, MaxIterationsExceeded)]

    def weights(self, mode: str, X: np.ndarray, D: np.ndarray, obs: ObservationSet) -> WeightSet:
        wc = self.cfg.weights
        if mode == "ies":
            prec = None if wc.ies_precision == "auto" else PriorPrecision(self.op, wc.ies_precision)
            return ies_weights(X, D, obs, self.x_pr, prec, full_formula=wc.full_formula, op=self.op)
        return hybrid_weights(X, D, obs, self.x_pr, self.op, self.cfg.transform_kind)


def stage_truth(run: Run) -> dict:
    cfg = run.cfg
    run.record_seed("truth")
    run.record_seed("observation-noise")
    truth = generate_truth(cfg, run.op, run.model)
    fieldio.write_field(run.path("truth", "x_true.field"), truth.x_true, run.grid,
                        {"sigma": cfg.covariance.sigma, "rho": cfg.covariance.rho})
    nw = run.model.n_wells
    times = run.model.times
    wells = [f"P{k + 1}" for k in range(nw)]
    obs = truth.d_obs.reshape(len(times), nw)
    clean = truth.d_clean.reshape(len(times), nw)
    write_csv(run.path("truth", "observations.csv"), ["time", *wells],
              ([t, *row] for t, row in zip(times, obs)))
    write_csv(run.path("truth", "clean.csv"), ["time", *wells],
              ([t, *row] for t, row in zip(times, clean)))
    write_csv(run.path("truth", "forecast.csv"), ["well", "clean", "observed"],
              ([w, c, o] for w, c, o in zip(wells, truth.forecast_clean, truth.forecast_obs)))
    return {"misfit_true": misfit(truth.d_clean, truth.d_obs, run.noise_var), "n_d": truth.d_obs.size}


def stage_prior(run: Run) -> dict:
    obs = run.obs()
    ens = init_ensemble(run.op, run.x_pr, obs, run.cfg.n_e, run.record_seed("ensemble"))
    fieldio.write_ensemble(run.path("prior", "anchors"), ens.anchors, run.grid)
    write_matrix_csv(run.path("prior", "perturbed_obs.csv"), ens.perturbed_obs)
    return {"n_e": ens.n_e}


def _load_prior(run: Run) -> Ensemble:
    anchors = fieldio.read_ensemble(run.path("prior", "anchors"))
    perturbed = read_matrix_csv(run.path("prior", "perturbed_obs.csv"))
    return Ensemble(anchors.copy(), anchors, perturbed)


def stage_assimilate(run: Run) -> dict:
    obs = run.obs()
    info = {}
    for mode in run.modes():
        res, warned = run.assimilate(_load_prior(run), mode, obs)
        X = res.ensemble.members
        D, F = run.model.history_and_forecast(X)
        base = run.path("assimilate", mode)
        fieldio.write_ensemble(base / "members", X, run.grid, {"mode": mode})
        write_matrix_csv(base / "predictions.csv", D)
        write_matrix_csv(base / "forecasts.csv", F)
        write_csv(base / "iterations.csv", ["iteration", "lambda", "mean_misfit", "accepted"],
                  ([r.iteration, r.lam, r.mean_misfit, int(r.accepted)] for r in res.reports))
        info[mode] = {"stop_reason": res.stop_reason, "iterations": len(res.reports) - 1,
                      "final_mean_misfit": float(data_misfits(D, obs).mean()),
                      "warnings": warned}
    return info


def stage_weigh(run: Run) -> dict:
    obs = run.obs()
    info = {}
    for mode in run.modes():
        X, D = run.final_members(mode), run.predictions(mode)
        ws = run.weights(mode, X, D, obs)
        mis = data_misfits(D, obs)
        write_csv(run.path("weights", f"{mode}.csv"), ["member", "log_weight", "weight", "misfit"],
                  ([i, lw, w, m] for i, (lw, w, m) in enumerate(zip(ws.log_weights, ws.weights, mis))))
        info[mode] = {
            "ess": ws.ess,
            "correlation": weight_misfit_correlation(ws, mis),
            "unweighted_mean_misfit": float(mis.mean()),
            "weighted_mean_misfit": float(np.sum(ws.weights * mis)),
        }
    return info


def _replicate_sigma_o(run: Run, mode: str, obs: ObservationSet) -> tuple[float, list]:
    """Spread of the final log-weight of one particle shared by independent ensembles."""
    dc = run.cfg.denoise
    common = init_ensemble(run.op, run.x_pr, obs, 2, run.record_seed("replicate-common"))
    finals = []
    for r in range(dc.replicates):
        e = init_ensemble(run.op, run.x_pr, obs, dc.replicate_size - 1,
                          run.record_seed(f"replicate-{r}"))
        anchors = np.column_stack([e.anchors, common.anchors[:, 0]])
        perturbed = np.column_stack([e.perturbed_obs, common.perturbed_obs[:, 0]])
        res, _ = run.assimilate(Ensemble(anchors.copy(), anchors, perturbed), mode, obs)
        X = res.ensemble.members
        finals.append(float(run.weights(mode, X, res.predictions, obs).log_weights[-1]))
    return fit_noise_sigma(finals), finals


def stage_denoise(run: Run) -> dict:
    dc = run.cfg.denoise
    obs = run.obs()
    info = {}
    for mode in run.modes():
        ws = run.raw_weights(mode)
        omega = ws.log_weights
        finals = []
        if dc.sigma_o is not None:
            sigma_o = float(dc.sigma_o)
        elif dc.replicates >= 3:
            sigma_o, finals = _replicate_sigma_o(run, mode, obs)
        else:
            raise ConfigError("denoise needs sigma_o or at least 3 replicates")
        if sigma_o <= 0:
            raise NumericalError("replicate log-weights have zero spread")
        if dc.tune:
            grid = PriorGrid(dc.sigma_pr_grid, dc.nu_grid,
                             None if dc.omega_pr is None else [dc.omega_pr])
            model = tune_prior(omega, sigma_o, grid, run.record_seed(f"tune-{mode}"))
        else:
            w_pr = dc.omega_pr if dc.omega_pr is not None else default_omega_pr(
                omega, dc.sigma_pr, dc.nu, sigma_o)
            model = NoiseModel(sigma_o, dc.sigma_pr, dc.nu, w_pr)
        den = denoise_weights(model, omega)
        write_csv(run.path("denoise", f"{mode}.csv"), ["member", "raw", "denoised", "weight"],
                  ([i, a, b, w] for i, (a, b, w) in enumerate(zip(omega, den.log_weights, den.weights))))
        info[mode] = {"noise_model": dataclasses.asdict(model), "replicate_log_weights": finals,
                      "ess_raw": ws.ess, "ess_denoised": den.ess}
        _write_json(run.path("denoise", f"{mode}_noise_model.json"), info[mode]["noise_model"])
    return info


def stage_sweep(run: Run) -> dict:
    outcome = run.forecast_outcome()
    info = {}
    for mode in run.modes():
        ws, F = run.raw_weights(mode), run.forecasts(mode)
        rows = []
        for e in run.cfg.sweep.exponents:
            pw = power_regularize(ws.log_weights, e)
            rows.append([e, pw.ess, forecast_report("power", F, pw, outcome, run.noise_var).total_score])
        write_csv(run.path("sweep", f"{mode}.csv"), ["exponent", "ess", "log_score"], rows)
        best = min(rows, key=lambda r: r[2])
        info[mode] = {"best_exponent": best[0], "best_log_score": best[2], "best_ess": best[1]}
    return info


def stage_forecast(run: Run) -> dict:
    outcome = run.forecast_outcome()
    sweep = run.manifest().get("stages", {}).get("sweep", {})
    info = {}
    for mode in run.modes():
        ws, F = run.raw_weights(mode), run.forecasts(mode)
        sets = [("uniform", power_regularize(ws.log_weights, 0.0)), ("raw", ws)]
        den = run.denoised_weights(mode)
        if den is not None:
            sets.append(("denoised", den))
        if mode in sweep:
            sets.append(("power-best", power_regularize(ws.log_weights, sweep[mode]["best_exponent"])))
        rows, totals = [], {}
        for label, w in sets:
            rep = forecast_report(label, F, w, outcome, run.noise_var)
            totals[label] = {"log_score": rep.total_score, "ess": rep.ess}
            for k in range(F.shape[0]):
                rows.append([label, f"P{k + 1}", rep.mean[k], rep.std[k], rep.outcome[k], rep.scores[k]])
        write_csv(run.path("forecast", f"{mode}.csv"),
                  ["weights", "well", "mean", "std", "outcome", "log_score"], rows)
        info[mode] = totals
    return info


def stage_landscape(run: Run) -> dict:
    lc = run.cfg.landscape
    obs = run.obs()
    x_true = run.x_true()
    mode = lc.mode if lc.mode in run.modes() else run.modes()[0]
    X = run.final_members(mode)
    x_c = X[:, int(np.argmax(run.raw_weights(mode).log_weights))]
    objective = NegLogPosterior(run.model, obs, run.op, run.x_pr)
    slc = landscape_slice(x_true, 2 * run.x_pr - x_true, x_c, objective, lc.grid_res, lc.extent)
    rows = ([a, b, slc.values[j, i]] for j, b in enumerate(slc.beta) for i, a in enumerate(slc.alpha))
    write_csv(run.path("landscape", "slice.csv"), ["alpha", "beta", "objective"], rows)
    write_csv(run.path("landscape", "anchors.csv"), ["point", "alpha", "beta", "objective"],
              ([name, *slc.anchors[k], slc.anchor_values[k]]
               for k, name in enumerate(["x_true", "x_mirror", "x_member"])))
    return {"local_minima": len(slc.strict_local_minima()), "member_mode": mode}


STAGE_FUNCS = {
    "truth": stage_truth,
    "prior": stage_prior,
    "assimilate": stage_assimilate,
    "weigh": stage_weigh,
    "denoise": stage_denoise,
    "sweep": stage_sweep,
    "forecast": stage_forecast,
    "landscape": stage_landscape,
}


def run_stage(run: Run, stage: str) -> dict:
    log.info("stage %s", stage)
    try:
        info = STAGE_FUNCS[stage](run)
    except (ConfigError, StageError):
        raise
    except Exception as exc:  # labelled and re-raised for the CLI
        raise StageError(stage, exc) from exc
    run.update_manifest(stage, info)
    return info


def run_experiment(cfg: ExperimentConfig, out_dir, stages: Sequence[str] = STAGES) -> Path:
    """Run the requested stages in order; returns the run directory."""
    run = Run(cfg, out_dir)
    cfg.dump(run.path("config.yaml"))
    for stage in stages:
        run_stage(run, stage)
    return run.dir

import warnings
from dataclasses import replace

import numpy as np
import pytest

from linear_problem import make_linear
from wrml import grf
from wrml.errors import DimensionMismatch, MaxIterationsExceeded
from wrml.smoother import (
    Ensemble,
    EnsembleDeviations,
    LMSchedule,
    ObservationSet,
    PriorPrecision,
    center,
    data_misfits,
    hybrid_update,
    ies_update,
    init_ensemble,
    run_assimilation,
)


@pytest.fixture(scope="module")
def lin():
    return make_linear()


def test_center_rows_sum_to_zero(rng):
    A = rng.standard_normal((7, 5))
    dA = center(A)
    assert np.max(np.abs(dA.sum(axis=1))) <= 1e-12
    assert np.allclose(dA @ dA.T, np.cov(A), atol=1e-12)


def test_init_ensemble(lin):
    a = init_ensemble(lin.op, lin.x_pr, lin.obs, 6, 11)
    b = init_ensemble(lin.op, lin.x_pr, lin.obs, 6, 11)
    assert np.array_equal(a.members, b.members) and np.array_equal(a.perturbed_obs, b.perturbed_obs)
    assert np.array_equal(a.members, a.anchors)
    assert not a.anchors.flags.writeable and not a.perturbed_obs.flags.writeable
    with pytest.raises(ValueError):
        init_ensemble(lin.op, lin.x_pr, lin.obs, 1, 0)


def test_init_degenerate_prior():
    op = grf.build_embedding(grf.CovarianceSpec(1e-12, 1.1), grf.Grid2D.square(4))
    obs = ObservationSet.iid([0.0], 1.0)
    ens = init_ensemble(op, 0.3, obs, 2, 0)
    assert np.allclose(ens.members, 0.3, atol=1e-9)


def test_perturbed_obs_statistics():
    obs = ObservationSet.iid([0.5], 0.02)
    op = grf.build_embedding(grf.CovarianceSpec(0.8, 1.1), grf.Grid2D.square(3))
    ens = init_ensemble(op, 0.0, obs, 10_000, 5)
    assert abs(np.std(ens.perturbed_obs - 0.5) / 0.02 - 1) < 0.03


def test_data_misfits():
    obs = ObservationSet.iid(np.zeros(540), 0.02)
    assert data_misfits(np.full(540, 0.02), obs) == pytest.approx(270.0)
    with pytest.raises(DimensionMismatch):
        data_misfits(np.zeros(3), obs)


def _ens(lin, n_e, seed=3, lam=1.0):
    return replace(init_ensemble(lin.op, lin.x_pr, lin.obs, n_e, seed), lam=lam)


def test_ies_zero_update_at_fixed_point(lin):
    ens = _ens(lin, 40)
    # Predictions equal to the perturbed data with x = x*: both residuals vanish.
    new = ies_update(ens, ens.perturbed_obs.copy(), PriorPrecision(lin.op), lin.obs)
    assert np.max(np.abs(new.members - ens.members)) <= 1e-12


def test_ies_large_lambda_tends_to_zero(lin):
    ens = _ens(lin, 40)
    steps = []
    for lam in (1e4, 1e6, 1e8):
        new = ies_update(replace(ens, lam=lam), lin.model(ens.members), PriorPrecision(lin.op), lin.obs)
        steps.append(np.max(np.abs(new.members - ens.members)))
    # The step shrinks like 1 / lambda.
    assert steps[1] / steps[0] == pytest.approx(1e-2, rel=5e-2)
    assert steps[2] / steps[1] == pytest.approx(1e-2, rel=1e-3)


def exact_cov_ensemble(lin, n_e, seed=7):
    """Members whose sample covariance equals C_x exactly (needs N_e > N_x)."""
    n = lin.op.n
    rng = np.random.default_rng(seed)
    Q = rng.standard_normal((n_e, n))
    Q -= Q.mean(axis=0)  # columns orthogonal to 1
    W, _ = np.linalg.qr(Q)  # (n_e, n), orthonormal and centred
    w, V = np.linalg.eigh(lin.op.to_dense())
    root = V @ np.diag(np.sqrt(np.maximum(w, 0))) @ V.T
    X = root @ W.T * np.sqrt(n_e - 1) + rng.standard_normal((n, 1))
    assert np.allclose(center(X) @ center(X).T, lin.op.to_dense(), atol=1e-10)
    return X


def test_ies_single_step_is_rml_solution(lin):
    # lambda = 0, x = x*, dX dX^T = C_x: one step gives the exact RML solution.
    X = exact_cov_ensemble(lin, 60)
    ens = Ensemble(X.copy(), X.copy(), lin.obs.perturb(60, 1), lam=0.0)
    new = ies_update(ens, lin.model(ens.members), PriorPrecision(lin.op), lin.obs)
    assert np.max(np.abs(new.members - lin.rml(ens.anchors, ens.perturbed_obs))) <= 1e-8


def test_update_leaves_pairs_untouched(lin):
    ens = _ens(lin, 30)
    anchors, pert = ens.anchors.copy(), ens.perturbed_obs.copy()
    ies_update(ens, lin.model(ens.members), PriorPrecision(lin.op), lin.obs)
    X, D = ens.members, lin.model(ens.members)
    hybrid_update(ens, D, EnsembleDeviations.from_arrays(X, D, X), np.ones_like(X), lin.op, lin.obs)
    assert np.array_equal(anchors, ens.anchors) and np.array_equal(pert, ens.perturbed_obs)


def test_ies_permutation_invariant(lin):
    ens = _ens(lin, 30)
    ens = replace(ens, members=ens.members + 0.1)
    perm = np.random.default_rng(4).permutation(30)
    pens = Ensemble(ens.members[:, perm], ens.anchors[:, perm].copy(), ens.perturbed_obs[:, perm].copy(), ens.lam)
    prec = PriorPrecision(lin.op)
    a = ies_update(ens, lin.model(ens.members), prec, lin.obs).members
    b = ies_update(pens, lin.model(pens.members), prec, lin.obs).members
    assert np.allclose(a[:, perm], b, atol=1e-10)


def test_hybrid_equals_ies_with_exact_ensemble_covariance(lin):
    # The two rules coincide when dX dX^T equals C_x, M_x = I and f is the
    # identity. Build such an ensemble from an orthonormal basis.
    n_e = 60
    rng = np.random.default_rng(8)
    X = exact_cov_ensemble(lin, n_e)
    anchors = X + 0.05 * rng.standard_normal(X.shape)
    pert = lin.obs.perturb(n_e, 1)
    ens = Ensemble(X.copy(), anchors, pert, lam=0.7)
    D = lin.model(X)
    a = ies_update(ens, D, PriorPrecision(lin.op), lin.obs).members
    b = hybrid_update(ens, D, EnsembleDeviations.from_arrays(X, D, X), np.ones_like(X), lin.op, lin.obs).members
    assert np.max(np.abs(a - b)) <= 1e-8


def test_hybrid_zero_update_at_fixed_point(lin):
    ens = _ens(lin, 40)
    X = ens.members
    new = hybrid_update(ens, ens.perturbed_obs.copy(), EnsembleDeviations.from_arrays(X, lin.model(X), X),
                        np.ones_like(X), lin.op, lin.obs)
    assert np.max(np.abs(new.members - X)) <= 1e-12


def test_hybrid_converges_to_rml_minimizers(lin):
    ens = init_ensemble(lin.op, lin.x_pr, lin.obs, 60, 9)
    res = run_assimilation(ens, lin.model, lin.obs, lin.op, mode="hybrid",
                           schedule=LMSchedule(rel_tol=1e-6, max_iter=40))
    X = res.ensemble.members
    # Plug the members into the RML map x' = x + C G^T C_d^-1 (g(x) - delta).
    C = lin.op.to_dense()
    resid = lin.model(X) - ens.perturbed_obs
    back = X + C @ lin.G.T @ (resid / lin.obs.cd_diag[:, None])
    assert np.max(np.abs(back - ens.anchors)) <= 1e-6


def test_mean_misfit_decreases_on_accepted_steps(lin):
    obs = ObservationSet(lin.G @ np.ones(lin.op.n) * 0.2, np.full(lin.obs.n_d, 1e-4))
    ens = init_ensemble(lin.op, lin.x_pr, obs, 40, 2)
    res = run_assimilation(ens, lin.model, obs, lin.op, mode="ies")
    acc = [r.mean_misfit for r in res.reports if r.accepted]
    assert all(b < a for a, b in zip(acc, acc[1:]))
    assert all(np.all(r.misfits >= 0) for r in res.reports)


def test_stopping_rule_and_rollback(lin):
    ens = init_ensemble(lin.op, lin.x_pr, lin.obs, 40, 2)
    res = run_assimilation(ens, lin.model, lin.obs, lin.op, mode="ies", schedule=LMSchedule(rel_tol=0.01))
    assert res.converged
    acc = [r for r in res.reports if r.accepted]
    rel = [(a.mean_misfit - b.mean_misfit) / a.mean_misfit for a, b in zip(acc, acc[1:])]
    assert rel[-1] < 0.01 and rel[-2] < 0.01
    # Rejected steps never change the returned members: rerunning is identical.
    res2 = run_assimilation(ens, lin.model, lin.obs, lin.op, mode="ies", schedule=LMSchedule(rel_tol=0.01))
    assert np.array_equal(res.ensemble.members, res2.ensemble.members)


def test_max_iterations_warns(lin):
    ens = init_ensemble(lin.op, lin.x_pr, lin.obs, 30, 2)
    with pytest.warns(MaxIterationsExceeded):
        res = run_assimilation(ens, lin.model, lin.obs, lin.op, schedule=LMSchedule(max_iter=2))
    assert res.stop_reason == "max_iterations"
    assert res.reports[-1].iteration == 2


def test_rejections_stop(lin):
    ens = init_ensemble(lin.op, lin.x_pr, lin.obs, 30, 2)
    calls = {"n": 0}

    def worsening(X):
        calls["n"] += 1
        return lin.model(X) + (0.0 if calls["n"] == 1 else 100.0)

    res = run_assimilation(ens, worsening, lin.obs, lin.op, schedule=LMSchedule(max_rejections=3))
    assert res.stop_reason == "stalled"
    assert [r.accepted for r in res.reports] == [True, False, False, False]
    assert res.reports[-1].lam == pytest.approx(res.reports[0].lam * 5**3)
    assert np.array_equal(res.ensemble.members, ens.members)


def test_bad_mode(lin):
    ens = init_ensemble(lin.op, lin.x_pr, lin.obs, 4, 0)
    with pytest.raises(ValueError):
        run_assimilation(ens, lin.model, lin.obs, lin.op, mode="esmda")


def test_non_monotonic_hybrid_finds_several_basins():
    """Hybrid members spread over distinct basins; IES members stay in one."""
    from scipy.cluster.hierarchy import fcluster, linkage

    from wrml.config import ExperimentConfig
    from wrml.experiment import FlowModel, generate_truth

    cfg = ExperimentConfig.from_dict({"n_e": 40, "grid": {"n": 11}, "flow": {"dt": 1.0},
                                      "observations": {"history_end": 40.0, "forecast_time": 45.0}})
    op = grf.build_embedding(cfg.covariance.build(), cfg.grid.build())
    model = FlowModel(cfg)
    truth = generate_truth(cfg, op, model)
    obs = ObservationSet.iid(truth.d_obs, 0.02)
    ens = init_ensemble(op, 0.0, obs, cfg.n_e, cfg.seed("ensemble"))
    counts = {}
    for mode in ("ies", "hybrid"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MaxIterationsExceeded)
            X = run_assimilation(ens, model, obs, op, mode=mode, transform=cfg.transform).ensemble.members
        Z = linkage(X.T, "average")
        # Two clusters count as distinct basins when separated by more than the
        # prior standard deviation per node.
        labels = fcluster(Z, t=cfg.covariance.sigma * np.sqrt(op.n), criterion="distance")
        counts[mode] = len(set(labels))
    assert counts["hybrid"] >= 2
    assert counts["ies"] == 1

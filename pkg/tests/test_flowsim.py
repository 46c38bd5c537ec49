import numpy as np
import pytest

from wrml import flowsim as fs
from wrml.errors import CFLViolation, DimensionMismatch, SingularSystem
from wrml.grf import Grid2D


@pytest.fixture(scope="module")
def cfg11():
    return fs.FlowConfig(grid=Grid2D.square(11), dt=1.0, t_end=70.0)


def five_spot(n=11, rate=1.0):
    g = Grid2D.square(n)
    c = n - 1
    corners = (0, c, c * n, c * n + c)
    wells = fs.WellSet(corners, (-rate / 4,) * 4, (g.nearest_node(1.0, 1.0),), (rate,))
    return fs.FlowConfig(grid=g, wells=wells)


def test_default_wells_layout():
    g = Grid2D.square(41)
    w = fs.default_wells(g, 0.027, "quadrants")
    coords = [(k % 41 * g.hx, k // 41 * g.hy) for k in w.producers]
    expect = [(x, y) for y in (0.1, 1.0, 1.9) for x in (0.1, 1.0, 1.9)]
    assert np.allclose(coords, expect)
    assert abs(w.net_rate) < 1e-15
    corners = fs.default_wells(g, 0.027, "corners")
    assert set(corners.injectors) == {0, 40, 40 * 41, 41 * 41 - 1}
    with pytest.raises(ValueError):
        fs.default_wells(g, 1.0, "ring")


def test_flow_config_validation():
    with pytest.raises(ValueError):
        fs.FlowConfig(porosity=0.0)
    with pytest.raises(ValueError):
        fs.FlowConfig(mu_w=-1.0)
    with pytest.raises(ValueError):
        fs.FlowConfig(dt=0.0)


def test_pressure_conserves_mass():
    cfg = five_spot()
    p, flux = fs.pressure_solve(np.ones(cfg.n_cells), np.zeros(cfg.n_cells), cfg)
    q = cfg.wells.source(cfg.n_cells)
    assert np.max(np.abs(flux.divergence() - q)) <= 1e-10 * flux.max_abs()
    assert p[0] == 0.0


def test_no_source_gives_constant_pressure(cfg11):
    cfg = fs.FlowConfig(grid=cfg11.grid, wells=fs.WellSet((), (), (), ()))
    rng = np.random.default_rng(0)
    p, flux = fs.pressure_solve(np.exp(rng.standard_normal(cfg.n_cells)), np.zeros(cfg.n_cells), cfg)
    assert np.all(p == 0.0) and flux.max_abs() == 0.0


def test_five_spot_symmetry():
    cfg = five_spot()
    p, _ = fs.pressure_solve(np.ones(cfg.n_cells), np.zeros(cfg.n_cells), cfg)
    P = p.reshape(cfg.grid.shape)
    for view in (P[:, ::-1], P[::-1, :], P.T, P[::-1, ::-1].T):
        assert np.max(np.abs(view - P)) <= 1e-10


def test_unbalanced_wells_raise(cfg11):
    bad = fs.FlowConfig(grid=cfg11.grid, wells=fs.WellSet((0,), (-1.0,), (5,), (0.5,)))
    with pytest.raises(SingularSystem):
        fs.pressure_solve(np.ones(bad.n_cells), np.zeros(bad.n_cells), bad)


def test_pressure_shape_checks(cfg11):
    with pytest.raises(DimensionMismatch):
        fs.pressure_solve(np.ones(3), np.zeros(3), cfg11)


def test_saturation_step_static(cfg11):
    cfg = fs.FlowConfig(grid=cfg11.grid, wells=fs.WellSet((), (), (), ()))
    s0 = np.linspace(0, 1, cfg.n_cells)
    zero = fs.FaceFluxes(np.zeros((11, 10)), np.zeros((10, 11)))
    state = fs.saturation_step(fs.FlowState(np.zeros(cfg.n_cells), s0, 0.0), zero, cfg)
    assert np.array_equal(state.saturation, s0)
    assert state.time == cfg.dt


def test_upwind_front_moves_one_cell():
    g = Grid2D(6, 2, 1.0, 1.0)
    F = 0.3
    wells = fs.WellSet((5, 11), (-F, -F), (0, 6), (F, F))
    cfg = fs.FlowConfig(grid=g, wells=wells, porosity=0.5)
    flux = fs.FaceFluxes(np.full((1, 2, 5), F), np.zeros((1, 1, 6)))
    S = np.zeros((1, 12))
    S[0, [0, 6]] = 1.0
    # One CFL unit: the sub-step equals the time to fill one cell.
    S, _, _ = fs._transport_batch(S, flux, wells.source(12), cfg.pore_volume / F, cfg, slope=0.95)
    assert np.allclose(S.reshape(2, 6), [[1, 1, 0, 0, 0, 0]] * 2, atol=1e-14)


def test_water_balance_and_bounds(cfg11):
    rng = np.random.default_rng(1)
    K = np.exp(rng.standard_normal((3, cfg11.n_cells)))
    res = fs.simulate_batch(K, cfg11, [10.0, 40.0, 70.0])
    water = res.final_saturation.sum(axis=1) * cfg11.pore_volume
    assert np.max(np.abs(water - (res.injected - res.produced))) <= 1e-8
    assert res.final_saturation.min() >= 0 and res.final_saturation.max() <= 1
    assert res.water_cut.min() >= 0 and res.water_cut.max() <= 1


def test_early_water_cut_is_zero(cfg11):
    wc = fs.simulate(np.ones(cfg11.n_cells), cfg11, [1.0, 2.0])
    assert np.all(wc == 0.0)


def test_flood_out():
    cfg = fs.FlowConfig(grid=Grid2D.square(11), dt=2.0, t_end=3000.0)
    wc = fs.simulate(np.ones(cfg.n_cells), cfg, [3000.0])
    assert np.all(wc >= 0.99)


def test_reflection_permutes_wells():
    cfg = fs.FlowConfig(grid=Grid2D.square(21), dt=1.0, t_end=40.0)
    rng = np.random.default_rng(2)
    K = np.exp(rng.standard_normal(cfg.n_cells))
    K_ref = K.reshape(cfg.grid.shape)[:, ::-1].ravel()
    times = [10.0, 25.0, 40.0]
    wc = fs.simulate(K, cfg, times)
    wc_ref = fs.simulate(K_ref, cfg, times)
    perm = [3 * r + (2 - c) for r in range(3) for c in range(3)]
    assert np.max(np.abs(wc_ref - wc[:, perm])) <= 1e-10


def test_observation_time_checks(cfg11):
    K = np.ones(cfg11.n_cells)
    with pytest.raises(ValueError):
        fs.simulate(K, cfg11, [2.0, 1.0])
    with pytest.raises(ValueError):
        fs.simulate(K, cfg11, [80.0])
    with pytest.raises(ValueError):
        fs.simulate(K, cfg11, [1.5])


def test_cfl_cap():
    cfg = fs.FlowConfig(grid=Grid2D.square(11), dt=1.0, t_end=2.0, max_substeps=1, total_rate=1.0)
    with pytest.raises(CFLViolation):
        fs.simulate(np.ones(cfg.n_cells), cfg, [1.0])


def test_water_cut_csv_roundtrip(tmp_path, cfg11):
    wc = fs.simulate(np.ones(cfg11.n_cells), cfg11, [30.0, 60.0])
    fs.write_water_cut_csv(tmp_path / "wc.csv", wc, [30.0, 60.0])
    back, t = fs.read_water_cut_csv(tmp_path / "wc.csv")
    assert np.array_equal(back, wc) and t.tolist() == [30.0, 60.0]
    assert (tmp_path / "wc.csv").read_text().splitlines()[0] == "time," + ",".join(f"P{k}" for k in range(1, 10))


def test_halving_dt_changes_water_cut_little():
    from wrml import grf
    from wrml.transforms import forward, to_permeability

    cfg = fs.FlowConfig()
    op = grf.build_embedding(grf.CovarianceSpec(0.8, 1.1), cfg.grid)
    K = to_permeability(forward("non-monotonic", grf.sample_matrix(op, 0.0, 5, 1)[:, 0]))
    times = [float(t) for t in range(1, 71)]
    coarse = fs.simulate(K, cfg, times)
    fine = fs.simulate(K, fs.FlowConfig(dt=0.05), times)
    assert np.max(np.abs(coarse - fine)) < 0.02

"""Incompressible, immiscible two-phase (water/oil) flow on a 2D grid.

IMPES: each outer time step solves the pressure equation with a two-point
flux approximation (TPFA), then advances water saturation with explicit
upwind transport, sub-stepped to respect the CFL bound. Boundaries are
no-flow; wells are point sources/sinks in single cells.

Each grid node of :class:`~wrml.grf.Grid2D` is a cell centre, so a field of
the parameter grid is directly a cell field. All routines are vectorized
over a leading batch axis (ensemble members).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import solveh_banded

from .errors import CFLViolation, DimensionMismatch, SingularSystem
from .grf import Grid2D

PRODUCER_COORDS = (0.1, 1.0, 1.9)


@dataclass(frozen=True)
class WellSet:
    """Well cells and signed rates (positive = injection)."""

    producers: tuple[int, ...]
    producer_rates: tuple[float, ...]
    injectors: tuple[int, ...]
    injector_rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.producers) != len(self.producer_rates):
            raise ValueError("one rate per producer")
        if len(self.injectors) != len(self.injector_rates):
            raise ValueError("one rate per injector")

    @property
    def net_rate(self) -> float:
        return float(sum(self.producer_rates) + sum(self.injector_rates))

    def source(self, n_cells: int) -> np.ndarray:
        q = np.zeros(n_cells)
        np.add.at(q, list(self.producers), self.producer_rates)
        np.add.at(q, list(self.injectors), self.injector_rates)
        return q

    def as_dict(self, grid: Grid2D) -> dict:
        def loc(k):
            j, i = divmod(k, grid.nx_plus1)
            return {"cell": k, "x": i * grid.hx, "y": j * grid.hy}

        return {
            "producers": [dict(loc(k), rate=r) for k, r in zip(self.producers, self.producer_rates)],
            "injectors": [dict(loc(k), rate=r) for k, r in zip(self.injectors, self.injector_rates)],
        }


def default_wells(grid: Grid2D, total_rate: float, layout: str = "corners") -> WellSet:
    """Nine producers on the 3x3 pattern over [0.1, 1.9]^2 plus four injectors.

    ``layout="corners"`` puts the injectors in the four domain corners;
    ``"quadrants"`` puts them at the centres of the four squares spanned by
    the producers (an inverted nine-spot). Rates are balanced so the net
    source is zero.
    """
    producers = tuple(grid.nearest_node(x, y) for y in PRODUCER_COORDS for x in PRODUCER_COORDS)
    lx = (grid.nx_plus1 - 1) * grid.hx
    ly = (grid.ny_plus1 - 1) * grid.hy
    if layout == "corners":
        spots = [(0.0, 0.0), (lx, 0.0), (0.0, ly), (lx, ly)]
    elif layout == "quadrants":
        a, b = (PRODUCER_COORDS[0] + PRODUCER_COORDS[1]) / 2, (PRODUCER_COORDS[1] + PRODUCER_COORDS[2]) / 2
        spots = [(a, a), (b, a), (a, b), (b, b)]
    else:
        raise ValueError(f"unknown injector layout {layout!r}")
    injectors = tuple(grid.nearest_node(x, y) for x, y in spots)
    return WellSet(
        producers=producers,
        producer_rates=tuple([-total_rate / len(producers)] * len(producers)),
        injectors=injectors,
        injector_rates=tuple([total_rate / len(injectors)] * len(injectors)),
    )


@dataclass(frozen=True)
class FlowConfig:
    grid: Grid2D = field(default_factory=lambda: Grid2D.square(41))
    porosity: float = 0.2
    mu_w: float = 1.0
    mu_o: float = 1.0
    n_w: float = 2.0
    n_o: float = 2.0
    dt: float = 0.1
    t_end: float = 70.0
    total_rate: float = 0.027
    injector_layout: str = "quadrants"
    max_substeps: int = 1000
    wells: Optional[WellSet] = None

    def __post_init__(self):
        if not 0 < self.porosity <= 1:
            raise ValueError("porosity must lie in (0, 1]")
        if self.mu_w <= 0 or self.mu_o <= 0:
            raise ValueError("viscosities must be positive")
        if self.dt <= 0 or self.t_end <= 0:
            raise ValueError("dt and t_end must be positive")
        if self.wells is None:
            object.__setattr__(
                self, "wells", default_wells(self.grid, self.total_rate, self.injector_layout)
            )

    @property
    def n_cells(self) -> int:
        return self.grid.n_nodes

    @property
    def pore_volume(self) -> float:
        return self.porosity * self.grid.hx * self.grid.hy


@dataclass
class FaceFluxes:
    """Total Darcy fluxes through interior faces.

    ``x[..., j, i]`` is the flux from cell ``(i, j)`` to ``(i+1, j)``;
    ``y[..., j, i]`` the flux from ``(i, j)`` to ``(i, j+1)``.
    """

    x: np.ndarray
    y: np.ndarray

    def divergence(self) -> np.ndarray:
        """Net outflow per cell, flattened in grid order."""
        fx, fy = self.x, self.y
        shape = fx.shape[:-1] + (fx.shape[-1] + 1,)
        div = np.zeros(shape)
        div[..., :, :-1] += fx
        div[..., :, 1:] -= fx
        div[..., :-1, :] += fy
        div[..., 1:, :] -= fy
        return div.reshape(div.shape[:-2] + (-1,))

    def max_abs(self) -> float:
        return float(max(np.abs(self.x).max(initial=0.0), np.abs(self.y).max(initial=0.0)))


@dataclass
class FlowState:
    pressure: np.ndarray
    saturation: np.ndarray
    time: float = 0.0


def mobilities(s, cfg: FlowConfig):
    s = np.clip(s, 0.0, 1.0)
    return s**cfg.n_w / cfg.mu_w, (1.0 - s) ** cfg.n_o / cfg.mu_o


def fractional_flow(s, cfg: FlowConfig):
    lw, lo = mobilities(s, cfg)
    return lw / (lw + lo)


def max_fractional_flow_slope(cfg: FlowConfig) -> float:
    s = np.linspace(0.0, 1.0, 20001)
    return float(np.max(np.abs(np.gradient(fractional_flow(s, cfg), s)))) * 1.01


def _check_source(q: np.ndarray):
    scale = np.abs(q).sum()
    if abs(q.sum()) > 1e-12 * max(scale, 1.0):
        raise SingularSystem(
            f"well rates do not balance (net {q.sum():.3e}); the no-flow pressure "
            "problem has no solution"
        )


def _pressure_batch(kmob: np.ndarray, q: np.ndarray, grid: Grid2D):
    """Solve the TPFA system for each row of ``kmob`` (shape ``(B, ny, nx)``)."""
    _check_source(q)
    ny, nx = grid.shape
    n = ny * nx
    b = kmob.shape[0]
    tx = 2.0 * grid.hy / grid.hx / (1.0 / kmob[:, :, :-1] + 1.0 / kmob[:, :, 1:])
    ty = 2.0 * grid.hx / grid.hy / (1.0 / kmob[:, :-1, :] + 1.0 / kmob[:, 1:, :])

    diag = np.zeros((b, ny, nx))
    diag[:, :, :-1] += tx
    diag[:, :, 1:] += tx
    diag[:, :-1, :] += ty
    diag[:, 1:, :] += ty
    # Lower banded storage: row 0 diagonal, row 1 the x-neighbour, row nx the y-neighbour.
    ab = np.zeros((b, nx + 1, n))
    ab[:, 0] = diag.reshape(b, n)
    off_x = np.zeros((b, ny, nx))
    off_x[:, :, :-1] = -tx
    ab[:, 1] = off_x.reshape(b, n)
    ab[:, nx, : n - nx] = -ty.reshape(b, -1)
    # Gauge: eliminate cell 0 with p = 0 (its balance follows from the others).
    ab[:, 0, 0] = 1.0
    ab[:, 1, 0] = 0.0
    ab[:, nx, 0] = 0.0
    rhs = q.copy()
    rhs[0] = 0.0

    # Members stack into one block-diagonal banded system: no entry couples blocks.
    ab = ab.transpose(1, 0, 2).reshape(nx + 1, b * n)
    p = solveh_banded(ab, np.tile(rhs, b), lower=True, check_finite=False)
    p = p.reshape(b, n)
    pg = p.reshape(b, ny, nx)
    fluxes = FaceFluxes(
        x=tx * (pg[:, :, :-1] - pg[:, :, 1:]),
        y=ty * (pg[:, :-1, :] - pg[:, 1:, :]),
    )
    return p, fluxes


def _cell_mobility(K: np.ndarray, s: np.ndarray, cfg: FlowConfig) -> np.ndarray:
    lw, lo = mobilities(s, cfg)
    return (K * (lw + lo)).reshape((-1,) + cfg.grid.shape)


def pressure_solve(K, s, cfg: FlowConfig):
    """Return ``(pressure, fluxes)`` for one permeability/saturation pair.

    Solves ``-div(K lambda(s) grad p) = q`` with no-flow boundaries; the
    pressure in cell 0 is fixed to zero.
    """
    K = np.asarray(K, dtype=float)
    s = np.asarray(s, dtype=float)
    if K.shape != (cfg.n_cells,) or s.shape != (cfg.n_cells,):
        raise DimensionMismatch(f"expected fields of length {cfg.n_cells}")
    if np.any(K <= 0):
        raise ValueError("permeability must be positive")
    p, flux = _pressure_batch(_cell_mobility(K[None], s[None], cfg), cfg.wells.source(cfg.n_cells), cfg.grid)
    return p[0], FaceFluxes(flux.x[0], flux.y[0])


def _outflow(fluxes: FaceFluxes, q: np.ndarray) -> np.ndarray:
    fx, fy = fluxes.x, fluxes.y
    b = fx.shape[0]
    shape = (b,) + (fx.shape[1], fx.shape[2] + 1)
    out = np.zeros(shape)
    out[:, :, :-1] += np.maximum(fx, 0.0)
    out[:, :, 1:] += np.maximum(-fx, 0.0)
    out[:, :-1, :] += np.maximum(fy, 0.0)
    out[:, 1:, :] += np.maximum(-fy, 0.0)
    return out.reshape(b, -1) - np.minimum(q, 0.0)


def _transport_batch(S, fluxes: FaceFluxes, q, duration, cfg: FlowConfig, slope: float):
    """Advance saturations ``S`` (``(B, n)``) by ``duration``; returns (S, injected, produced)."""
    pv = cfg.pore_volume
    outflow = _outflow(fluxes, q)
    rate = slope * outflow.max()
    n_sub = max(1, int(np.ceil(duration * rate / (0.95 * pv)))) if rate > 0 else 1
    if n_sub > cfg.max_substeps:
        raise CFLViolation(f"{n_sub} transport sub-steps needed, cap is {cfg.max_substeps}")
    h = duration / n_sub
    b = S.shape[0]
    ny, nx = cfg.grid.shape
    q_in = np.maximum(q, 0.0)
    q_out = np.minimum(q, 0.0)
    fx, fy = fluxes.x, fluxes.y
    pos_x = fx > 0
    pos_y = fy > 0
    injected = np.zeros(b)
    produced = np.zeros(b)
    for _ in range(n_sub):
        fw = fractional_flow(S, cfg).reshape(b, ny, nx)
        wx = fx * np.where(pos_x, fw[:, :, :-1], fw[:, :, 1:])
        wy = fy * np.where(pos_y, fw[:, :-1, :], fw[:, 1:, :])
        div = np.zeros((b, ny, nx))
        div[:, :, :-1] += wx
        div[:, :, 1:] -= wx
        div[:, :-1, :] += wy
        div[:, 1:, :] -= wy
        fw = fw.reshape(b, -1)
        prod = fw * q_out
        S = S + (h / pv) * (q_in + prod - div.reshape(b, -1))
        injected += h * q_in.sum()
        produced -= h * prod.sum(axis=1)
    return S, injected, produced


def saturation_step(state: FlowState, fluxes: FaceFluxes, cfg: FlowConfig) -> FlowState:
    """Advance one outer step ``cfg.dt`` with CFL-limited upwind sub-steps."""
    q = cfg.wells.source(cfg.n_cells)
    S, _, _ = _transport_batch(
        np.asarray(state.saturation, dtype=float)[None],
        FaceFluxes(fluxes.x[None], fluxes.y[None]),
        q, cfg.dt, cfg, max_fractional_flow_slope(cfg),
    )
    return FlowState(state.pressure, S[0], state.time + cfg.dt)


@dataclass
class SimulationResult:
    water_cut: np.ndarray  # (B, n_times, n_producers)
    times: np.ndarray
    final_saturation: np.ndarray  # (B, n_cells)
    injected: np.ndarray  # cumulative water injected per member
    produced: np.ndarray  # cumulative water produced per member


def _step_indices(times: Sequence[float], dt: float, t_end: float) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(np.diff(times) <= 0):
        raise ValueError("observation times must be strictly increasing")
    if times.size and (times[0] <= 0 or times[-1] > t_end + 1e-9):
        raise ValueError(f"observation times must lie in (0, {t_end}]")
    steps = np.rint(times / dt).astype(int)
    if np.any(np.abs(steps * dt - times) > 1e-9 * np.maximum(1.0, times)):
        raise ValueError("observation times must be multiples of dt")
    return steps


def simulate_batch(
    K: np.ndarray,
    cfg: FlowConfig,
    obs_times: Sequence[float],
    on_pressure: Optional[Callable] = None,
) -> SimulationResult:
    """Run the IMPES loop for a batch of permeability fields ``K`` (``(B, n)``).

    ``on_pressure(step, pressure, fluxes, q, saturation)`` is called after
    every pressure solve, if given; ``saturation`` is the state the pressure
    was solved for.
    """
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape[1] != cfg.n_cells:
        raise DimensionMismatch(f"expected {cfg.n_cells} cells, got {K.shape[1]}")
    if np.any(~np.isfinite(K)) or np.any(K <= 0):
        raise ValueError("permeability must be positive and finite")
    steps = _step_indices(obs_times, cfg.dt, cfg.t_end)
    b = K.shape[0]
    q = cfg.wells.source(cfg.n_cells)
    producers = np.asarray(cfg.wells.producers)
    slope = max_fractional_flow_slope(cfg)

    S = np.zeros((b, cfg.n_cells))
    injected = np.zeros(b)
    produced = np.zeros(b)
    out = np.empty((b, len(steps), len(producers)))
    n_steps = int(steps[-1]) if len(steps) else 0
    k_obs = 0
    for step in range(1, n_steps + 1):
        p, fluxes = _pressure_batch(_cell_mobility(K, S, cfg), q, cfg.grid)
        if on_pressure is not None:
            on_pressure(step, p, fluxes, q, S)
        S, inj, prod = _transport_batch(S, fluxes, q, cfg.dt, cfg, slope)
        injected += inj
        produced += prod
        while k_obs < len(steps) and steps[k_obs] == step:
            out[:, k_obs] = fractional_flow(S[:, producers], cfg)
            k_obs += 1
    return SimulationResult(out, np.asarray(obs_times, dtype=float), S, injected, produced)


def simulate(K, cfg: FlowConfig, obs_times: Sequence[float]) -> np.ndarray:
    """Water cut at every producer (columns) for each observation time (rows)."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 1:
        raise DimensionMismatch("simulate takes a single permeability field")
    return simulate_batch(K[None], cfg, obs_times).water_cut[0]


def write_water_cut_csv(path, water_cut: np.ndarray, times: Sequence[float]):
    """CSV with a header of well ids and one row per observation time."""
    n_wells = water_cut.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"P{k + 1}" for k in range(n_wells)])
        for t, row in zip(times, water_cut):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_water_cut_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    return data[:, 1:], data[:, 0]

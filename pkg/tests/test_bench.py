import csv
import math

import numpy as np
import pytest

from gccns.bench import (ErrorReport, ManufacturedSolution, RunConfig, channel_inflow, cross_section_points,
                         dfg_inflow, dfg_inflow_profile, dfg_ramp, drag_lift, eoc, error_norms,
                         manufactured_solution, reynolds_number, run_convergence_study)
from gccns.fem import TaylorHoodPair
from gccns.forms import IntervalState, NitscheParams
from gccns.mesh import ChannelGeometry, circle_facets, generate_channel_cylinder, generate_unit_square
from gccns.stepper import NavierStokesSystem, NewtonConfig, Trajectory

RNG = np.random.default_rng(2024)
PTS = RNG.uniform(size=(100, 2))


def cs_grad(fun, x, t, h=1e-30):
    """Complex-step gradient of a vector field: returns d fun_k / d x_d as (N, k, d)."""
    out = []
    for d in range(2):
        e = np.zeros(2)
        e[d] = 1.0
        out.append(np.imag(fun(x + 1j * h * e, t)) / h)
    return np.stack(out, axis=-1)


def test_manufactured_vanishes_initially_and_on_boundary():
    sol = ManufacturedSolution(1.0)
    assert np.all(sol.velocity(PTS, 0.0) == 0) and np.all(sol.pressure(PTS, 0.0) == 0)
    s = np.linspace(0, 1, 21)
    edges = np.concatenate([np.column_stack([s, 0 * s]), np.column_stack([s, 1 + 0 * s]),
                            np.column_stack([0 * s, s]), np.column_stack([1 + 0 * s, s])])
    for t in (0.3, 1.0):
        assert np.max(np.abs(sol.velocity(edges, t))) <= 1e-15


def test_manufactured_is_divergence_free():
    sol = ManufacturedSolution(1.0)
    g = cs_grad(sol.velocity, PTS.astype(complex), 0.7)
    assert np.max(np.abs(g[:, 0, 0] + g[:, 1, 1])) <= 1e-12
    assert np.max(np.abs(sol.divergence(PTS, 0.7))) <= 1e-12


@pytest.mark.parametrize("nu", [1.0, 0.01])
def test_manufactured_forcing_matches_differentiation(nu):
    sol = ManufacturedSolution(nu)
    t, h = 0.6, 1e-5
    x = PTS
    v = sol.velocity(x, t)
    grad = cs_grad(sol.velocity, x.astype(complex), t)
    conv = np.einsum("nd,nkd->nk", v, grad)
    lap = np.zeros_like(v)
    for d in range(2):
        e = np.zeros(2)
        e[d] = h
        gp = cs_grad(sol.velocity, (x + e).astype(complex), t)[:, :, d]
        gm = cs_grad(sol.velocity, (x - e).astype(complex), t)[:, :, d]
        lap += (gp - gm) / (2 * h)
    gp_ = np.stack([np.imag(sol.pressure(x + 1j * 1e-30 * np.eye(2)[d], t)) / 1e-30 for d in range(2)], axis=-1)
    dvdt = (sol.velocity(x, t + 1e-6) - sol.velocity(x, t - 1e-6)) / 2e-6
    f = dvdt + conv - nu * lap + gp_
    assert np.max(np.abs(sol.forcing(x, t) - f)) <= 1e-6
    # time derivative of the forcing
    fd = (sol.forcing(x, t + 1e-6) - sol.forcing(x, t - 1e-6)) / 2e-6
    assert np.max(np.abs(sol.forcing_dt(x, t) - fd)) <= 1e-6


def test_manufactured_tuple():
    v, p, dv, dp, f = manufactured_solution(PTS, 0.4)
    assert v.shape == (100, 2) and p.shape == (100,) and f.shape == (100, 2)


def test_eoc_arithmetic():
    assert round(eoc(3.099e-4, 1.954e-5), 2) == 3.99
    assert math.isnan(eoc(0.0, 1.0))


def test_error_report_eoc_identity(tmp_path):
    rep = ErrorReport()
    vals = [(1.0, 2.0, 3.0, 4.0), (0.25, 0.5, 0.375, 1.0), (0.01, 0.2, 0.1, 0.3)]
    for i, v in enumerate(vals):
        rep.add(dict(level=i, v_L2L2=v[0], p_L2L2=v[1], v_LinfL2=v[2], p_LinfL2=v[3]))
    for c in ("v_L2L2", "p_L2L2", "v_LinfL2", "p_LinfL2"):
        e = rep.column(c)
        assert np.array_equal(rep.column("eoc_" + c)[1:], np.log2(e[:-1] / e[1:]))
    rep.write_csv(tmp_path / "e.csv")
    rows = list(csv.DictReader(open(tmp_path / "e.csv")))
    assert float(rows[1]["eoc_v_L2L2"]) == 2.0
    # 17 significant digits round-trip exactly
    assert rows[2]["v_L2L2"] == "0.01" or float(rows[2]["v_L2L2"]) == 0.01
    assert float(rows[2]["eoc_p_L2L2"]) == math.log2(0.5 / 0.2)


class _Const:
    def __init__(self, c):
        self.c = c

    def velocity(self, x, t):
        return np.broadcast_to(np.array([self.c, 0.0]), np.shape(x)).copy() + 0 * np.asarray(t)[..., None]

    def pressure(self, x, t):
        return np.full(np.shape(x)[:-1], self.c) + 0 * np.asarray(t)


class _Linear:
    """Discrete field reproduced exactly: v = (x + t, y t), p = x - y."""

    def velocity(self, x, t):
        return np.stack([x[..., 0] + t, x[..., 1] * t], axis=-1)

    def pressure(self, x, t):
        return x[..., 0] - x[..., 1] + 0 * np.asarray(t)


@pytest.fixture(scope="module")
def q2_system():
    pair = TaylorHoodPair(generate_unit_square(2), 2)
    return NavierStokesSystem(pair, ManufacturedSolution(1.0).problem_data(), NitscheParams(), "gcc13")


def test_error_norms_of_constant_error(q2_system):
    pair = q2_system.pair
    states = [IntervalState(np.zeros((4, pair.J)), np.zeros((4, pair.M)), 0.5 * k, 0.5) for k in range(2)]
    n = error_norms(Trajectory(states), q2_system, _Const(0.3), sample_step=0.1)
    for v in vars(n).values():
        assert v == pytest.approx(0.3, rel=1e-12)


def test_error_norms_of_exact_trajectory(q2_system):
    pair = q2_system.pair
    ex = _Linear()
    xv, xp = pair.velocity.dof_coords, pair.pressure.dof_coords
    states = []
    for k in range(2):
        t0, tau = 0.5 * k, 0.5
        v = np.zeros((4, pair.J))
        p = np.zeros((4, pair.M))
        for slot, t in ((0, t0), (2, t0 + tau)):
            w = ex.velocity(xv, t)
            v[slot] = np.concatenate([w[:, 0], w[:, 1]])
            p[slot] = ex.pressure(xp, t)
        dv = np.column_stack([np.ones(len(xv)), xv[:, 1]])
        v[1] = v[3] = tau * np.concatenate([dv[:, 0], dv[:, 1]])
        states.append(IntervalState(v, p, t0, tau))
    n = error_norms(Trajectory(states), q2_system, ex, sample_step=0.05)
    for val in vars(n).values():
        assert val <= 1e-13
    with pytest.raises(ValueError):
        error_norms(Trajectory(), q2_system, ex)


@pytest.fixture(scope="module")
def symmetric_channel():
    geom = ChannelGeometry(center=(0.2, 0.205))
    pair = TaylorHoodPair(generate_channel_cylinder(geom, 0), 2)
    return geom, pair


def test_drag_lift_of_constant_pressure(symmetric_channel):
    _, pair = symmetric_channel
    dl = drag_lift(pair, np.zeros(pair.J), np.full(pair.M, 3.0), 0.01)
    assert abs(dl.drag) <= 1e-14 and abs(dl.lift) <= 1e-14


def test_drag_lift_of_linear_pressure(symmetric_channel):
    geom, pair = symmetric_channel
    xp = pair.pressure.dof_coords
    a, b = pair.mesh.facet_endpoints(circle_facets(pair.mesh))
    # closed polygon: the normal integral of (x - c) gives the enclosed area (shoelace)
    area = 0.5 * abs(np.sum(a[:, 0] * b[:, 1] - b[:, 0] * a[:, 1]))
    dl = drag_lift(pair, np.zeros(pair.J), xp[:, 0] - 0.2, 1.0)
    assert dl.drag == pytest.approx(-area, rel=1e-12)
    assert abs(dl.lift) <= 1e-15
    dl = drag_lift(pair, np.zeros(pair.J), xp[:, 1] - 0.205, 1.0)
    assert dl.lift == pytest.approx(-area, rel=1e-12)
    assert dl.c_drag == pytest.approx(2 * dl.drag / (0.2**2 * 0.1), rel=1e-15)


def test_drag_coefficient_scaling(symmetric_channel):
    _, pair = symmetric_channel
    dl = drag_lift(pair, np.zeros(pair.J), pair.pressure.dof_coords[:, 0], 1.0)
    assert dl.c_drag / dl.drag == pytest.approx(500.0, rel=1e-14)


def test_mirror_symmetry(symmetric_channel):
    geom, pair = symmetric_channel
    yc = 0.205

    def field(x):
        X, Y = x[:, 0], x[:, 1]
        return np.column_stack([np.sin(3 * X) * (Y + 0.3) ** 2 + Y, np.cos(2 * Y) * X - X * Y])

    def mirrored(x):
        m = x.copy()
        m[:, 1] = 2 * yc - m[:, 1]
        f = field(m)
        return np.column_stack([f[:, 0], -f[:, 1]])

    pres = lambda x: np.exp(x[:, 0]) * (1 + x[:, 1] ** 3)
    pres_m = lambda x: pres(np.column_stack([x[:, 0], 2 * yc - x[:, 1]]))
    xp = pair.pressure.dof_coords
    a = drag_lift(pair, pair.interpolate_velocity(field), pres(xp), 0.05)
    b = drag_lift(pair, pair.interpolate_velocity(mirrored), pres_m(xp), 0.05)
    assert b.drag == pytest.approx(a.drag, rel=1e-11)
    assert b.lift == pytest.approx(-a.lift, rel=1e-11)
    assert abs(a.lift) > 1e-6


def test_drag_lift_needs_facets(symmetric_channel):
    _, pair = symmetric_channel
    with pytest.raises(ValueError):
        drag_lift(pair, np.zeros(pair.J), np.zeros(pair.M), 1.0, facets=np.zeros((0, 3), dtype=int))


def test_dfg_inflow_spot_checks():
    assert dfg_inflow_profile(0.205, 1.0) == 1.5
    assert dfg_inflow_profile(0.205, 3.7) == 1.5
    assert dfg_inflow_profile(0.0, 2.0) == 0.0 and dfg_inflow_profile(0.41, 2.0) == 0.0
    assert dfg_ramp(1.0) == (1.0, 0.0)
    assert dfg_ramp(1.0 - 1e-12)[0] == pytest.approx(1.0, abs=1e-11)
    assert dfg_ramp(0.5) == (0.5, 1.5)
    g, _ = dfg_inflow()
    x = np.array([[0.0, 0.205], [0.2, 0.15], [2.2, 0.205]])
    assert list(g(x, 1.5)[:, 0]) == [1.5, 0.0, 0.0]


def test_channel_inflow_only_on_inlet():
    g, dg = channel_inflow()
    x = np.array([[0.0, 0.205], [0.2, 0.25], [1.0, 0.0]])
    assert g(x, 1.0)[0, 0] == pytest.approx(7.13861 * 0.205 * 0.205)
    assert np.all(g(x, 1.0)[1:] == 0) and np.all(g(x, 1.0)[:, 1] == 0)
    assert dg(x, 0.5)[0, 0] == pytest.approx(7.13861 * 0.205**2)


def test_reynolds_number():
    cfg = RunConfig.defaults("channelCompare")
    assert reynolds_number(cfg.mean_velocity, cfg.length_scale, cfg.nu) == pytest.approx(2.0)
    cfg = RunConfig.defaults("dfg")
    assert reynolds_number(cfg.mean_velocity, cfg.length_scale, cfg.nu) == pytest.approx(100.0)


def test_cross_section_skips_obstacle():
    geom = ChannelGeometry()
    pts = cross_section_points(geom, 201)
    assert len(pts) < 201
    assert np.all(np.hypot(pts[:, 0] - 0.2, pts[:, 1] - 0.2) >= geom.radius)
    assert np.all(pts[:, 0] == 0.2)


def test_run_config_defaults_and_validation():
    cfg = RunConfig.defaults("converge")
    assert (cfg.eta1, cfg.eta2, cfg.r, cfg.levels) == (35.0, 35.0, 4, 3)
    for bad in (dict(r=1), dict(scheme="bdf2"), dict(bc="weak"), dict(tau=0.0), dict(scenario="x")):
        with pytest.raises(ValueError):
            RunConfig(**bad)


def test_run_config_from_ini(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text("scenario = dfg\ntau = 0.02\ndeterministic = yes\neta1 = 10\n")
    cfg = RunConfig.from_ini(p)
    assert cfg.scenario == "dfg" and cfg.tau == 0.02 and cfg.deterministic and cfg.eta1 == 10.0
    assert cfg.nu == 1e-3
    p.write_text("[run]\ncolour = blue\n")
    with pytest.raises(ValueError):
        RunConfig.from_ini(p)


def test_convergence_study_smoke(tmp_path):
    cfg = RunConfig(levels=2, r=2, sample_step=0.1, out=str(tmp_path))
    rep = run_convergence_study(cfg)
    assert [r["dofs"] for r in rep.rows] == [2 * (2 * 25 + 9), 2 * (2 * 81 + 25)]
    assert (tmp_path / "errors.csv").exists() and (tmp_path / "diagnostics.csv").exists()
    assert rep.rows[1]["v_L2L2"] < rep.rows[0]["v_L2L2"]


def test_convergence_study_records_failures(tmp_path):
    cfg = RunConfig(levels=2, r=2, sample_step=0.1, out=str(tmp_path), kappa=False)
    rep = run_convergence_study(cfg, NewtonConfig(max_iter=1, atol=1e-30, rtol=1e-30))
    assert len(rep.rows) == 2 and all("error" in r for r in rep.rows)

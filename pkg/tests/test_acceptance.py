"""Acceptance criteria 1-9. Each test prints one PASS/FAIL line before asserting."""
import math
import time
from fractions import Fraction as Fr

import numpy as np
import pytest

from conftest import fd_mismatch, make_forms, random_state
from gccns.assembly import Assembler
from gccns.bench import (RunConfig, dfg_inflow, dfg_inflow_profile, dfg_ramp, run_channel_compare,
                         run_convergence_study, run_dfg)
from gccns.fem import TaylorHoodPair
from gccns.mesh import generate_unit_square
from gccns.stepper import LinearODESystem, NewtonConfig, TimeMarchConfig, march, step_cgp1
from gccns.time_kernel import HERMITE, coupling_table, hermite_quadrature_k3

# tolerances pinned from the acceptance table
FD_EPS = 1e-6
FD_REL_TOL = 1e-5
FD_STATES = 20
ODE_TAUS = (0.1, 0.05, 0.025, 0.0125)
ODE_EOC_BAND = 0.2
CN_TOL = 1e-12
GCC_L2_EOC_MIN = 3.7
GCC_LINF_EOC_MIN = 3.6
CGP_EOC_BAND = 0.3
REFERENCE_V_L2L2 = (3.099e-4, 1.954e-5)
REFERENCE_FACTOR = 3.0
CHANNEL_REL_TOL = 1e-2
CHANNEL_MAX_NEWTON = 8
DIV_FACTOR = 10.0
DFG_MIN_STEPS = 200

ACCEPTANCE_LINES: list = []


def report(n, ok, detail):
    line = f"acceptance criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    # collected lines are repeated in the terminal summary (see conftest)
    ACCEPTANCE_LINES.append((n, line))
    print(line)
    assert ok, line


# -- 1. temporal exactness ----------------------------------------------------

def test_criterion_1_temporal_exactness():
    start = time.perf_counter()
    card = all(HERMITE.exact(l, t, d) == Fr(int(k == l))
               for l in range(4) for k, (t, d) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))))
    rng = np.random.default_rng(0)
    worst = 0.0
    for c in rng.uniform(-1, 1, size=(1000, 4)):
        p = np.polynomial.Polynomial(c)
        exact = p.integ()(1) - p.integ()(-1)
        worst = max(worst, abs(hermite_quadrature_k3(p(-1), p(1), p.deriv()(-1), p.deriv()(1)) - exact))
    expected = {(0, 0): Fr(13, 35), (0, 1): Fr(11, 210), (0, 2): Fr(9, 70), (0, 3): Fr(-13, 420),
             (1, 1): Fr(1, 105), (1, 2): Fr(13, 420), (1, 3): Fr(-1, 140), (2, 2): Fr(13, 35),
             (2, 3): Fr(-11, 210), (3, 3): Fr(1, 105)}
    tab = coupling_table()
    table_ok = all(tab.m_exact[i][j] == v and tab.m_exact[j][i] == v for (i, j), v in expected.items())
    s_ok = tab.s_exact == (Fr(1, 2), Fr(1, 12), Fr(1, 2), Fr(-1, 12))
    elapsed = time.perf_counter() - start
    ok = card and worst <= 1e-12 and table_ok and s_ok and elapsed < 1.0
    report(1, ok, f"cardinality exact={card}, cubic quadrature max error {worst:.2e}, "
                  f"coupling table exact={table_ok and s_ok}, {elapsed:.2f} s")


# -- 2. Jacobian oracle ----------------------------------------------------------

def test_criterion_2_jacobian_oracle():
    start = time.perf_counter()
    pair = TaylorHoodPair(generate_unit_square(2), 4)
    rng = np.random.default_rng(99)
    worst, slopes = 0.0, []
    for mode in ("strong", "nitsche"):
        forms = make_forms(pair, mode)
        for k in range(FD_STATES):
            scheme = "gcc13" if k % 4 else "cgp1"
            state = random_state(pair, scheme, rng, t0=rng.uniform(0, 1), tau=rng.uniform(0.05, 1))
            seed = int(rng.integers(1 << 31))
            errs = [fd_mismatch(forms, state, np.random.default_rng(seed), eps)[1]
                    for eps in (1e-2, 1e-3, 1e-4, FD_EPS)]
            slopes.append(math.log10(errs[0] / errs[2]) / 2)
            worst = max(worst, errs[-1])
    elapsed = time.perf_counter() - start
    ok = worst <= FD_REL_TOL and min(slopes) >= 0.9 and elapsed < 60
    report(2, ok, f"{2 * FD_STATES} states (strong + nitsche), max relative mismatch at eps=1e-6 "
                  f"{worst:.2e}, min decay order {min(slopes):.2f}, {elapsed:.1f} s")


# -- 3. ODE order ----------------------------------------------------------------

def _ode_eocs(scheme):
    errs = []
    cfg = NewtonConfig(atol=1e-15, rtol=1e-15)
    for tau in ODE_TAUS:
        system = LinearODESystem([[-1.0]], scheme)
        traj = march(system, TimeMarchConfig(1.0, tau, scheme), cfg, initial=system.initial_slab([1.0], tau))
        errs.append(abs(traj.states[-1].v[-2 if scheme == "gcc13" else -1, 0] - math.exp(-1.0)))
    return np.log2(np.array(errs[:-1]) / np.array(errs[1:]))


def test_criterion_3_ode_order():
    start = time.perf_counter()
    g, c = _ode_eocs("gcc13"), _ode_eocs("cgp1")
    lam, tau = -1.0, 0.1
    system = LinearODESystem([[lam]], "cgp1")
    state, _ = step_cgp1(system, system.initial_slab([1.0], tau), NewtonConfig(atol=1e-15, rtol=1e-15))
    amp_err = abs(state.v[1, 0] - (1 + lam * tau / 2) / (1 - lam * tau / 2))
    elapsed = time.perf_counter() - start
    ok = (np.all(np.abs(g - 4) <= ODE_EOC_BAND) and np.all(np.abs(c - 2) <= ODE_EOC_BAND)
          and amp_err <= CN_TOL and elapsed < 1.0)
    report(3, ok, f"gcc13 EOC {np.round(g, 3).tolist()}, cgp1 EOC {np.round(c, 3).tolist()}, "
                  f"Crank-Nicolson amplification error {amp_err:.1e}, {elapsed:.2f} s")


# -- 4. DoF bookkeeping --------------------------------------------------------------

def test_criterion_4_dofs():
    start = time.perf_counter()
    pair = TaylorHoodPair(generate_unit_square(2), 4)
    forms = make_forms(pair)
    n = {s: Assembler(forms, s).assemble(random_state(pair, s, np.random.default_rng(0))).n
         for s in ("gcc13", "cgp1")}
    elapsed = time.perf_counter() - start
    ok = n == {"gcc13": 422, "cgp1": 211} and elapsed < 1.0
    report(4, ok, f"DoF per interval gcc13={n['gcc13']} cgp1={n['cgp1']}, {elapsed:.2f} s")


# -- 5, 6, 8. convergence study --------------------------------------------------------

@pytest.fixture(scope="module")
def studies(tmp_path_factory):
    out = {}
    for scheme in ("gcc13", "cgp1"):
        cfg = RunConfig(levels=3, scheme=scheme, out=str(tmp_path_factory.mktemp(scheme)))
        start = time.perf_counter()
        rep = run_convergence_study(cfg, keep_trajectories=True)
        out[scheme] = (rep, time.perf_counter() - start)
    return out


def _eoc_table(rep, cols):
    return {c: rep.column("eoc_" + c)[1:] for c in cols}


@pytest.mark.slow
def test_criterion_5_convergence(studies):
    cols = ("v_L2L2", "p_L2L2", "v_LinfL2", "p_LinfL2")
    g_rep, g_time = studies["gcc13"]
    c_rep, c_time = studies["cgp1"]
    g, c = _eoc_table(g_rep, cols), _eoc_table(c_rep, cols)
    gcc_ok = (all(np.all(g[k] >= GCC_L2_EOC_MIN) for k in cols[:2])
              and all(np.all(g[k] >= GCC_LINF_EOC_MIN) for k in cols[2:]))
    cgp_ok = all(np.all(np.abs(c[k] - 2) <= CGP_EOC_BAND) for k in cols[:2])
    v = g_rep.column("v_L2L2")[:2]
    ratios = v / np.array(REFERENCE_V_L2L2)
    reference_ok = bool(np.all(ratios <= REFERENCE_FACTOR) and np.all(ratios >= 1 / REFERENCE_FACTOR))
    fmt = lambda d: ", ".join(f"{k} {np.round(d[k], 2).tolist()}" for k in d)
    report(5, gcc_ok and cgp_ok and reference_ok,
           f"gcc13 EOC [{fmt(g)}]; cgp1 EOC [{fmt(c)}]; v L2L2 levels 0/1 {v[0]:.3e}/{v[1]:.3e} "
           f"(ratio to reference {ratios[0]:.2f}/{ratios[1]:.2f}); {g_time + c_time:.0f} s")


@pytest.mark.slow
def test_criterion_6_condition_trend(studies):
    k = {s: studies[s][0].column("kappa2") for s in studies}
    g = k["gcc13"][:2]
    ok = bool(np.all(np.isfinite(g)) and g[1] > g[0])
    c = k["cgp1"][np.isfinite(k["cgp1"])]
    ok = ok and bool(np.all(np.diff(c) > 0))
    report(6, ok, f"kappa2 gcc13 levels 0/1 {g[0]:.4e} -> {g[1]:.4e}; cgp1 {np.array2string(c, precision=4)}")


@pytest.mark.slow
def test_criterion_8_divergence_and_continuity(studies):
    cfg = NewtonConfig()
    worst_ratio = 0.0
    for s in studies:
        for system, traj in studies[s][0].trajectories:
            for d in traj.diagnostics:
                worst_ratio = max(worst_ratio, d["max_weak_divergence"] / cfg.tolerance(d["initial_residual"]))
    c1 = True
    for system, traj in studies["gcc13"][0].trajectories:
        for t in traj.times[1:-1]:
            for d in (0, 1):
                for f in ("v", "p"):
                    c1 &= np.array_equal(traj.coefficients(t, d, "left", f), traj.coefficients(t, d, "right", f))
    c0, jump = True, 0.0
    for system, traj in studies["cgp1"][0].trajectories:
        for t in traj.times[1:-1]:
            c0 &= np.array_equal(traj.coefficients(t, 0, "left"), traj.coefficients(t, 0, "right"))
            jump = max(jump, float(np.max(np.abs(traj.coefficients(t, 1, "left") - traj.coefficients(t, 1, "right")))))
    ok = worst_ratio <= DIV_FACTOR and c1 and c0 and jump > 0
    report(8, ok, f"max weak divergence / Newton tolerance {worst_ratio:.2e}; gcc13 C1 bit-exact={c1}; "
                  f"cgp1 C0 bit-exact={c0}, max derivative jump {jump:.3e}")


# -- 7. Nitsche vs strong -------------------------------------------------------------

@pytest.mark.slow
def test_criterion_7_nitsche_impact(tmp_path):
    cfg = RunConfig.defaults("channelCompare").updated(out=str(tmp_path))
    start = time.perf_counter()
    res = run_channel_compare(cfg)
    elapsed = time.perf_counter() - start
    its = max(d["max_newton_iterations"] for d in res.diagnostics.values())
    energy_ok = all(math.isfinite(d["kinetic_energy"]) for d in res.diagnostics.values())
    ok = (res.rel_diff_speed <= CHANNEL_REL_TOL and res.rel_diff_pressure <= CHANNEL_REL_TOL
          and abs(res.reynolds - 2.0) < 1e-12 and its <= CHANNEL_MAX_NEWTON and energy_ok)
    report(7, ok, f"Re {res.reynolds:g}; relative difference speed {res.rel_diff_speed:.2e}, "
                  f"pressure {res.rel_diff_pressure:.2e}; max Newton iterations {its}; {elapsed:.0f} s")


# -- 9. DFG substitute ----------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_dfg(tmp_path):
    g, _ = dfg_inflow()
    spot = (dfg_inflow_profile(0.205, 1.0) == 1.5 and dfg_inflow_profile(0.205, 5.0) == 1.5
            and dfg_inflow_profile(0.0, 2.0) == 0.0 and dfg_inflow_profile(0.41, 2.0) == 0.0
            and dfg_ramp(1.0)[0] == 1.0 and 3 * 1.0**2 - 2 * 1.0**3 == 1.0
            and g(np.array([[0.0, 0.205]]), 1.0)[0, 0] == 1.5)
    cfg = RunConfig.defaults("dfg").updated(out=str(tmp_path))
    start = time.perf_counter()
    res = run_dfg(cfg)
    elapsed = time.perf_counter() - start
    series_ok = (len(res.c_drag) == res.steps and np.all(np.isfinite(res.c_drag))
                 and np.all(np.isfinite(res.c_lift)) and (tmp_path / "draglift.csv").exists())
    ok = spot and res.steps >= DFG_MIN_STEPS and series_ok
    report(9, ok, f"inflow spot checks exact={spot}; {res.steps} steps all converged "
                  f"(max Newton iterations {res.max_newton_iterations}); final c_D {res.c_drag[-1]:.4f}, "
                  f"c_L {res.c_lift[-1]:.4f}; {elapsed:.0f} s")

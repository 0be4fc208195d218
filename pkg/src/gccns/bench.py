"""Benchmark scenarios: manufactured-solution convergence, strong vs Nitsche channel runs, cylinder drag/lift."""
from __future__ import annotations

import configparser
import csv
import logging
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre

from .fem import FacetTables, PointEvaluator, TaylorHoodPair
from .forms import IntervalState, NitscheParams, ProblemData
from .mesh import ChannelGeometry, Mesh, circle_facets, generate_channel_cylinder, generate_unit_square
from .stepper import NavierStokesSystem, NewtonConfig, StepError, TimeMarchConfig, Trajectory, march
from .time_kernel import eval_basis

log = logging.getLogger(__name__)

PI = math.pi


# -- manufactured solution ----------------------------------------------------

class ManufacturedSolution:
    """Divergence-free trigonometric velocity and pressure with a ``sin(t)`` amplitude.

    Fields accept ``x[..., 2]`` and a time ``t`` that broadcasts against
    ``x[..., 0]``. The forcing ``f = v_t + (v . grad) v - nu lap v + grad p``
    is written out in closed form.
    """

    def __init__(self, nu: float):
        self.nu = nu

    @staticmethod
    def _V(x):
        X, Y = PI * x[..., 0], PI * x[..., 1]
        return np.stack([np.cos(Y) * np.sin(X) ** 2 * np.sin(Y),
                         -np.cos(X) * np.sin(Y) ** 2 * np.sin(X)], axis=-1)

    @staticmethod
    def _P(x):
        return 0.25 * np.sin(2 * PI * x[..., 0]) * np.sin(2 * PI * x[..., 1])

    @staticmethod
    def _conv(x):
        X, Y = PI * x[..., 0], PI * x[..., 1]
        return np.stack([PI * np.sin(X) ** 3 * np.sin(Y) ** 2 * np.cos(X),
                         PI * np.sin(X) ** 2 * np.sin(Y) ** 3 * np.cos(Y)], axis=-1)

    @staticmethod
    def _lap(x):
        X, Y = PI * x[..., 0], PI * x[..., 1]
        return np.stack([2 * PI**2 * (2 * np.cos(2 * X) - 1) * np.sin(Y) * np.cos(Y),
                         2 * PI**2 * (1 - 2 * np.cos(2 * Y)) * np.sin(X) * np.cos(X)], axis=-1)

    @staticmethod
    def _gradP(x):
        X, Y = 2 * PI * x[..., 0], 2 * PI * x[..., 1]
        return np.stack([0.5 * PI * np.cos(X) * np.sin(Y), 0.5 * PI * np.sin(X) * np.cos(Y)], axis=-1)

    @staticmethod
    def _div(x):
        """Divergence of the spatial profile, written from its partial derivatives."""
        X, Y = PI * x[..., 0], PI * x[..., 1]
        du = 2 * PI * np.sin(X) * np.cos(X) * np.cos(Y) * np.sin(Y)
        dv = -2 * PI * np.cos(X) * np.sin(X) * np.sin(Y) * np.cos(Y)
        return du + dv

    def velocity(self, x, t):
        return np.sin(t)[..., None] * self._V(x) if np.ndim(t) else math.sin(t) * self._V(x)

    def pressure(self, x, t):
        return np.sin(t) * self._P(x)

    def velocity_dt(self, x, t):
        return np.cos(t)[..., None] * self._V(x) if np.ndim(t) else math.cos(t) * self._V(x)

    def pressure_dt(self, x, t):
        return np.cos(t) * self._P(x)

    def divergence(self, x, t):
        return np.sin(t) * self._div(x)

    def forcing(self, x, t):
        s, c = math.sin(t), math.cos(t)
        return c * self._V(x) + s * s * self._conv(x) - self.nu * s * self._lap(x) + s * self._gradP(x)

    def forcing_dt(self, x, t):
        s, c = math.sin(t), math.cos(t)
        return (-s * self._V(x) + 2 * s * c * self._conv(x) - self.nu * c * self._lap(x)
                + c * self._gradP(x))

    def __call__(self, x, t):
        """``(v, p, dv/dt, dp/dt, f)`` at points ``x`` and time ``t``."""
        return (self.velocity(x, t), self.pressure(x, t), self.velocity_dt(x, t),
                self.pressure_dt(x, t), self.forcing(x, t))

    def initial(self, x, t):
        return self.velocity(x, t), self.pressure(x, t), self.velocity_dt(x, t), self.pressure_dt(x, t)

    def problem_data(self) -> ProblemData:
        return ProblemData(self.nu, f=self.forcing, df=self.forcing_dt)


def manufactured_solution(x, t, nu: float = 1.0):
    return ManufacturedSolution(nu)(np.asarray(x, dtype=float), t)


# -- error norms --------------------------------------------------------------

def eoc(e_coarse: float, e_fine: float) -> float:
    if not (e_coarse > 0 and e_fine > 0):
        return float("nan")
    return math.log2(e_coarse / e_fine)


@dataclass
class ErrorNorms:
    v_L2L2: float
    p_L2L2: float
    v_LinfL2: float
    p_LinfL2: float


def _slab_weights(state: IntervalState, theta: np.ndarray) -> np.ndarray:
    if state.n_slots == 4:
        return np.stack([eval_basis(l, theta) for l in range(4)], axis=-1)
    return np.stack([1.0 - theta, theta], axis=-1)


def error_norms(trajectory: Trajectory, system: NavierStokesSystem, exact, sample_step: float = 1e-3,
                time_points: int = 5) -> ErrorNorms:
    """Space-time errors against ``exact`` (an object with ``velocity`` and ``pressure``).

    L2(L2) uses ``time_points`` Gauss points per slab with the spatial rule of
    the forms; Linf(L2) takes the maximum spatial L2 error over the samples
    ``t0 + d * sample_step * tau`` for ``d = 0 .. 1/sample_step - 1`` of every slab.
    """
    if not trajectory.states:
        raise ValueError("empty trajectory")
    forms = system.forms
    J, M = forms.J, forms.M
    for s in trajectory.states:
        if s.v.shape[1] != J or s.p.shape[1] != M:
            raise ValueError("trajectory does not live on the given spaces")
    vt, p_phi = forms.vt, forms.p_phi
    C, n = forms.vdofs.shape[0], forms.n_loc
    xq, JxW = vt.x, vt.JxW
    gx, gw = legendre.leggauss(time_points)
    gx, gw = 0.5 * (gx + 1.0), 0.5 * gw
    n_samples = int(round(1.0 / sample_step))
    samples = np.arange(n_samples) * sample_step

    def spatial_sq(state, theta):
        W = _slab_weights(state, theta)                     # (T, S)
        vc = W @ state.v                                    # (T, J)
        pc = W @ state.p
        vh = np.einsum("qi,tcki->tcqk", vt.phi, vc[:, forms.vdofs].reshape(len(theta), C, 2, n))
        ph = np.einsum("qa,tca->tcq", p_phi, pc[:, forms.pdofs])
        t = state.t0 + theta * state.tau
        tt = t[:, None, None]
        ev = vh - exact.velocity(xq[None], tt)
        ep = ph - exact.pressure(xq[None], tt)
        return (np.einsum("cq,tcqk->t", JxW, ev * ev), np.einsum("cq,tcq->t", JxW, ep * ep))

    l2v = l2p = 0.0
    inf_v = inf_p = 0.0
    for s in trajectory.states:
        sv, sp_ = spatial_sq(s, gx)
        l2v += s.tau * float(gw @ sv)
        l2p += s.tau * float(gw @ sp_)
        for chunk in np.array_split(samples, max(1, len(samples) // 100)):
            sv, sp_ = spatial_sq(s, chunk)
            inf_v = max(inf_v, float(sv.max()))
            inf_p = max(inf_p, float(sp_.max()))
    return ErrorNorms(math.sqrt(l2v), math.sqrt(l2p), math.sqrt(inf_v), math.sqrt(inf_p))


ERROR_COLUMNS = ("v_L2L2", "p_L2L2", "v_LinfL2", "p_LinfL2")


@dataclass
class ErrorReport:
    rows: list[dict] = field(default_factory=list)
    trajectories: list = field(default_factory=list)

    def add(self, row: dict) -> None:
        prev = self.rows[-1] if self.rows else None
        for c in ERROR_COLUMNS:
            row[f"eoc_{c}"] = eoc(prev[c], row[c]) if prev is not None else float("nan")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def write_csv(self, path) -> None:
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(keys)
            for r in self.rows:
                w.writerow([_fmt(r.get(k, "")) for k in keys])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return v


# -- configuration --------------------------------------------------------------

SCENARIOS = ("converge", "channelCompare", "dfg")


@dataclass
class RunConfig:
    scenario: str = "converge"
    levels: int = 3
    r: int = 4
    nu: float = 1.0
    eta1: float = 35.0
    eta2: float = 35.0
    scheme: str = "gcc13"
    bc: str = "nitsche"
    out: str = "out"
    deterministic: bool = False
    T: float = 1.0
    tau: float = 1.0
    resolution: int = 0
    sample_step: float = 1e-3
    kappa: bool = True
    kappa_cap: int = 5000
    damping: str = "none"
    mean_velocity: float = 0.2
    length_scale: float = 0.1
    samples: int = 201

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.r < 2:
            raise ValueError("Taylor-Hood needs r >= 2")
        if self.scheme not in ("gcc13", "cgp1"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.bc not in ("strong", "nitsche"):
            raise ValueError(f"unknown boundary mode {self.bc!r}")
        if not (self.nu > 0 and self.T > 0 and self.tau > 0):
            raise ValueError("nu, T and tau must be positive")
        if self.levels < 1:
            raise ValueError("need at least one level")

    @classmethod
    def defaults(cls, scenario: str) -> "RunConfig":
        if scenario == "converge":
            return cls(scenario="converge")
        if scenario == "channelCompare":
            return cls(scenario="channelCompare", r=2, nu=0.01, T=1.0, tau=0.1, resolution=0)
        if scenario == "dfg":
            return cls(scenario="dfg", r=2, nu=1e-3, T=2.0, tau=0.01, resolution=0, damping="lineSearch",
                       mean_velocity=1.0)
        raise ValueError(f"unknown scenario {scenario!r}")

    def updated(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    @classmethod
    def from_ini(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        """Read ``key = value`` pairs from the ``[run]`` section (or the file's only section)."""
        cp = configparser.ConfigParser()
        text = Path(path).read_text()
        if not text.lstrip().startswith("["):
            text = "[run]\n" + text
        cp.read_string(text)
        section = cp["run"] if cp.has_section("run") else cp[cp.sections()[0]]
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw in section.items():
            if key not in types:
                raise ValueError(f"unknown configuration key {key!r}")
            t = types[key]
            if t in ("bool", bool):
                values[key] = section.getboolean(key)
            elif t in ("int", int):
                values[key] = int(raw)
            elif t in ("float", float):
                values[key] = float(raw)
            else:
                values[key] = raw.strip()
        start = base if base is not None else cls.defaults(values.get("scenario", "converge"))
        return replace(start, **values)


# -- convergence study -----------------------------------------------------------

def convergence_level(j: int) -> tuple[int, float]:
    """Cells per side and time step of level ``j``: h = sqrt(2)/2^(j+1), tau = 2^-j."""
    return 2 ** (j + 1), 2.0 ** (-j)


def run_convergence_study(config: RunConfig, newton: NewtonConfig | None = None,
                          keep_trajectories: bool = False) -> ErrorReport:
    newton = newton or NewtonConfig(damping=config.damping)
    sol = ManufacturedSolution(config.nu)
    data = sol.problem_data()
    params = NitscheParams(config.eta1, config.eta2, config.bc)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    report = ErrorReport()
    diag_rows: list[dict] = []
    for j in range(config.levels):
        n, tau = convergence_level(j)
        mesh = generate_unit_square(n)
        pair = TaylorHoodPair(mesh, config.r)
        system = NavierStokesSystem(pair, data, params, config.scheme)
        dofs = pair.block_size * (2 if config.scheme == "gcc13" else 1)
        row = {"level": j, "tau": tau, "h": mesh.h, "dofs": dofs}
        tconf = TimeMarchConfig(config.T, tau, config.scheme, "exactFromSolution")
        try:
            traj = march(system, tconf, newton, initial=system.initial_slab(tau, "exactFromSolution", sol.initial),
                         divergence=True)
        except StepError as err:
            log.error("level %d failed: %s", j, err)
            row.update({c: float("nan") for c in ERROR_COLUMNS})
            row["error"] = str(err)
            report.add(row)
            continue
        if config.kappa:
            first = traj.states[0]
            if dofs <= config.kappa_cap:
                # the Newton matrix at the converged first slab
                row["kappa2"] = system.condition_number(first, config.kappa_cap)
            else:
                row["kappa2"] = float("nan")
        norms = error_norms(traj, system, sol, config.sample_step)
        row.update(vars(norms))
        row["max_newton_iterations"] = max(d["newton_iterations"] for d in traj.diagnostics)
        row["max_weak_divergence"] = max(d["max_weak_divergence"] for d in traj.diagnostics)
        report.add(row)
        for d in traj.diagnostics:
            diag_rows.append({"level": j, **d})
        if keep_trajectories:
            report.trajectories.append((system, traj))
        log.info("level %d: %s", j, row)
    report.write_csv(out / "errors.csv")
    _write_rows(diag_rows, out / "diagnostics.csv")
    return report


def _write_rows(rows: list[dict], path) -> None:
    if not rows:
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


# -- drag and lift ----------------------------------------------------------------

@dataclass
class DragLift:
    drag: float
    lift: float
    c_drag: float
    c_lift: float


def drag_lift(pair: TaylorHoodPair, v: np.ndarray, p: np.ndarray, nu: float, mean_velocity: float = 0.2,
              length_scale: float = 0.1, facets: np.ndarray | None = None) -> DragLift:
    """Forces on the obstacle from the stress line integrals.

    ``n`` is the unit normal pointing out of the obstacle into the fluid and
    ``t = (n_y, -n_x)``; ``F_D = int(nu dv_t/dn n_y - p n_x)``,
    ``F_L = -int(nu dv_t/dn n_x + p n_y)``.
    """
    if facets is None:
        facets = circle_facets(pair.mesh)
    facets = np.asarray(facets).reshape(-1, 3)
    if not len(facets):
        raise ValueError("no obstacle facets to integrate over")
    nq = pair.r + 2
    vt = FacetTables.build(pair.velocity, facets, nq)
    pt = FacetTables.build(pair.pressure, facets, nq)
    nV = pair.nV
    vd = pair.velocity.dof_map[facets[:, 0]]
    pd = pair.pressure.dof_map[facets[:, 0]]
    comps = np.stack([v[:nV][vd], v[nV:][vd]], axis=1)                 # (F, 2, n)
    grad = np.einsum("fqid,fki->fqkd", vt.grad, comps)                  # d v_k / d x_d
    ph = np.einsum("fqa,fa->fq", pt.phi, p[pd])
    nrm = -vt.normal                                                    # into the fluid
    tan = np.stack([nrm[:, 1], -nrm[:, 0]], axis=-1)
    dvt_dn = np.einsum("fk,fqkd,fd->fq", tan, grad, nrm)
    w = vt.w
    fd = float(np.sum(w * (nu * dvt_dn * nrm[:, None, 1] - ph * nrm[:, None, 0])))
    fl = float(-np.sum(w * (nu * dvt_dn * nrm[:, None, 0] + ph * nrm[:, None, 1])))
    scale = 2.0 / (mean_velocity**2 * length_scale)
    return DragLift(fd, fl, scale * fd, scale * fl)


# -- channel scenarios --------------------------------------------------------------

CHANNEL_INFLOW_CONSTANT = 7.13861


def _on_inflow(x, geom: ChannelGeometry):
    return np.abs(x[..., 0]) <= 1e-10 * geom.length


def channel_inflow(geom: ChannelGeometry = ChannelGeometry()):
    """Low-Reynolds inflow ``(-c (y - H) y t^2, 0)`` on x = 0, zero on the other Dirichlet parts."""
    H = geom.height

    def g(x, t):
        y = x[..., 1]
        u = np.where(_on_inflow(x, geom), -CHANNEL_INFLOW_CONSTANT * (y - H) * y * t**2, 0.0)
        return np.stack([u, np.zeros_like(u)], axis=-1)

    def dg(x, t):
        y = x[..., 1]
        u = np.where(_on_inflow(x, geom), -CHANNEL_INFLOW_CONSTANT * (y - H) * y * 2 * t, 0.0)
        return np.stack([u, np.zeros_like(u)], axis=-1)

    return g, dg


def dfg_ramp(t: float) -> tuple[float, float]:
    """Smooth start ``3t^2 - 2t^3`` for t < 1 and 1 afterwards; value and slope."""
    if t < 1.0:
        return 3 * t * t - 2 * t**3, 6 * t - 6 * t * t
    return 1.0, 0.0


def dfg_inflow_profile(y, t, height: float = 0.41, peak: float = 1.5):
    ramp, _ = dfg_ramp(t)
    return _parabola(y, height) * peak * ramp


def _parabola(y, height):
    # written so that the midline value is exactly 1
    return (2.0 * y / height) * (2.0 * (height - y) / height)


def dfg_inflow(geom: ChannelGeometry = ChannelGeometry(), peak: float = 1.5):
    H = geom.height

    def g(x, t):
        y = x[..., 1]
        r, _ = dfg_ramp(t)
        u = np.where(_on_inflow(x, geom), _parabola(y, H) * peak * r, 0.0)
        return np.stack([u, np.zeros_like(u)], axis=-1)

    def dg(x, t):
        y = x[..., 1]
        _, dr = dfg_ramp(t)
        u = np.where(_on_inflow(x, geom), _parabola(y, H) * peak * dr, 0.0)
        return np.stack([u, np.zeros_like(u)], axis=-1)

    return g, dg


def reynolds_number(mean_velocity: float, length_scale: float, nu: float) -> float:
    return mean_velocity * length_scale / nu


def cross_section_points(geom: ChannelGeometry, n: int, x: float | None = None) -> np.ndarray:
    """Points on the vertical line through the obstacle centre, those inside the obstacle removed."""
    x = geom.center[0] if x is None else x
    y = np.linspace(0.0, geom.height, n)
    pts = np.column_stack([np.full(n, x), y])
    return pts[~geom.inside_obstacle(pts)]


@dataclass
class ChannelCompareResult:
    points: np.ndarray
    speed: dict
    pressure: dict
    rel_diff_speed: float
    rel_diff_pressure: float
    reynolds: float
    diagnostics: dict


def _rel_l2(a, b) -> float:
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def run_channel_compare(config: RunConfig, newton: NewtonConfig | None = None) -> ChannelCompareResult:
    geom = ChannelGeometry()
    mesh = generate_channel_cylinder(geom, config.resolution)
    pair = TaylorHoodPair(mesh, config.r)
    g, dg = channel_inflow(geom)
    data = ProblemData(config.nu, g=g, dg=dg)
    newton = newton or NewtonConfig(damping=config.damping)
    re = reynolds_number(config.mean_velocity, config.length_scale, config.nu)
    log.info("channel compare: Re = %.6g, %d cells", re, mesh.n_cells)
    pts = cross_section_points(geom, config.samples)
    vel_eval = PointEvaluator(pair.velocity, pts)
    p_eval = PointEvaluator(pair.pressure, pts)
    speed, pres, diags = {}, {}, {}
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    for mode in ("strong", "nitsche"):
        params = NitscheParams(config.eta1, config.eta2, mode)
        system = NavierStokesSystem(pair, data, params, config.scheme)
        traj = march(system, TimeMarchConfig(config.T, config.tau, config.scheme, "zero"), newton,
                     diagnostics_path=out / f"diagnostics_{mode}.csv")
        last = traj.states[-1]
        end = 2 if config.scheme == "gcc13" else 1
        v, p = last.v[end], last.p[end]
        u = vel_eval.values(v[:pair.nV])
        w = vel_eval.values(v[pair.nV:])
        speed[mode] = np.hypot(u, w)
        pres[mode] = p_eval.values(p)
        diags[mode] = {
            "max_newton_iterations": max(d["newton_iterations"] for d in traj.diagnostics),
            "kinetic_energy": 0.5 * float(v @ (system.assembler.operator(system.forms.mass_blocks(),
                                                                        pair.J, pair.J) @ v)),
        }
    res = ChannelCompareResult(pts, speed, pres, _rel_l2(speed["nitsche"], speed["strong"]),
                               _rel_l2(pres["nitsche"], pres["strong"]), re, diags)
    with open(out / "crosssection.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "y", "speed_strong", "speed_nitsche", "pressure_strong", "pressure_nitsche"])
        for i, (x, y) in enumerate(pts):
            wr.writerow([_fmt(x), _fmt(y), _fmt(speed["strong"][i]), _fmt(speed["nitsche"][i]),
                         _fmt(pres["strong"][i]), _fmt(pres["nitsche"][i])])
    return res


@dataclass
class DfgResult:
    times: np.ndarray
    c_drag: np.ndarray
    c_lift: np.ndarray
    steps: int
    max_newton_iterations: int


def run_dfg(config: RunConfig, newton: NewtonConfig | None = None, progress=None) -> DfgResult:
    geom = ChannelGeometry()
    mesh = generate_channel_cylinder(geom, config.resolution)
    pair = TaylorHoodPair(mesh, config.r)
    g, dg = dfg_inflow(geom)
    data = ProblemData(config.nu, g=g, dg=dg)
    params = NitscheParams(config.eta1, config.eta2, config.bc)
    system = NavierStokesSystem(pair, data, params, config.scheme)
    newton = newton or NewtonConfig(damping=config.damping)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    facets = circle_facets(mesh)
    end = 2 if config.scheme == "gcc13" else 1
    rows = []

    def record(row):
        if progress is not None:
            progress(row)

    log.info("dfg: Re = %.6g, %d cells, %d unknowns per slab", reynolds_number(
        config.mean_velocity, config.length_scale, config.nu), mesh.n_cells, system.n_unknowns)
    traj = march(system, TimeMarchConfig(config.T, config.tau, config.scheme, "zero"), newton,
                 diagnostics_path=out / "diagnostics.csv", progress=record)
    for s, d in zip(traj.states, traj.diagnostics):
        dl = drag_lift(pair, s.v[end], s.p[end], config.nu, config.mean_velocity, config.length_scale, facets)
        rows.append({"step": d["step"], "time": s.t1, "drag": dl.drag, "lift": dl.lift,
                     "c_drag": dl.c_drag, "c_lift": dl.c_lift, "newton_iterations": d["newton_iterations"]})
    _write_rows(rows, out / "draglift.csv")
    return DfgResult(np.array([r["time"] for r in rows]), np.array([r["c_drag"] for r in rows]),
                     np.array([r["c_lift"] for r in rows]), len(rows),
                     max(r["newton_iterations"] for r in rows))

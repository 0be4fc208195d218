"""Newton solver and time marching for the Hermite (gcc13) and linear (cgp1) schemes.

The marching code only talks to a :class:`DiscreteSystem`; the Navier-Stokes
adapter and a linear ODE adapter both implement it.
"""
from __future__ import annotations

import csv
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
import scipy.sparse as sp

from .assembly import (Assembler, BlockSystem, DirichletConstraints, condense_dirichlet,
                       strong_dirichlet_constraints)
from .fem import TaylorHoodPair
from .forms import SCHEMES, IntervalState, NavierStokesForms, NitscheParams, ProblemData
from .linalg import (CapabilityError, SolverConfig, SolverError, block_schur_preconditioner,
                     condition_number, direct_solve, gmres)
from .time_kernel import eval_basis


class NewtonError(RuntimeError):
    def __init__(self, msg: str, history: list[float], x=None):
        super().__init__(msg)
        self.history = history
        self.x = x


class StepError(RuntimeError):
    def __init__(self, msg: str, step: int, history: list[float], partial=None):
        super().__init__(msg)
        self.step = step
        self.history = history
        self.partial = partial


@dataclass(frozen=True)
class NewtonConfig:
    atol: float = 1e-10
    rtol: float = 1e-8
    max_iter: int = 25
    damping: str = "none"          # none | lineSearch | dogleg
    contraction: float = 0.5
    sufficient_decrease: float = 1e-4
    min_step: float = 1e-10
    trust_radius: float = 1.0
    max_trust_radius: float = 1e8
    linear_solver: str = "direct"  # direct | gmres
    gmres: SolverConfig = SolverConfig(rtol=1e-12, preconditioner="blockSchur")

    def __post_init__(self):
        if self.damping not in ("none", "lineSearch", "dogleg"):
            raise ValueError(f"unknown damping {self.damping!r}")
        if not (0 < self.contraction < 1 and 0 < self.sufficient_decrease < 1):
            raise ValueError("line-search factors must lie in (0, 1)")
        if not (self.trust_radius > 0 and self.max_trust_radius > 0):
            raise ValueError("trust radii must be positive")
        if self.linear_solver not in ("direct", "gmres"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")

    def tolerance(self, q0_norm: float) -> float:
        return max(self.atol, self.rtol * q0_norm)


@dataclass
class NewtonResult:
    x: np.ndarray
    iterations: int
    history: list[float]
    linear_iterations: int = 0


def _solve(J, rhs, config: NewtonConfig, precond=None) -> tuple[np.ndarray, int]:
    if config.linear_solver == "gmres":
        res = gmres(J, rhs, config.gmres, M=precond)
        return res.x, res.iterations
    if sp.issparse(J):
        return direct_solve(J, rhs), 0
    J = np.atleast_2d(np.asarray(J, dtype=float))
    return np.linalg.solve(J, np.atleast_1d(rhs)), 0


def newton_solve(residual: Callable, jacobian: Callable, x0, config: NewtonConfig = NewtonConfig(),
                 preconditioner: Callable | None = None) -> NewtonResult:
    """Solve ``q(x) = 0``. ``jacobian(x)`` returns a dense or sparse matrix.

    ``preconditioner(x, J)`` may return an operator for the GMRES option.
    """
    scalar = np.ndim(x0) == 0
    x = np.atleast_1d(np.array(x0, dtype=float))
    q = np.atleast_1d(residual(x[0] if scalar else x))
    norm = float(np.linalg.norm(q))
    history = [norm]
    tol = config.tolerance(norm)
    radius = config.trust_radius
    lin_its = 0

    def res(y):
        return np.atleast_1d(residual(y[0] if scalar else y))

    for it in range(1, config.max_iter + 1):
        if norm <= tol:
            return NewtonResult(x[0] if scalar else x, it - 1, history, lin_its)
        J = jacobian(x[0] if scalar else x)
        if np.ndim(J) < 2 and not sp.issparse(J):
            J = np.atleast_2d(J)
        P = preconditioner(x, J) if (preconditioner is not None and config.linear_solver == "gmres") else None
        delta, k = _solve(J, -q, config, P)
        lin_its += k
        if not np.all(np.isfinite(delta)):
            raise NewtonError("non-finite Newton direction", history, x)
        if config.damping == "none":
            x = x + delta
            q = res(x)
            norm = float(np.linalg.norm(q))
        elif config.damping == "lineSearch":
            alpha = 1.0
            while True:
                trial = x + alpha * delta
                qt = res(trial)
                nt = float(np.linalg.norm(qt))
                if np.isfinite(nt) and nt <= (1.0 - config.sufficient_decrease * alpha) * norm:
                    break
                if alpha <= config.min_step:
                    break
                alpha *= config.contraction
            x, q, norm = trial, qt, nt
        else:
            x, q, norm, radius = _dogleg_step(res, J, x, q, norm, delta, radius, config)
        history.append(norm)
        if not np.isfinite(norm):
            raise NewtonError("residual became non-finite", history, x)
    if norm <= tol:
        return NewtonResult(x[0] if scalar else x, config.max_iter, history, lin_its)
    raise NewtonError(f"Newton did not converge in {config.max_iter} iterations "
                      f"(residual {norm:.3e}, tolerance {tol:.3e})", history, x)


def _dogleg_step(res, J, x, q, norm, p_newton, radius, config: NewtonConfig):
    """One trust-region dogleg step on the model ``0.5 ||q + J p||^2``."""
    g = J.T @ q
    Jg = J @ g
    gg = float(g @ g)
    for _ in range(60):
        if np.linalg.norm(p_newton) <= radius:
            p = p_newton
        elif gg == 0.0:
            p = p_newton * (radius / np.linalg.norm(p_newton))
        else:
            p_c = -(gg / float(Jg @ Jg)) * g
            nc = np.linalg.norm(p_c)
            if nc >= radius:
                p = p_c * (radius / nc)
            else:
                d = p_newton - p_c
                a, b, c = d @ d, 2 * p_c @ d, p_c @ p_c - radius**2
                s = (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)
                p = p_c + s * d
        model = np.linalg.norm(q + J @ p)
        qt = res(x + p)
        nt = float(np.linalg.norm(qt))
        pred = norm**2 - model**2
        actual = norm**2 - nt**2 if np.isfinite(nt) else -np.inf
        rho = actual / pred if pred > 0 else -np.inf
        pn = np.linalg.norm(p)
        if rho < 0.25:
            radius = 0.25 * pn
        elif rho > 0.75 and pn >= 0.99 * radius:
            radius = min(2.0 * radius, config.max_trust_radius)
        if rho > 1e-4:
            return x + p, qt, nt, radius
        if radius < 1e-14 * (1.0 + np.linalg.norm(x)):
            break
    return x + p, qt, nt, radius


# -- discrete systems ---------------------------------------------------------

class DiscreteSystem(Protocol):
    """What the time-marching driver needs from a semi-discrete problem."""

    scheme: str

    def prepare(self, state: IntervalState) -> None: ...
    def pack(self, state: IntervalState) -> np.ndarray: ...
    def unpack(self, x: np.ndarray, state: IntervalState) -> IntervalState: ...
    def residual(self, state: IntervalState) -> np.ndarray: ...
    def jacobian(self, state: IntervalState): ...
    def finalize(self, state: IntervalState) -> None: ...


def _unknown_slots(scheme: str) -> tuple[int, ...]:
    return (2, 3) if scheme == "gcc13" else (1,)


class _SlotPacking:
    scheme: str

    def pack(self, state: IntervalState) -> np.ndarray:
        return np.concatenate([np.concatenate([state.v[k], state.p[k]])
                               for k in _unknown_slots(self.scheme)])

    def unpack(self, x: np.ndarray, state: IntervalState) -> IntervalState:
        out = state.copy()
        J, M = state.v.shape[1], state.p.shape[1]
        o = 0
        for k in _unknown_slots(self.scheme):
            out.v[k] = x[o:o + J]
            o += J
            out.p[k] = x[o:o + M]
            o += M
        return out

    def initial_guess(self, state: IntervalState) -> None:
        if self.scheme == "gcc13":
            state.v[2], state.v[3] = state.v[0], state.v[1]
            state.p[2], state.p[3] = state.p[0], state.p[1]
        else:
            state.v[1], state.p[1] = state.v[0], state.p[0]


class LinearODESystem(_SlotPacking):
    """``y' = L y + f(t)`` treated with the same time discretisations (no pressure)."""

    def __init__(self, L, scheme: str, f: Callable | None = None, df: Callable | None = None):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        self.L = np.atleast_2d(np.asarray(L, dtype=float))
        self.n = self.L.shape[0]
        self.scheme = scheme
        self.f = f or (lambda t: np.zeros(self.n))
        self.df = df or (lambda t: np.zeros(self.n))

    def prepare(self, state):
        self.initial_guess(state)

    def finalize(self, state):
        pass

    def residual(self, state: IntervalState) -> np.ndarray:
        from .forms import time_table
        tab = time_table(self.scheme)
        tau, t0, t1 = state.tau, state.t0, state.t1
        if self.scheme == "gcc13":
            fs = np.stack([self.f(t0), tau * self.df(t0), self.f(t1), tau * self.df(t1)])
            ybar = tab.s @ state.v
            q1 = state.v[2] - state.v[0] - tau * (self.L @ ybar + tab.s @ fs)
            q3 = state.v[3] / tau - self.L @ state.v[2] - self.f(t1)
            return np.concatenate([q1, q3])
        fs = np.stack([self.f(t0), self.f(t1)])
        return state.v[1] - state.v[0] - tau * (self.L @ (tab.s @ state.v) + tab.s @ fs)

    def jacobian(self, state: IntervalState) -> np.ndarray:
        from .forms import time_table
        tab = time_table(self.scheme)
        tau, I, L = state.tau, np.eye(self.n), self.L
        if self.scheme == "gcc13":
            return np.block([[I - tau * tab.s[2] * L, -tau * tab.s[3] * L], [-L, I / tau]])
        return I - tau * tab.s[1] * L

    def initial_slab(self, y0, tau: float, dy0=None) -> IntervalState:
        """Pseudo slab ending at t = 0 that carries the initial data."""
        y0 = np.atleast_1d(np.asarray(y0, dtype=float))
        S = 4 if self.scheme == "gcc13" else 2
        v = np.zeros((S, self.n))
        v[-2 if S == 4 else -1] = y0
        if S == 4:
            v[3] = tau * (self.L @ y0 + self.f(0.0) if dy0 is None else np.asarray(dy0))
        return IntervalState(v, np.zeros((S, 0)), -tau, tau)


class NavierStokesSystem(_SlotPacking):
    """Navier-Stokes adapter: assembles, condenses constraints and pins pressure if needed."""

    def __init__(self, pair: TaylorHoodPair, data: ProblemData, params: NitscheParams, scheme: str,
                 pin_pressure: bool | None = None, quad_points: int | None = None):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}")
        from .mesh import Marker
        self.pair, self.data, self.params, self.scheme = pair, data, params, scheme
        self.forms = NavierStokesForms(pair, data, params, quad_points)
        self.assembler = Assembler(self.forms, scheme)
        if pin_pressure is None:
            pin_pressure = not pair.mesh.has_marker(Marker.OUTFLOW)
        self.pin_pressure = pin_pressure
        self._cache: tuple | None = None
        self._mp = None
        self._area = float(self.forms.vt.JxW.sum())
        # pressure dof closest to the domain centroid-ish: the first one
        self._pin_dof = 0

    @property
    def n_unknowns(self) -> int:
        return sum(self.assembler.block_sizes)

    def constraints(self, state: IntervalState) -> DirichletConstraints:
        c = DirichletConstraints(np.zeros(0, dtype=np.int64))
        if not self.params.nitsche:
            c = c + strong_dirichlet_constraints(self.pair, self.data, state.t1, state.tau, self.scheme)
        if self.pin_pressure:
            off = np.array(self.assembler.sparse.offsets)
            idx = [off[1] + self._pin_dof] + ([off[3] + self._pin_dof] if self.scheme == "gcc13" else [])
            slots = _unknown_slots(self.scheme)
            vals = [state.p[slots[0], self._pin_dof]] + (
                [state.p[slots[1], self._pin_dof]] if self.scheme == "gcc13" else [])
            c = c + DirichletConstraints(np.array(idx), np.array(vals))
        return c

    def prepare(self, state: IntervalState) -> None:
        self.initial_guess(state)
        if not self.params.nitsche:
            c = strong_dirichlet_constraints(self.pair, self.data, state.t1, state.tau, self.scheme)
            filled = self.unpack(c.apply_to(self.pack(state)), state)
            state.v[:], state.p[:] = filled.v, filled.p

    def _system(self, state: IntervalState) -> BlockSystem:
        key = (state.t0, state.tau, state.v.tobytes(), state.p.tobytes())
        if self._cache is not None and self._cache[0] == key:
            return self._cache[1]
        raw = self.assembler.assemble(state)
        cond = condense_dirichlet(raw, self.constraints(state))
        self._cache = (key, cond, raw)
        return cond

    def raw_system(self, state: IntervalState) -> BlockSystem:
        self._system(state)
        return self._cache[2]

    def residual(self, state: IntervalState) -> np.ndarray:
        return -self._system(state).d

    def jacobian(self, state: IntervalState):
        return self._system(state).S

    def pressure_mass(self):
        if self._mp is None:
            self._mp = self.assembler.operator(self.forms.pressure_mass_blocks(), self.pair.M, self.pair.M)
        return self._mp

    def preconditioner(self, state: IntervalState):
        return block_schur_preconditioner(self._system(state), self.pressure_mass(), self.data.nu)

    def finalize(self, state: IntervalState) -> None:
        if not self.pin_pressure:
            return
        mp = self.pressure_mass()
        ones = np.ones(self.pair.M)
        for k in _unknown_slots(self.scheme):
            state.p[k] -= (ones @ (mp @ state.p[k])) / self._area

    def weak_divergence(self, state: IntervalState) -> np.ndarray:
        """Weak divergence condition at the end of the slab (including boundary data terms)."""
        q = self.forms.residual(state)
        return q[3] if self.scheme == "gcc13" else q[1] / state.tau

    def condition_number(self, state: IntervalState, cap: int = 5000) -> float:
        raw = self.raw_system(state)
        return condition_number(raw.S, cap=cap, nullity=len(_unknown_slots(self.scheme)) if self.pin_pressure else 0)

    def initial_slab(self, tau: float, mode: str = "zero", exact: Callable | None = None) -> IntervalState:
        """Pseudo slab ending at t = 0.

        ``exact(x, t)`` must return ``(v, p, dv, dp)`` with shapes
        ``(N, 2), (N,), (N, 2), (N,)``.
        """
        S = 4 if self.scheme == "gcc13" else 2
        v = np.zeros((S, self.pair.J))
        p = np.zeros((S, self.pair.M))
        if mode == "exactFromSolution":
            if exact is None:
                raise ValueError("exact initial data requested without an exact solution")
            xv, xp = self.pair.velocity.dof_coords, self.pair.pressure.dof_coords
            ev, _, edv, _ = exact(xv, 0.0)
            _, ep, _, edp = exact(xp, 0.0)
            end = S - 2 if S == 4 else 1
            v[end] = np.concatenate([ev[:, 0], ev[:, 1]])
            p[end] = ep
            if S == 4:
                v[3] = tau * np.concatenate([edv[:, 0], edv[:, 1]])
                p[3] = tau * edp
        elif mode != "zero":
            raise ValueError(f"unknown initial data mode {mode!r}")
        return IntervalState(v, p, -tau, tau)


def _step(system: DiscreteSystem, previous: IntervalState, config: NewtonConfig,
          tau: float | None = None, t0: float | None = None) -> tuple[IntervalState, NewtonResult]:
    state = previous.successor(tau)
    if t0 is not None:
        state.t0 = t0
    system.prepare(state)
    x0 = system.pack(state)

    def res(x):
        return system.residual(system.unpack(x, state))

    def jac(x):
        return system.jacobian(system.unpack(x, state))

    prec = None
    if hasattr(system, "preconditioner"):
        prec = lambda x, J: system.preconditioner(system.unpack(x, state))
    result = newton_solve(res, jac, x0, config, prec)
    out = system.unpack(np.atleast_1d(result.x), state)
    system.finalize(out)
    return out, result


def step_gcc13(system: DiscreteSystem, previous: IntervalState, config: NewtonConfig = NewtonConfig(),
               tau: float | None = None, t0: float | None = None) -> tuple[IntervalState, NewtonResult]:
    """One Hermite slab: copy value/slope from ``previous``, solve for the end slots."""
    if system.scheme != "gcc13" or previous.n_slots != 4:
        raise ValueError("step_gcc13 needs a gcc13 system and a 4-slot state")
    return _step(system, previous, config, tau, t0)


def step_cgp1(system: DiscreteSystem, previous: IntervalState, config: NewtonConfig = NewtonConfig(),
              tau: float | None = None, t0: float | None = None) -> tuple[IntervalState, NewtonResult]:
    """One linear slab: copy the end value of ``previous``, solve for the new end value."""
    if system.scheme != "cgp1" or previous.n_slots != 2:
        raise ValueError("step_cgp1 needs a cgp1 system and a 2-slot state")
    return _step(system, previous, config, tau, t0)


@dataclass(frozen=True)
class TimeMarchConfig:
    T: float
    tau: float
    scheme: str = "gcc13"
    initial_data: str = "zero"     # zero | exactFromSolution

    def __post_init__(self):
        if not (self.T > 0 and self.tau > 0):
            raise ValueError("T and tau must be positive")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.initial_data not in ("zero", "exactFromSolution"):
            raise ValueError(f"unknown initial data mode {self.initial_data!r}")

    @property
    def n_steps(self) -> int:
        n = int(round(self.T / self.tau))
        if n < 1 or abs(n * self.tau - self.T) > 1e-10 * self.T:
            raise ValueError(f"T = {self.T} is not an integer multiple of tau = {self.tau}")
        return n


@dataclass
class Trajectory:
    """Solved slabs in time order plus per-step diagnostics."""

    states: list[IntervalState] = field(default_factory=list)
    diagnostics: list[dict] = field(default_factory=list)

    @property
    def scheme(self) -> str:
        return self.states[0].scheme

    @property
    def times(self) -> np.ndarray:
        return np.array([self.states[0].t0] + [s.t1 for s in self.states])

    def locate(self, t: float, side: str = "left") -> tuple[int, float]:
        """Slab index and reference time; ``side`` picks the slab at interior nodes."""
        t1s = np.array([s.t1 for s in self.states])
        t0 = self.states[0].t0
        if t < t0 - 1e-12 or t > t1s[-1] + 1e-12:
            raise ValueError(f"time {t} outside the trajectory")
        if side == "left":
            n = int(np.searchsorted(t1s, t - 1e-14 * max(1.0, abs(t)), side="left"))
        else:
            n = int(np.searchsorted(t1s, t + 1e-14 * max(1.0, abs(t)), side="right"))
        n = min(max(n, 0), len(self.states) - 1)
        s = self.states[n]
        return n, (t - s.t0) / s.tau

    def coefficients(self, t: float, derivative: int = 0, side: str = "left", field: str = "v"):
        n, th = self.locate(t, side)
        s = self.states[n]
        arr = s.v if field == "v" else s.p
        if s.n_slots == 4:
            w = [eval_basis(l, th, derivative) for l in range(4)]
        else:
            w = [1.0 - th, th] if derivative == 0 else [-1.0, 1.0]
        out = sum(wl * al for wl, al in zip(w, arr))
        return out / s.tau if derivative else out


def march(system: DiscreteSystem, config: TimeMarchConfig, newton: NewtonConfig = NewtonConfig(),
          initial: IntervalState | None = None, diagnostics_path=None, kappa: bool = False,
          kappa_cap: int = 5000, divergence: bool = False, progress: Callable | None = None) -> Trajectory:
    """Advance from the pseudo slab ``initial`` (ending at t = 0) over ``T / tau`` slabs."""
    if system.scheme != config.scheme:
        raise ValueError("system and time-march config disagree on the scheme")
    n_steps = config.n_steps
    if initial is None:
        initial = system.initial_slab(config.tau, config.initial_data)
    step = step_gcc13 if config.scheme == "gcc13" else step_cgp1
    traj = Trajectory()
    prev = initial
    for n in range(1, n_steps + 1):
        t_start = _time.perf_counter()
        try:
            state, res = step(system, prev, newton, config.tau, (n - 1) * config.tau)
        except NewtonError as err:
            _write_diagnostics(traj.diagnostics, diagnostics_path)
            raise StepError(f"step {n}: {err}", n, err.history, traj) from err
        row = {"step": n, "time": n * config.tau, "newton_iterations": res.iterations,
               "residual_norm": res.history[-1], "initial_residual": res.history[0],
               "linear_iterations": res.linear_iterations,
               "wall_seconds": _time.perf_counter() - t_start}
        if kappa and hasattr(system, "condition_number"):
            try:
                row["kappa2"] = system.condition_number(state, kappa_cap)
            except CapabilityError:
                row["kappa2"] = float("nan")
        if divergence and hasattr(system, "weak_divergence"):
            row["max_weak_divergence"] = float(np.max(np.abs(system.weak_divergence(state))))
        traj.states.append(state)
        traj.diagnostics.append(row)
        if progress is not None:
            progress(row)
        prev = state
    _write_diagnostics(traj.diagnostics, diagnostics_path)
    return traj


def _write_diagnostics(rows: list[dict], path) -> None:
    if path is None or not rows:
        return
    keys = list(dict.fromkeys(k for r in rows for k in r))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in keys])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.17g}"
    return v

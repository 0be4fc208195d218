"""Element and facet kernels of the space-time Navier-Stokes forms.

Velocity test functions are ordered component-blocked (all x-basis functions,
then all y-basis functions) both locally and globally. Conventions:

* ``A = nu K + N`` with ``N`` the Nitsche facet form on Dirichlet facets,
* ``G`` couples pressure into the momentum rows: ``-(p, div psi) + <p n, psi>``,
* ``D = -G^T`` is the weak divergence: ``(div v, xi) - <v.n, xi>``,
* ``c(a, w) = ((a . grad) w, psi)``.

In strong mode the facet terms are absent.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fem import CellTables, FacetTables, TaylorHoodPair, gauss_square
from .mesh import DIRICHLET_MARKERS, Marker
from .time_kernel import TemporalCouplingTable, coupling_table, eval_basis, linear_coupling_table

SCHEMES = ("gcc13", "cgp1")


@dataclass(frozen=True)
class NitscheParams:
    eta1: float = 35.0
    eta2: float = 35.0
    mode: str = "nitsche"

    def __post_init__(self):
        if self.mode not in ("nitsche", "strong"):
            raise ValueError(f"mode must be 'nitsche' or 'strong', got {self.mode!r}")
        if self.mode == "nitsche" and not (self.eta1 > 0 and self.eta2 > 0):
            raise ValueError("Nitsche penalties must be positive")

    @property
    def nitsche(self) -> bool:
        return self.mode == "nitsche"


def _zero_field(x, t):
    return np.zeros(np.shape(x)[:-1] + (2,))


@dataclass
class ProblemData:
    """Viscosity, body force and Dirichlet data; fields map ``(x[..., 2], t)`` to ``[..., 2]``."""

    nu: float
    f: Callable = _zero_field
    df: Callable = _zero_field
    g: Callable = _zero_field
    dg: Callable = _zero_field

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"viscosity must be positive, got {self.nu}")


@dataclass
class IntervalState:
    """Coefficient fields of one time slab.

    ``v`` has shape ``(S, J)`` and ``p`` shape ``(S, M)``; ``S = 4`` for the
    Hermite ansatz (value, tau * slope at t0, value, tau * slope at t1) and
    ``S = 2`` for the linear one (value at t0, value at t1).
    """

    v: np.ndarray
    p: np.ndarray
    t0: float
    tau: float

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.p = np.asarray(self.p, dtype=float)
        if self.v.ndim != 2 or self.p.ndim != 2 or self.v.shape[0] != self.p.shape[0]:
            raise ValueError("state arrays must be (slots, dofs) with matching slot counts")
        if self.v.shape[0] not in (2, 4):
            raise ValueError("state must have 2 or 4 time slots")
        if not self.tau > 0:
            raise ValueError("time step must be positive")

    @property
    def n_slots(self) -> int:
        return self.v.shape[0]

    @property
    def scheme(self) -> str:
        return "gcc13" if self.n_slots == 4 else "cgp1"

    @property
    def t1(self) -> float:
        return self.t0 + self.tau

    def copy(self) -> "IntervalState":
        return IntervalState(self.v.copy(), self.p.copy(), self.t0, self.tau)

    def successor(self, tau: float | None = None) -> "IntervalState":
        """Next slab with the known slots copied from this slab's end slots."""
        tau = self.tau if tau is None else tau
        v = np.zeros_like(self.v)
        p = np.zeros_like(self.p)
        if self.n_slots == 4:
            v[0], v[1] = self.v[2], self.v[3] * (tau / self.tau)
            p[0], p[1] = self.p[2], self.p[3] * (tau / self.tau)
        else:
            v[0], p[0] = self.v[1], self.p[1]
        return IntervalState(v, p, self.t1, tau)

    def velocity_at(self, theta):
        """Velocity coefficients at reference time ``theta`` in [0, 1]."""
        if self.n_slots == 4:
            w = [eval_basis(l, theta) for l in range(4)]
        else:
            w = [1.0 - theta, theta]
        return sum(wl * vl for wl, vl in zip(w, self.v))


def time_table(scheme: str) -> TemporalCouplingTable:
    if scheme == "gcc13":
        return coupling_table()
    if scheme == "cgp1":
        return linear_coupling_table()
    raise ValueError(f"unknown scheme {scheme!r}")


@dataclass
class LocalBlock:
    """Batched local matrices ``vals[e]`` scattered to ``rows[e] x cols[e]``."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray

    def matvec(self, x: np.ndarray, n_rows: int) -> np.ndarray:
        y = np.einsum("eab,eb->ea", self.vals, x[self.cols])
        return np.bincount(self.rows.ravel(), y.ravel(), minlength=n_rows)

    @property
    def T(self) -> "LocalBlock":
        return LocalBlock(self.cols, self.rows, self.vals.transpose(0, 2, 1))

    def scaled(self, c: float) -> "LocalBlock":
        return LocalBlock(self.rows, self.cols, c * self.vals)


def apply_blocks(blocks: list[LocalBlock], x: np.ndarray, n_rows: int) -> np.ndarray:
    out = np.zeros(n_rows)
    for b in blocks:
        out += b.matvec(x, n_rows)
    return out


# -- element kernels --------------------------------------------------------

def mass_kernel(t: CellTables) -> np.ndarray:
    return np.einsum("cq,qi,qj->cij", t.JxW, t.phi, t.phi)


def stiffness_kernel(t: CellTables) -> np.ndarray:
    return np.einsum("cq,cqid,cqjd->cij", t.JxW, t.grad, t.grad)


def vector_block(scalar: np.ndarray) -> np.ndarray:
    """Component-diagonal vector matrix from a scalar one."""
    E, n, m = scalar.shape
    out = np.zeros((E, 2 * n, 2 * m))
    out[:, :n, :m] = scalar
    out[:, n:, m:] = scalar
    return out


def divergence_kernel(vt: CellTables, p_phi: np.ndarray) -> np.ndarray:
    """``(div v, xi)`` with rows pressure, columns vector velocity: ``(C, np, 2n)``."""
    d = np.einsum("cq,qa,cqjd->cadj", vt.JxW, p_phi, vt.grad)
    return d.reshape(d.shape[0], d.shape[1], -1)


def load_kernel(t: CellTables, fq: np.ndarray) -> np.ndarray:
    """``(f, psi)`` per cell, ``fq`` of shape ``(C, Q, 2)``."""
    r = np.einsum("cq,cqk,qi->cki", t.JxW, fq, t.phi)
    return r.reshape(r.shape[0], -1)


def _local_velocity(t_phi: np.ndarray, grad: np.ndarray, ve: np.ndarray):
    # ve: (C, 2, n)
    val = np.einsum("qi,cki->cqk", t_phi, ve)
    g = np.einsum("cqid,cki->cqkd", grad, ve)
    return val, g


def convection_kernel(t: CellTables, ae: np.ndarray, we: np.ndarray) -> np.ndarray:
    """Local residual of ``c(a, w)``; ``ae, we`` are ``(C, 2, n)``."""
    aq = np.einsum("qi,cki->cqk", t.phi, ae)
    gw = np.einsum("cqid,cki->cqkd", t.grad, we)
    conv = np.einsum("cqd,cqkd->cqk", aq, gw)
    r = np.einsum("cq,cqk,qi->cki", t.JxW, conv, t.phi)
    return r.reshape(r.shape[0], -1)


def convection_jacobian_kernel(t: CellTables, ae: np.ndarray) -> np.ndarray:
    """Local matrix of ``delta -> c(a, delta) + c(delta, a)``: ``(C, 2n, 2n)``."""
    C, _, n = ae.shape
    aq, ga = _local_velocity(t.phi, t.grad, ae)
    # advection part (a . grad) delta, identical for both components
    b = np.einsum("cqd,cqjd->cqj", t.JxW[..., None] * aq, t.grad)
    adv = np.matmul(t.phi.T[None], b)
    # reaction part (delta . grad) a couples the components
    pp = (t.phi[:, :, None] * t.phi[:, None, :]).reshape(len(t.phi), -1)
    wg = (t.JxW[..., None, None] * ga).reshape(C, -1, 4).transpose(0, 2, 1)
    react = np.matmul(wg, pp).reshape(C, 2, 2, n, n)
    out = react.transpose(0, 1, 3, 2, 4).copy()
    out[:, 0, :, 0, :] += adv
    out[:, 1, :, 1, :] += adv
    return out.reshape(C, 2 * n, 2 * n)


# -- Nitsche facet terms ------------------------------------------------------

@dataclass
class NitscheFacetTerms:
    N: np.ndarray        # (F, 2n, 2n) velocity form incl. nu
    Gf: np.ndarray       # (F, 2n, np) <p n, psi>
    vt: FacetTables
    p_phi: np.ndarray    # (F, Qf, np)
    nu: float
    params: NitscheParams

    def velocity_rhs(self, gq: np.ndarray) -> np.ndarray:
        """``b_gamma(g, psi)`` per facet; ``gq`` is ``(F, Qf, 2)``."""
        t, p = self.vt, self.params
        dn = np.einsum("fqid,fd->fqi", t.grad, t.normal)
        gn = np.einsum("fqk,fk->fq", gq, t.normal)
        pen = (p.eta1 * self.nu / t.h)[:, None, None] * gq
        pen = pen + (p.eta2 / t.h)[:, None, None] * gn[..., None] * t.normal[:, None, :]
        r = (np.einsum("fq,fqk,fqi->fki", t.w, pen, t.phi)
             - self.nu * np.einsum("fq,fqk,fqi->fki", t.w, gq, dn))
        return r.reshape(r.shape[0], -1)

    def pressure_rhs(self, gq: np.ndarray) -> np.ndarray:
        """``<g . n, xi>`` per facet."""
        gn = np.einsum("fqk,fk->fq", gq, self.vt.normal)
        return np.einsum("fq,fq,fqa->fa", self.vt.w, gn, self.p_phi)


def nitsche_boundary_terms(vt: FacetTables, pt: FacetTables, nu: float,
                           params: NitscheParams) -> NitscheFacetTerms:
    """Consistency, symmetry and penalty terms on Dirichlet facets.

    The convective inflow term is not included.
    """
    if len(vt.facets) and np.any(vt.facets[:, 2] == int(Marker.OUTFLOW)):
        raise ValueError("Nitsche terms requested on an outflow (do-nothing) facet")
    F, Q, n = vt.phi.shape
    dn = np.einsum("fqid,fd->fqi", vt.grad, vt.normal)
    mass = np.einsum("fq,fqi,fqj->fij", vt.w, vt.phi, vt.phi)
    cons = np.einsum("fq,fqi,fqj->fij", vt.w, vt.phi, dn)  # psi_i * dn phi_j
    scal = -nu * (cons + cons.transpose(0, 2, 1)) + (params.eta1 * nu / vt.h)[:, None, None] * mass
    N = vector_block(scal)
    nn = np.einsum("fk,fm->fkm", vt.normal, vt.normal)
    N = N + np.einsum("f,fkm,fij->fkimj", params.eta2 / vt.h, nn, mass).reshape(F, 2 * n, 2 * n)
    Gf = np.einsum("fq,fqi,fk,fqa->fkia", vt.w, vt.phi, vt.normal, pt.phi).reshape(F, 2 * n, -1)
    return NitscheFacetTerms(N, Gf, vt, pt.phi, nu, params)


# -- forms on a Taylor-Hood pair ---------------------------------------------

@dataclass
class SlotData:
    """Hermite (or linear) coefficients of f at cell points and g at facet points."""

    f: np.ndarray                 # (S, C, Q, 2)
    g: np.ndarray | None          # (S, F, Qf, 2)


class NavierStokesForms:
    """Precomputed local operators and the interval residual / Jacobian."""

    def __init__(self, pair: TaylorHoodPair, data: ProblemData, params: NitscheParams,
                 quad_points: int | None = None):
        self.pair, self.data, self.params = pair, data, params
        r = pair.r
        nq = r + 2 if quad_points is None else quad_points
        rule = gauss_square(nq)
        self.vt = pair.velocity.tabulate_cells(rule)
        self.p_phi, _ = pair.pressure.element.tabulate(rule.points)
        self.vdofs = pair.vector_dof_map
        self.pdofs = pair.pressure.dof_map
        self.J, self.M = pair.J, pair.M
        n = pair.velocity.element.n_local
        self.n_loc = n
        nu = data.nu
        self.Me = vector_block(mass_kernel(self.vt))
        self.Ke = vector_block(stiffness_kernel(self.vt))
        self.De = divergence_kernel(self.vt, self.p_phi)
        self.Mpe = np.einsum("cq,qa,qb->cab", self.vt.JxW, self.p_phi, self.p_phi)

        self.dirichlet_facets = pair.mesh.facets_with(*DIRICHLET_MARKERS)
        if params.nitsche and len(self.dirichlet_facets):
            vf = FacetTables.build(pair.velocity, self.dirichlet_facets, nq)
            pf = FacetTables.build(pair.pressure, self.dirichlet_facets, nq)
            self.facet = nitsche_boundary_terms(vf, pf, nu, params)
            self.fvdofs = self.vdofs[self.dirichlet_facets[:, 0]]
            self.fpdofs = self.pdofs[self.dirichlet_facets[:, 0]]
        else:
            self.facet = None

    # constant operators as lists of LocalBlocks
    def mass_blocks(self) -> list[LocalBlock]:
        return [LocalBlock(self.vdofs, self.vdofs, self.Me)]

    def viscous_blocks(self, include_facets: bool = True) -> list[LocalBlock]:
        out = [LocalBlock(self.vdofs, self.vdofs, self.data.nu * self.Ke)]
        if include_facets and self.facet is not None:
            out.append(LocalBlock(self.fvdofs, self.fvdofs, self.facet.N))
        return out

    def gradient_blocks(self, include_facets: bool = True) -> list[LocalBlock]:
        out = [LocalBlock(self.vdofs, self.pdofs, -self.De.transpose(0, 2, 1))]
        if include_facets and self.facet is not None:
            out.append(LocalBlock(self.fvdofs, self.fpdofs, self.facet.Gf))
        return out

    def divergence_blocks(self, include_facets: bool = True) -> list[LocalBlock]:
        return [b.T.scaled(-1.0) for b in self.gradient_blocks(include_facets)]

    def pressure_mass_blocks(self) -> list[LocalBlock]:
        return [LocalBlock(self.pdofs, self.pdofs, self.Mpe)]

    def convection_blocks(self, a: np.ndarray) -> list[LocalBlock]:
        return [LocalBlock(self.vdofs, self.vdofs, convection_jacobian_kernel(self.vt, self._local(a)))]

    def _local(self, v: np.ndarray) -> np.ndarray:
        C = self.vdofs.shape[0]
        return v[self.vdofs].reshape(C, 2, self.n_loc)

    def convection(self, a: np.ndarray, w: np.ndarray) -> np.ndarray:
        r = convection_kernel(self.vt, self._local(a), self._local(w))
        return np.bincount(self.vdofs.ravel(), r.ravel(), minlength=self.J)

    def load(self, fq: np.ndarray) -> np.ndarray:
        return np.bincount(self.vdofs.ravel(), load_kernel(self.vt, fq).ravel(), minlength=self.J)

    def boundary_load(self, gq: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
        """Velocity and pressure right-hand sides from Dirichlet data (Nitsche only)."""
        if self.facet is None or gq is None:
            return np.zeros(self.J), np.zeros(self.M)
        bv = np.bincount(self.fvdofs.ravel(), self.facet.velocity_rhs(gq).ravel(), minlength=self.J)
        bp = np.bincount(self.fpdofs.ravel(), self.facet.pressure_rhs(gq).ravel(), minlength=self.M)
        return bv, bp

    def slot_data(self, t0: float, tau: float, scheme: str) -> SlotData:
        x = self.vt.x
        d = self.data
        t1 = t0 + tau
        if scheme == "gcc13":
            f = np.stack([d.f(x, t0), tau * d.df(x, t0), d.f(x, t1), tau * d.df(x, t1)])
        else:
            f = np.stack([d.f(x, t0), d.f(x, t1)])
        g = None
        if self.facet is not None:
            xf = self.facet.vt.x
            if scheme == "gcc13":
                g = np.stack([d.g(xf, t0), tau * d.dg(xf, t0), d.g(xf, t1), tau * d.dg(xf, t1)])
            else:
                g = np.stack([d.g(xf, t0), d.g(xf, t1)])
        for arr in (f, g):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError("non-finite forcing or boundary data")
        return SlotData(f, g)

    # -- interval residual and Jacobian -------------------------------------

    def _check(self, state: IntervalState):
        if state.v.shape[1] != self.J or state.p.shape[1] != self.M:
            raise ValueError(f"state dimensions {state.v.shape[1]}, {state.p.shape[1]} do not "
                             f"match the spaces ({self.J}, {self.M})")

    def residual(self, state: IntervalState, slots: SlotData | None = None) -> list[np.ndarray]:
        """Block residual ``[q1, q2]`` (linear ansatz) or ``[q1, q2, q3, q4]`` (Hermite)."""
        self._check(state)
        scheme = state.scheme
        tab = time_table(scheme)
        tau = state.tau
        if slots is None:
            slots = self.slot_data(state.t0, tau, scheme)
        A = self.viscous_blocks()
        G = self.gradient_blocks()
        D = self.divergence_blocks()
        M = self.mass_blocks()
        J, Mp = self.J, self.M
        s = tab.s
        end = 2 if scheme == "gcc13" else 1
        vbar = np.tensordot(s, state.v, axes=1)
        pbar = np.tensordot(s, state.p, axes=1)
        fbar = np.tensordot(s, slots.f, axes=1)
        gbar = None if slots.g is None else np.tensordot(s, slots.g, axes=1)
        bv, bp = self.boundary_load(gbar)
        conv = np.zeros(J)
        for j in range(state.n_slots):
            aj = np.tensordot(tab.m[:, j], state.v, axes=1)
            conv += self.convection(aj, state.v[j])
        q1 = (apply_blocks(M, state.v[end] - state.v[0], J)
              + tau * (apply_blocks(A, vbar, J) + apply_blocks(G, pbar, J) - self.load(fbar) - bv)
              + tau * conv)
        q2 = tau * (apply_blocks(D, vbar, Mp) + bp)
        if scheme == "cgp1":
            return [q1, q2]
        v2, v3, p2 = state.v[2], state.v[3], state.p[2]
        bv2, bp2 = self.boundary_load(None if slots.g is None else slots.g[2])
        q3 = (apply_blocks(M, v3, J) / tau + apply_blocks(A, v2, J) + apply_blocks(G, p2, J)
              + self.convection(v2, v2) - self.load(slots.f[2]) - bv2)
        q4 = apply_blocks(D, v2, Mp) + bp2
        return [q1, q2, q3, q4]

    def jacobian(self, state: IntervalState) -> list[tuple[int, int, LocalBlock]]:
        """Local contributions ``(block_row, block_col, LocalBlock)`` of the exact derivative.

        Block columns follow the unknowns ``(v_end, p_end[, v_3, p_3])``.
        """
        self._check(state)
        scheme = state.scheme
        tab = time_table(scheme)
        tau = state.tau
        s = tab.s
        A = self.viscous_blocks()
        G = self.gradient_blocks()
        D = self.divergence_blocks()
        M = self.mass_blocks()
        unknown = (2, 3) if scheme == "gcc13" else (1,)
        out: list[tuple[int, int, LocalBlock]] = []
        for col, k in enumerate(unknown):
            vc, pc = 2 * col, 2 * col + 1
            ak = np.tensordot(tab.m[:, k], state.v, axes=1)
            if col == 0:
                out += [(0, vc, b) for b in M]
            out += [(0, vc, b.scaled(tau * s[k])) for b in A]
            out += [(0, vc, b.scaled(tau)) for b in self.convection_blocks(ak)]
            out += [(0, pc, b.scaled(tau * s[k])) for b in G]
            out += [(1, vc, b.scaled(tau * s[k])) for b in D]
        if scheme == "gcc13":
            v2 = state.v[2]
            out += [(2, 0, b) for b in A]
            out += [(2, 0, b) for b in self.convection_blocks(v2)]
            out += [(2, 1, b) for b in G]
            out += [(2, 2, b.scaled(1.0 / tau)) for b in M]
            out += [(3, 0, b) for b in D]
        return out

    def block_sizes(self, scheme: str) -> list[int]:
        return [self.J, self.M] * (2 if scheme == "gcc13" else 1)

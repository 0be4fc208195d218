"""Q_r Lagrange spaces on bilinear quadrilaterals, Gauss rules, Taylor-Hood pairs."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from numpy.polynomial import legendre
from scipy.spatial import cKDTree

from .mesh import Marker, Mesh, MeshError


class GeometryError(MeshError):
    pass


# reference edge parametrisations, s in [0, 1], matching the CCW vertex order
_EDGE_MAPS = (
    lambda s: np.stack([s, np.zeros_like(s)], -1),
    lambda s: np.stack([np.ones_like(s), s], -1),
    lambda s: np.stack([1.0 - s, np.ones_like(s)], -1),
    lambda s: np.stack([np.zeros_like(s), 1.0 - s], -1),
)


def edge_to_reference(edge: int, s) -> np.ndarray:
    return _EDGE_MAPS[edge](np.asarray(s, dtype=float))


@dataclass(frozen=True)
class GaussRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def gauss_1d(n: int) -> GaussRule:
    """``n``-point Gauss-Legendre rule on [0, 1], exact to degree 2n - 1."""
    x, w = legendre.leggauss(n)
    return GaussRule(0.5 * (x + 1.0), 0.5 * w, 2 * n - 1)


@lru_cache(maxsize=None)
def gauss_square(n: int) -> GaussRule:
    g = gauss_1d(n)
    X, Y = np.meshgrid(g.points, g.points, indexing="xy")
    W = np.outer(g.weights, g.weights)
    return GaussRule(np.column_stack([X.ravel(), Y.ravel()]), W.ravel(), g.degree)


def _lobatto_points(n: int) -> np.ndarray:
    # interior points are roots of P'_{n-1}
    c = np.zeros(n)
    c[-1] = 1.0
    inner = legendre.legroots(legendre.legder(c))
    return 0.5 * (np.concatenate([[-1.0], np.sort(inner), [1.0]]) + 1.0)


class ReferenceElement:
    """Tensor-product Lagrange element of degree ``r`` on [0, 1]^2.

    Local node ``i + (r + 1) * j`` sits at ``(x_i, y_j)``.
    """

    def __init__(self, degree: int):
        if degree < 1:
            raise ValueError(f"degree must be >= 1, got {degree}")
        self.degree = degree
        n = degree + 1
        self.nodes_1d = np.linspace(0.0, 1.0, n) if degree <= 4 else _lobatto_points(n)
        X, Y = np.meshgrid(self.nodes_1d, self.nodes_1d, indexing="xy")
        self.nodes = np.column_stack([X.ravel(), Y.ravel()])
        x = self.nodes_1d
        self._denom = np.array([np.prod([x[i] - x[k] for k in range(n) if k != i]) for i in range(n)])

    @property
    def n_local(self) -> int:
        return (self.degree + 1) ** 2

    def _basis_1d(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = self.nodes_1d
        n = len(x)
        t = np.asarray(t, dtype=float)[:, None]
        diff = t - x[None, :]  # (P, n)
        val = np.empty((t.shape[0], n))
        der = np.zeros((t.shape[0], n))
        for i in range(n):
            others = [k for k in range(n) if k != i]
            val[:, i] = np.prod(diff[:, others], axis=1) / self._denom[i]
            for j in others:
                rest = [k for k in others if k != j]
                der[:, i] += np.prod(diff[:, rest], axis=1) if rest else 1.0
            der[:, i] /= self._denom[i]
        return val, der

    def tabulate(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Shape values ``(P, n_local)`` and reference gradients ``(P, n_local, 2)``."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        vx, dx = self._basis_1d(pts[:, 0])
        vy, dy = self._basis_1d(pts[:, 1])
        val = (vy[:, :, None] * vx[:, None, :]).reshape(len(pts), -1)
        gx = (vy[:, :, None] * dx[:, None, :]).reshape(len(pts), -1)
        gy = (dy[:, :, None] * vx[:, None, :]).reshape(len(pts), -1)
        return val, np.stack([gx, gy], axis=-1)

    @cached_property
    def edge_local_dofs(self) -> tuple[np.ndarray, ...]:
        """Local node indices on each reference edge, ordered along the edge direction."""
        n = self.degree + 1
        idx = np.arange(n * n).reshape(n, n)  # [j, i]
        return (idx[0, :], idx[:, -1], idx[-1, ::-1], idx[::-1, 0])


_BILINEAR = ReferenceElement(1)


def map_points(mesh: Mesh, cells, ref_points) -> np.ndarray:
    """Physical coordinates of reference points; ``(len(cells), P, 2)``."""
    val, _ = _BILINEAR.tabulate(ref_points)
    verts = mesh.nodes[mesh.cells[np.atleast_1d(cells)]][:, [0, 1, 3, 2]]  # lexicographic order
    return np.einsum("pa,cad->cpd", val, verts)


def cell_jacobians(mesh: Mesh, cells, ref_points) -> np.ndarray:
    """Bilinear map Jacobians ``J[c, p, i, j] = d x_i / d xi_j``."""
    _, grad = _BILINEAR.tabulate(ref_points)
    verts = mesh.nodes[mesh.cells[np.atleast_1d(cells)]][:, [0, 1, 3, 2]]
    return np.einsum("paj,cai->cpij", grad, verts)


def _inv_det(J: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    det = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if np.any(det <= 0.0):
        raise GeometryError("singular or inverted cell Jacobian")
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1] / det
    inv[..., 1, 1] = J[..., 0, 0] / det
    inv[..., 0, 1] = -J[..., 0, 1] / det
    inv[..., 1, 0] = -J[..., 1, 0] / det
    return inv, det


class FiniteElementSpace:
    """Continuous scalar Q_r space; ``dof_map[c]`` lists global indices in local order."""

    def __init__(self, mesh: Mesh, degree: int):
        self.mesh = mesh
        self.degree = degree
        self.element = ReferenceElement(degree)
        coords = map_points(mesh, np.arange(mesh.n_cells), self.element.nodes)
        flat = coords.reshape(-1, 2)
        tol = 1e-8 * float(np.min(mesh.cell_diameters)) / max(degree, 1)
        tree = cKDTree(flat)
        # canonical representative = lowest flat index within tol
        groups = tree.query_ball_point(flat, tol)
        rep = np.fromiter((min(g) for g in groups), dtype=np.int64, count=len(flat))
        uniq, inv = np.unique(rep, return_inverse=True)
        self.dof_map = inv.reshape(mesh.n_cells, -1)
        self.dof_coords = flat[uniq]
        self.dim = len(uniq)

    def boundary_dofs(self, *markers: Marker) -> np.ndarray:
        facets = self.mesh.facets_with(*markers) if markers else self.mesh.facets
        loc = self.element.edge_local_dofs
        out = [self.dof_map[c, loc[e]] for c, e, _ in facets.tolist()]
        return np.unique(np.concatenate(out)) if out else np.zeros(0, dtype=np.int64)

    def interpolate(self, func) -> np.ndarray:
        """Nodal interpolant; ``func`` maps ``(N, 2)`` points to ``(N,)`` or ``(N, k)``."""
        return np.asarray(func(self.dof_coords), dtype=float)

    def tabulate_cells(self, rule: GaussRule) -> "CellTables":
        return CellTables.build(self, rule)


@dataclass
class CellTables:
    """Basis values, physical gradients and weights at a cell rule, all cells at once."""

    phi: np.ndarray       # (Q, n)
    grad: np.ndarray      # (C, Q, n, 2)
    JxW: np.ndarray       # (C, Q)
    x: np.ndarray         # (C, Q, 2)

    @classmethod
    def build(cls, space: FiniteElementSpace, rule: GaussRule) -> "CellTables":
        cells = np.arange(space.mesh.n_cells)
        phi, dref = space.element.tabulate(rule.points)
        J = cell_jacobians(space.mesh, cells, rule.points)
        inv, det = _inv_det(J)
        grad = np.einsum("qnj,cqji->cqni", dref, inv)
        return cls(phi, grad, det * rule.weights[None, :], map_points(space.mesh, cells, rule.points))


def build_space(mesh: Mesh, r: int) -> FiniteElementSpace:
    return FiniteElementSpace(mesh, r)


class TaylorHoodPair:
    """Q_r velocity (two components, blocked x then y) with Q_{r-1} pressure."""

    def __init__(self, mesh: Mesh, r: int):
        if r < 2:
            raise ValueError(f"Taylor-Hood requires r >= 2, got {r}")
        self.mesh = mesh
        self.r = r
        self.velocity = FiniteElementSpace(mesh, r)
        self.pressure = FiniteElementSpace(mesh, r - 1)

    @property
    def nV(self) -> int:
        return self.velocity.dim

    @property
    def J(self) -> int:
        return 2 * self.velocity.dim

    @property
    def M(self) -> int:
        return self.pressure.dim

    @property
    def block_size(self) -> int:
        return self.J + self.M

    @cached_property
    def vector_dof_map(self) -> np.ndarray:
        d = self.velocity.dof_map
        return np.hstack([d, d + self.nV])

    def vector_boundary_dofs(self, *markers: Marker) -> np.ndarray:
        b = self.velocity.boundary_dofs(*markers)
        return np.concatenate([b, b + self.nV])

    def interpolate_velocity(self, func) -> np.ndarray:
        vals = self.velocity.interpolate(func)
        return np.concatenate([vals[:, 0], vals[:, 1]])


def evaluate(space: FiniteElementSpace, coeffs, cell: int, ref_point, derivative: str = "value"):
    """Field value (scalar) or physical gradient (2-vector) at one reference point of ``cell``."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[0] != space.dim:
        raise ValueError(f"coefficient vector has length {coeffs.shape[0]}, space dim is {space.dim}")
    pt = np.atleast_2d(ref_point)
    phi, dref = space.element.tabulate(pt)
    local = coeffs[space.dof_map[cell]]
    if derivative == "value":
        return float(phi[0] @ local)
    if derivative == "gradient":
        inv, _ = _inv_det(cell_jacobians(space.mesh, [cell], pt))
        g = dref[0] @ inv[0, 0]
        return local @ g
    raise ValueError(f"derivative must be 'value' or 'gradient', got {derivative!r}")


@dataclass
class FacetQuadrature:
    points: np.ndarray      # (Qf, 2) physical
    normals: np.ndarray     # (Qf, 2) unit outward
    weights: np.ndarray     # (Qf,) including segment length
    ref_points: np.ndarray  # (Qf, 2) in the owning cell
    cell: int


def facet_quadrature(mesh: Mesh, facet, n_points: int) -> FacetQuadrature:
    """Gauss points on boundary facet ``(cell, edge[, marker])``."""
    c, e = int(facet[0]), int(facet[1])
    bnd = mesh.boundary_edges()
    if not np.any((bnd[:, 0] == c) & (bnd[:, 1] == e)):
        raise ValueError(f"({c}, {e}) is not a boundary facet")
    g = gauss_1d(n_points)
    ref = edge_to_reference(e, g.points)
    a, b = mesh.facet_endpoints(np.array([[c, e, 0]]))
    length = float(np.linalg.norm(b[0] - a[0]))
    pts = map_points(mesh, [c], ref)[0]
    nrm = np.repeat(mesh.facet_normals(np.array([[c, e, 0]])), n_points, axis=0)
    return FacetQuadrature(pts, nrm, g.weights * length, ref, c)


@dataclass
class FacetTables:
    """Per-facet tables for a batch of straight boundary facets."""

    facets: np.ndarray    # (F, 3)
    phi: np.ndarray       # (F, Qf, n)
    grad: np.ndarray      # (F, Qf, n, 2)
    w: np.ndarray         # (F, Qf)
    x: np.ndarray         # (F, Qf, 2)
    normal: np.ndarray    # (F, 2)
    h: np.ndarray         # (F,) diameter of owning cell

    @classmethod
    def build(cls, space: FiniteElementSpace, facets: np.ndarray, n_points: int) -> "FacetTables":
        mesh = space.mesh
        facets = np.asarray(facets, dtype=np.int64).reshape(-1, 3)
        g = gauss_1d(n_points)
        F, Q, n = len(facets), n_points, space.element.n_local
        phi = np.empty((F, Q, n))
        grad = np.empty((F, Q, n, 2))
        x = np.empty((F, Q, 2))
        for e in range(4):
            sel = np.nonzero(facets[:, 1] == e)[0]
            if not len(sel):
                continue
            ref = edge_to_reference(e, g.points)
            val, dref = space.element.tabulate(ref)
            inv, _ = _inv_det(cell_jacobians(mesh, facets[sel, 0], ref))
            phi[sel] = val
            grad[sel] = np.einsum("qnj,cqji->cqni", dref, inv)
            x[sel] = map_points(mesh, facets[sel, 0], ref)
        w = mesh.facet_lengths(facets)[:, None] * g.weights[None, :] if F else np.zeros((0, Q))
        normal = mesh.facet_normals(facets) if F else np.zeros((0, 2))
        return cls(facets, phi, grad, w, x, normal, mesh.cell_diameters[facets[:, 0]])


def locate_points(mesh: Mesh, points, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Owning cell (-1 if outside) and reference coordinates of physical points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    centers = mesh.nodes[mesh.cells].mean(axis=1)
    tree = cKDTree(centers)
    k = min(12, mesh.n_cells)
    _, cand = tree.query(pts, k=k)
    cand = np.atleast_2d(cand).reshape(len(pts), k)
    owner = np.full(len(pts), -1, dtype=np.int64)
    ref = np.full((len(pts), 2), np.nan)
    for p, x in enumerate(pts):
        for c in cand[p]:
            xi = _invert_bilinear(mesh, c, x)
            if xi is not None and np.all(xi >= -tol) and np.all(xi <= 1 + tol):
                owner[p] = c
                ref[p] = np.clip(xi, 0.0, 1.0)
                break
    return owner, ref


def _invert_bilinear(mesh: Mesh, cell: int, x: np.ndarray):
    xi = np.array([0.5, 0.5])
    for _ in range(30):
        X = map_points(mesh, [cell], xi[None])[0, 0]
        Jm = cell_jacobians(mesh, [cell], xi[None])[0, 0]
        try:
            step = np.linalg.solve(Jm, x - X)
        except np.linalg.LinAlgError:
            return None
        xi = xi + step
        if np.linalg.norm(step) < 1e-14:
            break
        if np.any(np.abs(xi) > 10):
            return None
    return xi


class PointEvaluator:
    """Evaluate fields of a space at fixed physical points (precomputed tabulation)."""

    def __init__(self, space: FiniteElementSpace, points):
        self.space = space
        self.cells, ref = locate_points(space.mesh, points)
        if np.any(self.cells < 0):
            raise ValueError("some points lie outside the mesh")
        n = space.element.n_local
        self.phi = np.empty((len(self.cells), n))
        self.grad = np.empty((len(self.cells), n, 2))
        for i, (c, xi) in enumerate(zip(self.cells, ref)):
            val, dref = space.element.tabulate(xi[None])
            inv, _ = _inv_det(cell_jacobians(space.mesh, [c], xi[None]))
            self.phi[i] = val[0]
            self.grad[i] = dref[0] @ inv[0, 0]
        self.dofs = space.dof_map[self.cells]

    def values(self, coeffs) -> np.ndarray:
        return np.einsum("pn,pn->p", self.phi, np.asarray(coeffs)[self.dofs])

    def gradients(self, coeffs) -> np.ndarray:
        return np.einsum("pnd,pn->pd", self.grad, np.asarray(coeffs)[self.dofs])

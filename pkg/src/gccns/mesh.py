"""Quadrilateral meshes with boundary markers.

Cells store four node indices counter-clockwise; local edge ``e`` joins local
vertices ``e`` and ``(e + 1) % 4``. Boundary facets are ``(cell, edge, marker)``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree


class Marker(enum.IntEnum):
    INFLOW = 1
    WALL = 2
    OUTFLOW = 3

    @classmethod
    def parse(cls, name: str) -> "Marker":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown boundary marker {name!r}") from None


DIRICHLET_MARKERS = (Marker.INFLOW, Marker.WALL)


class MeshError(ValueError):
    """Invalid geometry or connectivity."""


class MeshParseError(MeshError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


@dataclass(frozen=True)
class ChannelGeometry:
    length: float = 2.2
    height: float = 0.41
    center: tuple[float, float] = (0.2, 0.2)
    radius: float = 0.05

    def wall_clearance(self) -> float:
        cx, cy = self.center
        return min(cx, cy, self.height - cy, self.length - cx)

    def validate(self) -> None:
        if self.length <= 0 or self.height <= 0 or self.radius <= 0:
            raise MeshError("channel dimensions and radius must be positive")
        if self.wall_clearance() <= self.radius:
            raise MeshError("obstacle touches or crosses the channel walls")

    def inside_obstacle(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        return np.hypot(pts[..., 0] - self.center[0], pts[..., 1] - self.center[1]) < self.radius

    def project_to_circle(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        c = np.asarray(self.center)
        d = pts - c
        return c + self.radius * d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class Mesh:
    nodes: np.ndarray
    cells: np.ndarray
    facets: np.ndarray  # (F, 3): cell, local edge, marker
    geometry: ChannelGeometry | None = field(default=None, compare=False)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=float).reshape(-1, 2)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64).reshape(-1, 4)
        self.facets = np.ascontiguousarray(self.facets, dtype=np.int64).reshape(-1, 3)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @cached_property
    def cell_diameters(self) -> np.ndarray:
        v = self.nodes[self.cells]
        d = [np.linalg.norm(v[:, i] - v[:, j], axis=1) for i in range(4) for j in range(i + 1, 4)]
        return np.max(d, axis=0)

    @property
    def h(self) -> float:
        return float(self.cell_diameters.max())

    def facet_endpoints(self, facets=None) -> tuple[np.ndarray, np.ndarray]:
        f = self.facets if facets is None else np.atleast_2d(facets)
        a = self.nodes[self.cells[f[:, 0], f[:, 1]]]
        b = self.nodes[self.cells[f[:, 0], (f[:, 1] + 1) % 4]]
        return a, b

    def facet_normals(self, facets=None) -> np.ndarray:
        a, b = self.facet_endpoints(facets)
        t = b - a
        n = np.stack([t[:, 1], -t[:, 0]], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def facet_lengths(self, facets=None) -> np.ndarray:
        a, b = self.facet_endpoints(facets)
        return np.linalg.norm(b - a, axis=1)

    def facets_with(self, *markers: Marker) -> np.ndarray:
        mask = np.isin(self.facets[:, 2], [int(m) for m in markers])
        return self.facets[mask]

    def has_marker(self, marker: Marker) -> bool:
        return bool(np.any(self.facets[:, 2] == int(marker)))

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges (sorted node pairs) and, per (cell, edge), its edge id."""
        a = self.cells
        b = np.roll(self.cells, -1, axis=1)
        pairs = np.sort(np.stack([a, b], axis=-1).reshape(-1, 2), axis=1)
        uniq, inv = np.unique(pairs, axis=0, return_inverse=True)
        return uniq, inv.reshape(-1, 4)

    def boundary_edges(self) -> np.ndarray:
        """(cell, local edge) pairs of edges owned by exactly one cell."""
        _, inv = self.edges()
        counts = np.bincount(inv.ravel())
        c, e = np.nonzero(counts[inv] == 1)
        return np.stack([c, e], axis=1)

    def vertex_jacobians(self) -> np.ndarray:
        """Bilinear-map Jacobian determinant at each cell vertex, shape (C, 4)."""
        v = self.nodes[self.cells]
        nxt = np.roll(v, -1, axis=1) - v
        prv = np.roll(v, 1, axis=1) - v
        return nxt[..., 0] * prv[..., 1] - nxt[..., 1] * prv[..., 0]

    def validate(self) -> None:
        if len(self.cells) and (self.cells.min() < 0 or self.cells.max() >= self.n_nodes):
            raise MeshError("cell references a node index out of range")
        if np.any(self.vertex_jacobians() <= 0.0):
            raise MeshError("cell with non-positive Jacobian at a vertex")
        bnd = {tuple(x) for x in self.boundary_edges().tolist()}
        seen: set[tuple[int, int]] = set()
        for c, e, m in self.facets.tolist():
            key = (c, e)
            if key not in bnd:
                raise MeshError(f"facet ({c}, {e}) is not a boundary edge")
            if key in seen:
                raise MeshError(f"boundary edge ({c}, {e}) marked more than once")
            if m not in (1, 2, 3):
                raise MeshError(f"invalid marker {m}")
            seen.add(key)
        missing = bnd - seen
        if missing:
            raise MeshError(f"{len(missing)} boundary edges carry no marker, e.g. {sorted(missing)[0]}")

    def canonical(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ordering-independent representation used for equality checks."""
        order = np.lexsort((self.nodes[:, 1], self.nodes[:, 0]))
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        cells = rank[self.cells]
        shift = np.argmin(cells, axis=1)
        idx = (shift[:, None] + np.arange(4)) % 4
        rolled = np.take_along_axis(cells, idx, axis=1)
        corder = np.lexsort(rolled.T[::-1])
        a, b = self.facet_endpoints()
        ra = rank[self.cells[self.facets[:, 0], self.facets[:, 1]]]
        rb = rank[self.cells[self.facets[:, 0], (self.facets[:, 1] + 1) % 4]]
        fac = np.stack([np.minimum(ra, rb), np.maximum(ra, rb), self.facets[:, 2]], axis=1)
        forder = np.lexsort(fac.T[::-1])
        return self.nodes[order], rolled[corder], fac[forder]

    def same_as(self, other: "Mesh", tol: float = 1e-12) -> bool:
        n1, c1, f1 = self.canonical()
        n2, c2, f2 = other.canonical()
        return (n1.shape == n2.shape and np.allclose(n1, n2, rtol=0, atol=tol)
                and np.array_equal(c1, c2) and np.array_equal(f1, f2))


def _merge_nodes(points: np.ndarray, cells: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray]:
    tree = cKDTree(points)
    parent = np.arange(len(points))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in tree.query_pairs(tol):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    roots = np.array([find(i) for i in range(len(points))])
    uniq, inv = np.unique(roots, return_inverse=True)
    return points[uniq], inv[cells]


def _orient_ccw(nodes: np.ndarray, cells: np.ndarray) -> np.ndarray:
    v = nodes[cells]
    x, y = v[..., 0], v[..., 1]
    area2 = np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
    cells = cells.copy()
    flip = area2 < 0
    cells[flip] = cells[flip][:, ::-1]
    return cells


def _mark_boundary(nodes, cells, classify: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    tmp = Mesh(nodes, cells, np.zeros((0, 3), dtype=np.int64))
    be = tmp.boundary_edges()
    a, b = tmp.facet_endpoints(np.column_stack([be, np.zeros(len(be), dtype=np.int64)]))
    markers = classify(0.5 * (a + b))
    return np.column_stack([be, markers]).astype(np.int64)


def generate_unit_square(n: int) -> Mesh:
    """``n`` x ``n`` square cells on (0, 1)^2, every side a wall."""
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError(f"cells per side must be a positive integer, got {n!r}")
    x = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(x, x)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n), np.arange(n))
    i, j = i.ravel(), j.ravel()
    n0 = j * (n + 1) + i
    cells = np.column_stack([n0, n0 + 1, n0 + n + 2, n0 + n + 1])
    facets = _mark_boundary(nodes, cells, lambda mid: np.full(len(mid), int(Marker.WALL)))
    mesh = Mesh(nodes, cells, facets)
    mesh.validate()
    return mesh


def refine_uniform(mesh: Mesh, snap: Callable[[np.ndarray], np.ndarray] | None = None) -> Mesh:
    """Split each cell into four; ``snap`` may move new boundary midpoints (e.g. onto a circle)."""
    edges, cell_edge = mesh.edges()
    ne, nn = len(edges), mesh.n_nodes
    mids = 0.5 * (mesh.nodes[edges[:, 0]] + mesh.nodes[edges[:, 1]])
    geom = mesh.geometry
    if snap is None and geom is not None:
        snap = _circle_snapper(geom)
    if snap is not None and len(mesh.facets):
        bedge = cell_edge[mesh.facets[:, 0], mesh.facets[:, 1]]
        wall = mesh.facets[:, 2] == int(Marker.WALL)
        ids = bedge[wall]
        if len(ids):
            mids[ids] = snap(mids[ids])
    centers = mesh.nodes[mesh.cells].mean(axis=1)
    nodes = np.vstack([mesh.nodes, mids, centers])
    v = mesh.cells
    e = nn + cell_edge
    c = nn + ne + np.arange(mesh.n_cells)
    children = np.stack([
        np.column_stack([v[:, 0], e[:, 0], c, e[:, 3]]),
        np.column_stack([e[:, 0], v[:, 1], e[:, 1], c]),
        np.column_stack([c, e[:, 1], v[:, 2], e[:, 2]]),
        np.column_stack([e[:, 3], c, e[:, 2], v[:, 3]]),
    ], axis=1)
    cells = children.reshape(-1, 4)
    # parent edge -> (child, child edge) pairs
    split = {0: ((0, 0), (1, 0)), 1: ((1, 1), (2, 1)), 2: ((2, 2), (3, 2)), 3: ((3, 3), (0, 3))}
    facets = []
    for pc, pe, m in mesh.facets.tolist():
        for ch, ce in split[pe]:
            facets.append((4 * pc + ch, ce, m))
    out = Mesh(nodes, cells, np.array(facets, dtype=np.int64).reshape(-1, 3), geometry=geom)
    out.validate()
    return out


def _circle_snapper(geom: ChannelGeometry):
    def snap(pts):
        pts = np.asarray(pts, dtype=float)
        near = np.abs(np.hypot(pts[:, 0] - geom.center[0], pts[:, 1] - geom.center[1]) - geom.radius) \
            < 0.5 * geom.radius
        out = pts.copy()
        if np.any(near):
            out[near] = geom.project_to_circle(pts[near])
        return out
    return snap


def _graded(x0: float, x1: float, n: int, h_first: float | None = None) -> np.ndarray:
    """``n`` cells on [x0, x1]; geometric growth from ``h_first`` when it is below the mean size."""
    length = x1 - x0
    if h_first is None or h_first * n >= length * (1 - 1e-12):
        return np.linspace(x0, x1, n + 1)
    lo, hi = 1.0, 2.0
    while h_first * (hi**n - 1) / (hi - 1) < length:
        hi *= 2
    for _ in range(200):
        q = 0.5 * (lo + hi)
        if h_first * (q**n - 1) / (q - 1) < length:
            lo = q
        else:
            hi = q
    q = 0.5 * (lo + hi)
    steps = h_first * q ** np.arange(n)
    pts = x0 + np.concatenate([[0.0], np.cumsum(steps)])
    pts *= 1.0
    pts = x0 + (pts - x0) * (length / (pts[-1] - x0))
    pts[-1] = x1
    return pts


def generate_channel_cylinder(geom: ChannelGeometry = ChannelGeometry(), resolution: int = 0,
                              downstream_growth: float = 1.0) -> Mesh:
    """Block-structured mesh of a channel with a circular obstacle.

    An O-grid ring of quads maps the circle onto a square box; the rest of the
    channel is a tensor grid aligned with the box. ``resolution`` doubles the
    cell counts per level. ``downstream_growth`` > 1 coarsens the wake block
    geometrically toward the outflow.
    """
    geom.validate()
    if resolution < 0:
        raise ValueError("resolution must be >= 0")
    cx, cy = geom.center
    r = geom.radius
    a = min(2.0 * r, 0.5 * (r + geom.wall_clearance()))
    nc = 4 * 2**resolution
    nr = 2 * 2**resolution
    h = 2 * a / nc

    def count(length):
        return max(1, int(round(length / h)))

    xb = [0.0, cx - a, cx + a, geom.length]
    yb = [0.0, cy - a, cy + a, geom.height]
    nx = [count(xb[1] - xb[0]), nc, count((xb[3] - xb[2]) / downstream_growth)]
    ny = [count(yb[1] - yb[0]), nc, count(yb[3] - yb[2])]
    xs = [np.linspace(xb[0], xb[1], nx[0] + 1), np.linspace(xb[1], xb[2], nx[1] + 1),
          _graded(xb[2], xb[3], nx[2], h if downstream_growth > 1 else None)]
    ys = [np.linspace(yb[k], yb[k + 1], ny[k] + 1) for k in range(3)]

    pts_all, cells_all = [], []
    offset = 0

    def add_block(P: np.ndarray):
        nonlocal offset
        m, n = P.shape[0] - 1, P.shape[1] - 1
        pts_all.append(P.reshape(-1, 2))
        i, j = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        i, j = i.ravel(), j.ravel()
        idx = lambda a_, b_: offset + a_ * (n + 1) + b_
        cells_all.append(np.column_stack([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]))
        offset += (m + 1) * (n + 1)

    for bi in range(3):
        for bj in range(3):
            if bi == 1 and bj == 1:
                continue
            X, Y = np.meshgrid(xs[bi], ys[bj], indexing="ij")
            add_block(np.stack([X, Y], axis=-1))

    corners = np.array([[cx - a, cy - a], [cx + a, cy - a], [cx + a, cy + a], [cx - a, cy + a]])
    s = np.linspace(0.0, 1.0, nc + 1)
    k = np.linspace(0.0, 1.0, nr + 1)
    for side in range(4):
        p0, p1 = corners[side], corners[(side + 1) % 4]
        box = p0 + s[:, None] * (p1 - p0)
        circ = geom.project_to_circle(box)
        P = circ[:, None, :] + k[None, :, None] * (box - circ)[:, None, :]
        P[:, -1, :] = box
        add_block(P)

    pts = np.vstack(pts_all)
    cells = np.vstack(cells_all)
    nodes, cells = _merge_nodes(pts, cells, tol=1e-9 * max(geom.length, geom.height))
    # snap ring nodes back onto the circle exactly
    on_circle = np.abs(np.hypot(nodes[:, 0] - cx, nodes[:, 1] - cy) - r) < 1e-9 * r
    nodes[on_circle] = geom.project_to_circle(nodes[on_circle])
    cells = _orient_ccw(nodes, cells)
    tol = 1e-12 * geom.length

    def classify(mid):
        m = np.full(len(mid), int(Marker.WALL))
        m[np.abs(mid[:, 0]) <= tol] = int(Marker.INFLOW)
        m[np.abs(mid[:, 0] - geom.length) <= tol] = int(Marker.OUTFLOW)
        return m

    facets = _mark_boundary(nodes, cells, classify)
    mesh = Mesh(nodes, cells, facets, geometry=geom)
    mesh.validate()
    return mesh


def circle_facets(mesh: Mesh) -> np.ndarray:
    """Wall facets lying on the obstacle circle."""
    geom = mesh.geometry
    if geom is None:
        return np.zeros((0, 3), dtype=np.int64)
    walls = mesh.facets_with(Marker.WALL)
    a, b = mesh.facet_endpoints(walls)
    mid = 0.5 * (a + b)
    d = np.hypot(mid[:, 0] - geom.center[0], mid[:, 1] - geom.center[1])
    return walls[d < 1.5 * geom.radius]


# -- text format ------------------------------------------------------------

def write_mesh(mesh: Mesh, path) -> None:
    lines = ["quadmesh 1", f"nodes {mesh.n_nodes}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.nodes.tolist()]
    lines.append(f"cells {mesh.n_cells}")
    lines += [" ".join(str(i) for i in c) for c in mesh.cells.tolist()]
    lines.append(f"facets {len(mesh.facets)}")
    lines += [f"{c} {e} {Marker(m).name.lower()}" for c, e, m in mesh.facets.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path) -> Mesh:
    raw = Path(path).read_text().splitlines()
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw) if ln.strip() and not ln.lstrip().startswith("#")]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 0
            raise MeshParseError(last + 1, "unexpected end of file")
        item = lines[pos]
        pos += 1
        return item

    lineno, text = take()
    if text.split() != ["quadmesh", "1"]:
        raise MeshParseError(lineno, f"expected header 'quadmesh 1', got {text!r}")

    def section(name):
        lineno, text = take()
        parts = text.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshParseError(lineno, f"expected '{name} <count>'")
        try:
            n = int(parts[1])
        except ValueError:
            raise MeshParseError(lineno, f"bad count {parts[1]!r}") from None
        if n < 0:
            raise MeshParseError(lineno, "negative count")
        return n

    n_nodes = section("nodes")
    nodes = np.empty((n_nodes, 2))
    for k in range(n_nodes):
        lineno, text = take()
        parts = text.split()
        try:
            if len(parts) != 2:
                raise ValueError
            nodes[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshParseError(lineno, "expected two coordinates") from None
    n_cells = section("cells")
    cells = np.empty((n_cells, 4), dtype=np.int64)
    for k in range(n_cells):
        lineno, text = take()
        parts = text.split()
        try:
            if len(parts) != 4:
                raise ValueError
            idx = [int(p) for p in parts]
        except ValueError:
            raise MeshParseError(lineno, "expected four node indices") from None
        if min(idx) < 0 or max(idx) >= n_nodes:
            raise MeshParseError(lineno, f"node index out of range (have {n_nodes} nodes)")
        cells[k] = idx
    n_facets = section("facets")
    facets = np.empty((n_facets, 3), dtype=np.int64)
    for k in range(n_facets):
        lineno, text = take()
        parts = text.split()
        try:
            if len(parts) != 3:
                raise ValueError("expected 'cell edge marker'")
            c, e = int(parts[0]), int(parts[1])
            m = Marker.parse(parts[2])
        except ValueError as err:
            raise MeshParseError(lineno, str(err)) from None
        if not (0 <= c < n_cells) or not (0 <= e < 4):
            raise MeshParseError(lineno, "facet cell or edge index out of range")
        facets[k] = (c, e, int(m))
    if pos != len(lines):
        raise MeshParseError(lines[pos][0], "trailing content after facets section")
    mesh = Mesh(nodes, cells, facets)
    mesh.validate()
    return mesh

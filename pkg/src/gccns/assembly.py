"""Global sparse assembly of the block Newton system and Dirichlet condensation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .fem import TaylorHoodPair
from .forms import IntervalState, LocalBlock, NavierStokesForms, ProblemData, SlotData
from .mesh import DIRICHLET_MARKERS


@dataclass
class BlockSystem:
    """``S dx = d`` with ``d = -q``; blocks ordered ``(v_end, p_end[, v_3, p_3])``."""

    S: sp.csr_matrix
    d: np.ndarray
    block_sizes: tuple[int, ...]
    scheme: str
    tau: float

    @property
    def block_offsets(self) -> tuple[int, ...]:
        return tuple(int(x) for x in np.concatenate([[0], np.cumsum(self.block_sizes)]))

    @property
    def n(self) -> int:
        return int(sum(self.block_sizes))

    def block_slice(self, i: int) -> slice:
        off = self.block_offsets
        return slice(off[i], off[i + 1])

    def block(self, i: int, j: int) -> sp.csr_matrix:
        return self.S[self.block_slice(i), :][:, self.block_slice(j)]

    def with_matrix(self, S, d=None) -> "BlockSystem":
        return BlockSystem(sp.csr_matrix(S), self.d if d is None else d, self.block_sizes,
                           self.scheme, self.tau)


@dataclass
class _Pattern:
    signature: tuple
    inverse: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    shape: tuple[int, int]
    # keeps the index arrays alive so their ids in the signature stay unique
    refs: list = field(default_factory=list)


def color_cells(dof_map: np.ndarray) -> np.ndarray:
    """Greedy colouring so that no two cells of one colour share a DoF."""
    n_cells = dof_map.shape[0]
    dof_to_cells: dict[int, list[int]] = {}
    for c, dofs in enumerate(dof_map.tolist()):
        for d in dofs:
            dof_to_cells.setdefault(d, []).append(c)
    colors = np.full(n_cells, -1, dtype=np.int64)
    for c, dofs in enumerate(dof_map.tolist()):
        taken = {colors[o] for d in dofs for o in dof_to_cells[d] if colors[o] >= 0}
        k = 0
        while k in taken:
            k += 1
        colors[c] = k
    return colors


class SparseAssembler:
    """Turns ``(block_row, block_col, LocalBlock)`` contributions into CSR.

    The pattern (and the scatter map into it) is computed on first use and
    reused while the contribution structure stays the same. Values are
    accumulated with ``np.bincount`` in a fixed order, so repeated assemblies
    of the same input are bit-identical.
    """

    def __init__(self, block_sizes):
        self.block_sizes = tuple(int(b) for b in block_sizes)
        self.offsets = np.concatenate([[0], np.cumsum(self.block_sizes)])
        self.n = int(self.offsets[-1])
        self._patterns: dict[tuple, _Pattern] = {}

    @staticmethod
    def _signature(contribs) -> tuple:
        return tuple((bi, bj, id(b.rows), id(b.cols), b.vals.shape) for bi, bj, b in contribs)

    def _build_pattern(self, contribs, sig) -> _Pattern:
        keys = []
        for bi, bj, b in contribs:
            E, a, c = b.vals.shape
            r = np.broadcast_to(self.offsets[bi] + b.rows[:, :, None], (E, a, c))
            q = np.broadcast_to(self.offsets[bj] + b.cols[:, None, :], (E, a, c))
            keys.append((r.astype(np.int64) * self.n + q).ravel())
        keys = np.concatenate(keys) if keys else np.zeros(0, dtype=np.int64)
        uniq, inv = np.unique(keys, return_inverse=True)
        rows, cols = np.divmod(uniq, self.n)
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=self.n))])
        refs = [a for _, _, b in contribs for a in (b.rows, b.cols)]
        return _Pattern(sig, inv, indptr, cols, (self.n, self.n), refs)

    def matrix(self, contribs: list[tuple[int, int, LocalBlock]]) -> sp.csr_matrix:
        sig = self._signature(contribs)
        pat = self._patterns.get(sig)
        if pat is None:
            pat = self._patterns[sig] = self._build_pattern(contribs, sig)
        vals = np.concatenate([b.vals.ravel() for _, _, b in contribs]) if contribs else np.zeros(0)
        data = np.bincount(pat.inverse, vals, minlength=len(pat.indices))
        return sp.csr_matrix((data, pat.indices.copy(), pat.indptr.copy()), shape=pat.shape)


class Assembler:
    """Assembles the block system of one time slab from the forms module."""

    def __init__(self, forms: NavierStokesForms, scheme: str):
        self.forms = forms
        self.scheme = scheme
        self.block_sizes = tuple(forms.block_sizes(scheme))
        self.sparse = SparseAssembler(self.block_sizes)

    def assemble(self, state: IntervalState, slots: SlotData | None = None) -> BlockSystem:
        if state.scheme != self.scheme:
            raise ValueError(f"state has {state.n_slots} slots, assembler is for {self.scheme}")
        q = np.concatenate(self.forms.residual(state, slots))
        S = self.sparse.matrix(self.forms.jacobian(state))
        if S.shape[0] != q.shape[0]:
            raise RuntimeError("residual and matrix dimensions disagree")
        return BlockSystem(S, -q, self.block_sizes, self.scheme, state.tau)

    def operator(self, blocks: list[LocalBlock], rows: int, cols: int) -> sp.csr_matrix:
        """Assemble a standalone operator (e.g. the pressure mass matrix)."""
        out = sp.csr_matrix((rows, cols))
        for b in blocks:
            E, a, c = b.vals.shape
            r = np.broadcast_to(b.rows[:, :, None], (E, a, c)).ravel()
            k = np.broadcast_to(b.cols[:, None, :], (E, a, c)).ravel()
            out = out + sp.coo_matrix((b.vals.ravel(), (r, k)), shape=(rows, cols)).tocsr()
        out.sum_duplicates()
        return out


def assemble(forms: NavierStokesForms, state: IntervalState) -> BlockSystem:
    return Assembler(forms, state.scheme).assemble(state)


@dataclass
class DirichletConstraints:
    """Constrained unknown indices (global system numbering) and their prescribed values."""

    indices: np.ndarray
    values: np.ndarray = field(default=None)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).ravel()
        if self.values is None:
            self.values = np.zeros(len(self.indices))
        self.values = np.asarray(self.values, dtype=float).ravel()
        if len(self.values) != len(self.indices):
            raise ValueError("constraint indices and values differ in length")

    def __add__(self, other: "DirichletConstraints") -> "DirichletConstraints":
        return DirichletConstraints(np.concatenate([self.indices, other.indices]),
                                    np.concatenate([self.values, other.values]))

    def apply_to(self, x: np.ndarray) -> np.ndarray:
        x = x.copy()
        x[self.indices] = self.values
        return x


def strong_dirichlet_constraints(pair: TaylorHoodPair, data: ProblemData, t1: float, tau: float,
                                 scheme: str) -> DirichletConstraints:
    """Nodal values of g (and tau * dg/dt) at t1 on Dirichlet DoFs of the unknown slots."""
    b = pair.velocity.boundary_dofs(*DIRICHLET_MARKERS)
    x = pair.velocity.dof_coords[b]
    g = np.asarray(data.g(x, t1))
    idx = [b, b + pair.nV]
    vals = [g[:, 0], g[:, 1]]
    if scheme == "gcc13":
        dg = tau * np.asarray(data.dg(x, t1))
        off = pair.J + pair.M
        idx += [off + b, off + b + pair.nV]
        vals += [dg[:, 0], dg[:, 1]]
    return DirichletConstraints(np.concatenate(idx), np.concatenate(vals))


def condense_dirichlet(system: BlockSystem, constraints: DirichletConstraints) -> BlockSystem:
    """Replace constrained rows and columns by the identity and zero their residual."""
    idx = np.unique(constraints.indices)
    if len(idx) and (idx.min() < 0 or idx.max() >= system.n):
        raise ValueError("constraint refers to a non-existent unknown")
    if not len(idx):
        return system
    keep = np.ones(system.n)
    keep[idx] = 0.0
    K = sp.diags(keep)
    S = K @ system.S @ K + sp.diags(1.0 - keep)
    d = system.d.copy()
    d[idx] = 0.0
    return BlockSystem(sp.csr_matrix(S), d, system.block_sizes, system.scheme, system.tau)


@dataclass
class SaddleViews:
    """Saddle blocks ``[[F_i, G_i], [D_i, 0]]`` and the remaining ``F_4`` block."""

    blocks: list[sp.csr_matrix]
    F4: sp.csr_matrix | None
    J: int
    M: int

    def parts(self, i: int):
        S = self.blocks[i]
        J = self.J
        return S[:J, :J], S[:J, J:], S[J:, :J], S[J:, J:]


def submatrix_views(system: BlockSystem) -> SaddleViews:
    J, M = system.block_sizes[0], system.block_sizes[1]
    n1 = J + M
    S = system.S.tocsr()
    if system.scheme == "cgp1":
        return SaddleViews([S], None, J, M)
    top, bot = slice(0, n1), slice(n1, 2 * n1)
    S1 = S[top, :][:, top]
    S2 = S[top, :][:, bot]
    S3 = S[bot, :][:, top]
    F4 = S[n1:n1 + J, :][:, n1:n1 + J]
    return SaddleViews([S1, S2, S3], F4, J, M)


def reassemble_from_views(views: SaddleViews) -> sp.csr_matrix:
    if views.F4 is None:
        return views.blocks[0].tocsr()
    J, M = views.J, views.M
    S4 = sp.bmat([[views.F4, sp.csr_matrix((J, M))], [sp.csr_matrix((M, J)), sp.csr_matrix((M, M))]])
    return sp.bmat([[views.blocks[0], views.blocks[1]], [views.blocks[2], S4]]).tocsr()


def dump_matrix_market(system: BlockSystem, path) -> None:
    scipy.io.mmwrite(str(Path(path)), system.S.tocoo(), comment="block Newton matrix")

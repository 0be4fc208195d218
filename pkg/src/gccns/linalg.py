"""Restarted GMRES, block Schur preconditioning and small dense diagnostics."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import BlockSystem, SaddleViews, submatrix_views


class SolverError(RuntimeError):
    """Iterative solve failed; ``x`` holds the best iterate found."""

    def __init__(self, msg: str, x=None, iterations: int = 0, residual_norm: float = np.inf):
        super().__init__(msg)
        self.x = x
        self.iterations = iterations
        self.residual_norm = residual_norm


class CapabilityError(RuntimeError):
    pass


class PreconditionerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-8
    atol: float = 1e-14
    maxiter: int = 1000
    restart: int | None = 100
    preconditioner: str = "none"

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("tolerances must be positive")
        if self.preconditioner not in ("none", "blockSchur"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class GmresResult:
    x: np.ndarray
    iterations: int
    residual_norm: float


def _as_apply(op) -> Callable[[np.ndarray], np.ndarray]:
    if op is None:
        return lambda v: v
    if callable(op) and not hasattr(op, "matvec"):
        return op
    return op.matvec if hasattr(op, "matvec") else (lambda v: op @ v)


def gmres(A, b, config: SolverConfig = SolverConfig(), M=None, x0=None) -> GmresResult:
    """Right-preconditioned restarted GMRES (modified Gram-Schmidt, Givens rotations).

    ``M`` applies an approximate inverse of ``A``. Stops when
    ``||b - A x|| <= max(rtol ||b||, atol)``.
    """
    matvec = _as_apply(A)
    prec = _as_apply(M)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    bnorm = np.linalg.norm(b)
    target = max(config.rtol * bnorm, config.atol)
    m = n if config.restart is None else min(config.restart, n)
    r = b - matvec(x)
    beta = np.linalg.norm(r)
    best_x, best_res = x.copy(), beta
    if beta <= target:
        return GmresResult(x, 0, beta)
    it = 0
    while it < config.maxiter:
        V = np.zeros((m + 1, n))
        H = np.zeros((m + 1, m))
        cs, sn = np.zeros(m), np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        k_used = 0
        breakdown = False
        for k in range(m):
            it += 1
            w = matvec(prec(V[k]))
            for i in range(k + 1):
                H[i, k] = w @ V[i]
                w = w - H[i, k] * V[i]
            H[k + 1, k] = np.linalg.norm(w)
            for i in range(k):
                t = cs[i] * H[i, k] + sn[i] * H[i + 1, k]
                H[i + 1, k] = -sn[i] * H[i, k] + cs[i] * H[i + 1, k]
                H[i, k] = t
            denom = np.hypot(H[k, k], H[k + 1, k])
            k_used = k + 1
            if denom == 0.0:
                breakdown = True
                k_used = k
                break
            cs[k], sn[k] = H[k, k] / denom, H[k + 1, k] / denom
            h_next = H[k + 1, k]
            H[k, k] = denom
            H[k + 1, k] = 0.0
            g[k + 1] = -sn[k] * g[k]
            g[k] = cs[k] * g[k]
            if abs(g[k + 1]) <= target or it >= config.maxiter:
                break
            if h_next <= 1e-14 * denom:
                breakdown = True
                break
            V[k + 1] = w / h_next
        if k_used:
            y = scipy.linalg.solve_triangular(H[:k_used, :k_used], g[:k_used])
            x = x + prec(V[:k_used].T @ y)
        r = b - matvec(x)
        beta = np.linalg.norm(r)
        if beta < best_res:
            best_x, best_res = x.copy(), beta
        if beta <= target:
            return GmresResult(x, it, beta)
        if breakdown:
            raise SolverError("GMRES breakdown without convergence", best_x, it, best_res)
    raise SolverError(f"GMRES did not converge in {config.maxiter} iterations "
                      f"(residual {best_res:.3e}, target {target:.3e})", best_x, it, best_res)


class _SaddleSolve:
    """Upper block-triangular preconditioner for ``[[F, G], [D, 0]]`` with Schur guess ``Shat``."""

    def __init__(self, F, G, Shat):
        try:
            self.F = spla.splu(sp.csc_matrix(F))
            self.S = spla.splu(sp.csc_matrix(Shat))
        except RuntimeError as err:
            raise PreconditionerError(f"singular inner block: {err}") from None
        self.G = G
        self.J = F.shape[0]

    def __call__(self, r):
        rv, rp = r[:self.J], r[self.J:]
        yp = self.S.solve(rp)
        yv = self.F.solve(rv - self.G @ yp)
        return np.concatenate([yv, yp])


def block_schur_preconditioner(system: BlockSystem, pressure_mass, nu: float = 1.0,
                               viscous_scaling: bool = True) -> spla.LinearOperator:
    """Preconditioner built from the saddle blocks of the Newton matrix.

    Each block ``i`` gets the Schur approximation ``sign_i * c_i * Mp`` (divided
    by ``nu`` when ``viscous_scaling``), with ``c = (tau/2, tau/12, 1)`` and the
    sign of the true Schur complement. For the Hermite scheme the three
    blocks are combined anti-triangularly: the collocation rows give
    ``(v_2, p_2)``, then the variational rows give ``(v_3, p_3)``.
    """
    tau = system.tau
    views: SaddleViews = submatrix_views(system)
    Mp = sp.csr_matrix(pressure_mass)
    scale = 1.0 / nu if viscous_scaling else 1.0
    if system.scheme == "cgp1":
        coeffs = [(0.5 * tau, 1.0)]
    else:
        coeffs = [(0.5 * tau, 1.0), (tau / 12.0, -1.0), (1.0, 1.0)]
    solvers = []
    for i, (c, sign) in enumerate(coeffs):
        F, G, _, _ = views.parts(i)
        solvers.append(_SaddleSolve(F, G, sign * c * scale * Mp))
    n = system.n
    if system.scheme == "cgp1":
        return spla.LinearOperator((n, n), matvec=solvers[0], dtype=float)
    half = n // 2
    S1 = views.blocks[0]

    def apply(r):
        x1 = solvers[2](r[half:])
        x2 = solvers[1](r[:half] - S1 @ x1)
        return np.concatenate([x1, x2])

    return spla.LinearOperator((n, n), matvec=apply, dtype=float)


def condition_number(A, cap: int = 5000, nullity: int = 0) -> float:
    """``sigma_max / sigma_min`` by dense SVD, skipping ``nullity`` trailing singular values."""
    n = A.shape[0]
    if max(A.shape) > cap:
        raise CapabilityError(f"matrix dimension {n} exceeds dense SVD cap {cap}")
    dense = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    s = np.linalg.svd(dense, compute_uv=False)
    smin = s[len(s) - 1 - nullity]
    return float(s[0] / smin) if smin > 0 else np.inf


def direct_solve(A, b) -> np.ndarray:
    if sp.issparse(A):
        return spla.splu(sp.csc_matrix(A)).solve(np.asarray(b, dtype=float))
    return np.linalg.solve(A, b)


def write_matrix_market(A, path) -> None:
    scipy.io.mmwrite(str(Path(path)), sp.coo_matrix(A))


def read_matrix_market(path) -> sp.csr_matrix:
    return sp.csr_matrix(scipy.io.mmread(str(Path(path))))

"""Temporal building blocks of the C1 Galerkin-collocation scheme with cubics.

The Hermite basis lives on the reference interval [0, 1]; the Hermite-type
quadrature is stated on [-1, 1]. Both are stored as exact fractions and
exposed as floats.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

# monomial coefficients (1, t, t^2, t^3) of xi_0 .. xi_3 on [0, 1]
_HERMITE_COEFFS = (
    (1, 0, -3, 2),   # value at 0
    (0, 1, -2, 1),   # derivative at 0
    (0, 0, 3, -2),   # value at 1
    (0, 0, -1, 1),   # derivative at 1
)


def _poly_mul(a: Sequence[Fraction], b: Sequence[Fraction]) -> list[Fraction]:
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            out[i + j] += ai * bj
    return out


def _poly_integral_01(a: Sequence[Fraction]) -> Fraction:
    return sum((c / (k + 1) for k, c in enumerate(a)), Fraction(0))


def _poly_eval(a: Sequence[Fraction], t: Fraction) -> Fraction:
    acc = Fraction(0)
    for c in reversed(a):
        acc = acc * t + c
    return acc


def _poly_deriv(a: Sequence[Fraction]) -> list[Fraction]:
    return [k * c for k, c in enumerate(a)][1:] or [Fraction(0)]


@dataclass(frozen=True)
class HermiteBasis:
    """Cubic Hermite basis: value/derivative at 0, then value/derivative at 1."""

    coeffs: tuple[tuple[Fraction, ...], ...] = tuple(
        tuple(Fraction(c) for c in row) for row in _HERMITE_COEFFS
    )

    def __len__(self) -> int:
        return len(self.coeffs)

    def exact(self, l: int, t: Fraction, derivative: int = 0) -> Fraction:
        poly = list(self.coeffs[l])
        for _ in range(derivative):
            poly = _poly_deriv(poly)
        return _poly_eval(poly, Fraction(t))

    @property
    def float_coeffs(self) -> np.ndarray:
        return np.array([[float(c) for c in row] for row in self.coeffs])


HERMITE = HermiteBasis()


def eval_basis(l: int, t, derivative: int = 0):
    """Value (``derivative=0``) or slope (``derivative=1``) of xi_l at ``t`` in [0, 1].

    ``t`` may be a scalar or an array.
    """
    if l not in (0, 1, 2, 3):
        raise ValueError(f"basis index must be 0..3, got {l!r}")
    if derivative not in (0, 1):
        raise ValueError(f"derivative order must be 0 or 1, got {derivative!r}")
    c = HERMITE.float_coeffs[l]
    t = np.asarray(t, dtype=float)
    if derivative == 0:
        out = c[0] + t * (c[1] + t * (c[2] + t * c[3]))
    else:
        out = c[1] + t * (2.0 * c[2] + t * 3.0 * c[3])
    return float(out) if out.ndim == 0 else out


def eval_all(t, derivative: int = 0) -> np.ndarray:
    """All four basis functions at ``t``; shape ``(4,) + t.shape``."""
    return np.stack([np.asarray(eval_basis(l, t, derivative)) for l in range(4)])


@dataclass(frozen=True)
class HermiteQuadratureRule:
    """Hermite-type rule on [-1, 1] for k = 3: derivative weights plus endpoint values."""

    wL: Fraction
    wR: Fraction
    node_weights: tuple[tuple[Fraction, Fraction], ...]
    exact_degree: int = 3

    def __call__(self, g_left, g_right, dg_left, dg_right):
        (_, w1), (_, w2) = self.node_weights
        return (float(self.wL) * dg_left + float(w1) * g_left
                + float(w2) * g_right + float(self.wR) * dg_right)

    def on_interval(self, g: Callable, dg: Callable, t0: float, tau: float) -> float:
        """Rule mapped to [t0, t0 + tau]: derivative weights scale with (tau/2)^2."""
        (_, w1), (_, w2) = self.node_weights
        half = 0.5 * tau
        t1 = t0 + tau
        return (half**2 * float(self.wL) * dg(t0) + half * (float(w1) * g(t0) + float(w2) * g(t1))
                + half**2 * float(self.wR) * dg(t1))


def _solve_exact(a: list[list[Fraction]], b: list[Fraction]) -> list[Fraction]:
    n = len(b)
    a = [row[:] + [rhs] for row, rhs in zip(a, b)]
    for col in range(n):
        piv = next(r for r in range(col, n) if a[r][col] != 0)
        a[col], a[piv] = a[piv], a[col]
        for r in range(n):
            if r != col and a[r][col] != 0:
                f = a[r][col] / a[col][col]
                a[r] = [x - f * y for x, y in zip(a[r], a[col])]
    return [a[i][n] / a[i][i] for i in range(n)]


@lru_cache(maxsize=None)
def hermite_rule_k3() -> HermiteQuadratureRule:
    """Weights from exactness on 1, t, t^2, t^3 over [-1, 1]."""
    rows, rhs = [], []
    for d in range(4):
        f = lambda t, d=d: Fraction(t) ** d
        df = lambda t, d=d: d * Fraction(t) ** (d - 1) if d > 0 else Fraction(0)
        # unknowns ordered (wL, w(-1), w(1), wR)
        rows.append([df(-1), f(-1), f(1), df(1)])
        rhs.append(Fraction(1 - (-1) ** (d + 1), d + 1))
    wL, w1, w2, wR = _solve_exact(rows, rhs)
    return HermiteQuadratureRule(wL=wL, wR=wR,
                                 node_weights=((Fraction(-1), w1), (Fraction(1), w2)))


def hermite_quadrature_k3(g_left, g_right, dg_left, dg_right):
    """Apply the k = 3 Hermite rule on [-1, 1] to endpoint values and slopes."""
    return hermite_rule_k3()(g_left, g_right, dg_left, dg_right)


@dataclass(frozen=True)
class TemporalCouplingTable:
    """``m[i][j] = int_0^1 xi_i xi_j`` and ``s[i] = int_0^1 xi_i``, exact."""

    m_exact: tuple[tuple[Fraction, ...], ...]
    s_exact: tuple[Fraction, ...]
    m: np.ndarray = field(repr=False, compare=False)
    s: np.ndarray = field(repr=False, compare=False)


def _table_from_polys(polys) -> TemporalCouplingTable:
    n = len(polys)
    m = tuple(tuple(_poly_integral_01(_poly_mul(polys[i], polys[j])) for j in range(n))
              for i in range(n))
    s = tuple(_poly_integral_01(p) for p in polys)
    return TemporalCouplingTable(
        m_exact=m, s_exact=s,
        m=np.array([[float(v) for v in row] for row in m]),
        s=np.array([float(v) for v in s]),
    )


@lru_cache(maxsize=None)
def coupling_table() -> TemporalCouplingTable:
    return _table_from_polys(HERMITE.coeffs)


@lru_cache(maxsize=None)
def linear_coupling_table() -> TemporalCouplingTable:
    """Same table for the piecewise linear basis (1 - t, t)."""
    polys = ((Fraction(1), Fraction(-1)), (Fraction(0), Fraction(1)))
    return _table_from_polys(polys)


@dataclass(frozen=True)
class InterpolatedData:
    """Hermite coefficients of data g on one interval, scaled like the state slots.

    ``coeffs[0] = g(t0)``, ``coeffs[1] = tau g'(t0)``, ``coeffs[2] = g(t1)``,
    ``coeffs[3] = tau g'(t1)``.
    """

    coeffs: tuple
    t0: float
    tau: float

    def __call__(self, t):
        th = (np.asarray(t, dtype=float) - self.t0) / self.tau
        return sum(c * eval_basis(l, th) for l, c in enumerate(self.coeffs))

    def derivative(self, t):
        th = (np.asarray(t, dtype=float) - self.t0) / self.tau
        return sum(c * eval_basis(l, th, 1) for l, c in enumerate(self.coeffs)) / self.tau


def hermite_interpolate(g: Callable, dg: Callable, t0: float, tau: float) -> InterpolatedData:
    """Cubic Hermite interpolant of ``g`` on ``[t0, t0 + tau]``.

    ``g`` and ``dg`` may return scalars or arrays of any shape.
    """
    t1 = t0 + tau
    samples = (g(t0), tau * np.asarray(dg(t0)), g(t1), tau * np.asarray(dg(t1)))
    for s in samples:
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite sample in Hermite interpolation data")
    return InterpolatedData(coeffs=samples, t0=t0, tau=tau)

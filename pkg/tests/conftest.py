import numpy as np
import pytest

from gccns.assembly import Assembler
from gccns.fem import TaylorHoodPair
from gccns.forms import IntervalState, NavierStokesForms, NitscheParams, ProblemData
from gccns.mesh import generate_unit_square


def smooth_data(nu=0.7):
    """Nonzero forcing and boundary data so that every residual term is exercised."""
    def f(x, t):
        return np.stack([np.sin(x[..., 0] + t) + x[..., 1], np.cos(x[..., 1] - 2 * t)], axis=-1)

    def df(x, t):
        return np.stack([np.cos(x[..., 0] + t) + 0 * x[..., 1], 2 * np.sin(x[..., 1] - 2 * t)], axis=-1)

    def g(x, t):
        return np.stack([x[..., 1] * (1 - x[..., 1]) * (1 + t * t), 0.3 * t * x[..., 0]], axis=-1)

    def dg(x, t):
        return np.stack([x[..., 1] * (1 - x[..., 1]) * 2 * t, 0.3 * x[..., 0]], axis=-1)

    return ProblemData(nu, f=f, df=df, g=g, dg=dg)


def random_state(pair, scheme, rng, t0=0.3, tau=0.25):
    S = 4 if scheme == "gcc13" else 2
    return IntervalState(rng.standard_normal((S, pair.J)), rng.standard_normal((S, pair.M)), t0, tau)


@pytest.fixture(scope="session")
def pair_q4():
    return TaylorHoodPair(generate_unit_square(2), 4)


@pytest.fixture(scope="session")
def pair_q2():
    return TaylorHoodPair(generate_unit_square(3), 2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_forms(pair, mode="nitsche", data=None, eta=35.0):
    return NavierStokesForms(pair, data or smooth_data(), NitscheParams(eta, eta, mode))


def unknown_slots(state):
    return (2, 3) if state.scheme == "gcc13" else (1,)


def pack(state):
    return np.concatenate([np.concatenate([state.v[k], state.p[k]]) for k in unknown_slots(state)])


def unpack(x, state):
    out = state.copy()
    J = state.v.shape[1]
    for k, chunk in zip(unknown_slots(state), np.split(x, len(unknown_slots(state)))):
        out.v[k], out.p[k] = chunk[:J], chunk[J:]
    return out


def fd_mismatch(forms, state, rng, eps):
    """Relative gap between a central difference of the residual and the assembled Jacobian."""
    scheme = state.scheme
    asm = Assembler(forms, scheme)
    S = asm.assemble(state).S
    x = pack(state)
    dx = rng.standard_normal(x.shape)

    def q(y):
        return np.concatenate(forms.residual(unpack(y, state)))

    fd = (q(x + eps * dx) - q(x - eps * dx)) / (2 * eps)
    fwd = (q(x + eps * dx) - q(x)) / eps
    exact = S @ dx
    n = np.linalg.norm(exact)
    return np.linalg.norm(fd - exact) / n, np.linalg.norm(fwd - exact) / n


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = sorted(getattr(mod, "ACCEPTANCE_LINES", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)

import numpy as np
import pytest

from rbfreach.sdp import ConicProgram


def random_program(rng, nv=5, sizes=(4, 3), L=3, eq=0):
    """Strictly feasible primal and dual by construction.

    A primal interior point ``x0`` and dual interior point ``(X0, s0)`` are
    drawn first; ``F0`` and ``c`` are then chosen to make both interior.
    """
    x0 = rng.normal(size=nv)
    blocks, c = [], np.zeros(nv)
    for s in sizes:
        F = rng.normal(size=(nv, s, s))
        F = F + F.transpose(0, 2, 1)
        S = rng.normal(size=(s, s))
        S = S @ S.T + np.eye(s)
        F0 = S - np.tensordot(x0, F, 1)
        X0 = rng.normal(size=(s, s))
        X0 = X0 @ X0.T + np.eye(s)
        c += np.einsum("jab,ab->j", F, X0)
        blocks.append((F0, F))
    G = rng.normal(size=(L, nv))
    h = rng.random(L) + 0.1 - G @ x0
    c += G.T @ (rng.random(L) + 0.5)
    kw = {}
    if eq:
        E = rng.normal(size=(eq, nv))
        lam = rng.normal(size=eq)
        c += E.T @ lam
        kw = {"E": E, "e": -E @ x0}
    return ConicProgram(c, blocks, G=G, h=h, **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """One pass/fail line per acceptance criterion."""
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when != "call" or "test_acceptance" not in rep.nodeid:
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                rows.append((props["criterion"], outcome.upper()[:4], props.get("detail", "")))
    if rows:
        terminalreporter.write_sep("=", "acceptance criteria")
        for num, status, detail in sorted(rows):
            terminalreporter.write_line(f"criterion {num:2d}: {status}  {detail}")

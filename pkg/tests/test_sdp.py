import numpy as np
import pytest

from conftest import random_program
from rbfreach import sdp
from rbfreach.sdp import ConicProgram, ProgramError, SolverConfig, Status, solve, verify


def kkt_residuals(p: ConicProgram, sol) -> dict:
    """Independent recomputation of the optimality conditions from raw data."""
    x = sol.x
    Z = [F0 + np.einsum("j,jab->ab", x, F) for F0, F in p.blocks]
    lin = p.h + p.G @ x
    adj = p.G.T @ sol.s + sum(np.einsum("jab,ab->j", F, X) for (_, F), X in zip(p.blocks, sol.X))
    if p.e.size:
        adj = adj + p.E.T @ sol.lam
    return {
        "primal_cone": max(0.0, -min([np.linalg.eigvalsh(z)[0] for z in Z] + [lin.min(initial=0)])),
        "dual_cone": max(0.0, -min([np.linalg.eigvalsh(X)[0] for X in sol.X]
                                   + [sol.s.min(initial=0)])),
        "equality": float(np.max(np.abs(p.e + p.E @ x), initial=0.0)),
        "stationarity": float(np.max(np.abs(p.c - adj))),
        "complementarity": abs(sum(np.sum(z * X) for z, X in zip(Z, sol.X)) + lin @ sol.s),
    }


def test_two_by_two_psd_boundary():
    # minimize t subject to [[t, 1], [1, t]] >= 0
    F0 = np.array([[0.0, 1.0], [1.0, 0.0]])
    F = np.eye(2)[None]
    sol = solve(ConicProgram(np.array([1.0]), [(F0, F)]))
    assert sol.status is Status.OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-6)


def test_lp_without_blocks():
    # minimize x1 + x2 subject to x >= 0, x1 + x2 >= 1
    G = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    h = np.array([0.0, 0.0, -1.0])
    sol = solve(ConicProgram(np.ones(2), [], G=G, h=h))
    assert sol.status is Status.OPTIMAL
    assert sol.primal_objective == pytest.approx(1.0, abs=1e-6)


def relative_kkt(p: ConicProgram, sol) -> dict:
    """Residuals normalized by the data scale, as in the DIMACS error measures."""
    res = kkt_residuals(p, sol)
    scale = 1 + abs(sol.primal_objective) + abs(sol.dual_objective)
    res["stationarity"] /= 1 + np.max(np.abs(p.c))
    res["complementarity"] /= scale
    return res


@pytest.mark.parametrize("seed", range(20))
def test_kkt_on_random_strictly_feasible_programs(seed):
    rng = np.random.default_rng(seed)
    p = random_program(rng, nv=int(rng.integers(2, 8)), eq=int(seed % 3 == 0))
    sol = solve(p)
    assert sol.status is Status.OPTIMAL
    res = relative_kkt(p, sol)
    assert max(res.values()) <= 1e-7, res
    assert verify(p, sol).ok
    # with tighter stopping tolerances the unnormalized residuals are small too
    tight = solve(p, SolverConfig(gap_tol=1e-10, feas_tol=1e-10))
    assert tight.status is Status.OPTIMAL
    res = kkt_residuals(p, tight)
    assert max(res.values()) <= 1e-7, res
    assert tight.primal_objective == pytest.approx(sol.primal_objective, rel=1e-7, abs=1e-7)


def test_matches_cvxpy_backend():
    pytest.importorskip("cvxpy")
    rng = np.random.default_rng(7)
    for _ in range(3):
        p = random_program(rng)
        a = solve(p)
        b = solve(p, SolverConfig(backend="cvxpy"))
        assert b.status is Status.OPTIMAL
        assert a.primal_objective == pytest.approx(b.primal_objective, abs=1e-6)


def test_infeasible_program():
    # x >= 1 and x <= 0
    G = np.array([[1.0], [-1.0]])
    h = np.array([-1.0, 0.0])
    sol = solve(ConicProgram(np.array([1.0]), [], G=G, h=h))
    assert sol.status is Status.INFEASIBLE


def test_infeasible_lmi():
    # [[x, 0], [0, -x - 1]] >= 0 needs x >= 0 and x <= -1
    F0 = np.diag([0.0, -1.0])
    F = np.diag([1.0, -1.0])[None]
    sol = solve(ConicProgram(np.array([0.0]), [(F0, F)]))
    assert sol.status is Status.INFEASIBLE


def test_unbounded_is_not_optimal():
    G = np.array([[1.0]])
    sol = solve(ConicProgram(np.array([-1.0]), [], G=G, h=np.zeros(1)))
    assert sol.status is not Status.OPTIMAL


def test_equality_elimination():
    # minimize x1 + 2 x2 with x1 + x2 = 1, x >= 0 -> x = (1, 0)
    sol = solve(ConicProgram(np.array([1.0, 2.0]), [], G=np.eye(2), h=np.zeros(2),
                             E=np.array([[1.0, 1.0]]), e=np.array([-1.0])))
    assert sol.status is Status.OPTIMAL
    np.testing.assert_allclose(sol.x, [1.0, 0.0], atol=1e-7)


def test_inconsistent_equalities():
    E = np.array([[1.0], [1.0]])
    sol = solve(ConicProgram(np.array([0.0]), [], E=E, e=np.array([-1.0, -2.0])))
    assert sol.status is Status.INFEASIBLE


def test_verify_flags_perturbed_solution():
    rng = np.random.default_rng(3)
    p = random_program(rng)
    sol = solve(p)
    assert verify(p, sol).ok
    sol.x = sol.x.copy()
    sol.x[0] += 1e-3
    assert not verify(p, sol).ok


def test_verify_empty_program():
    p = ConicProgram(np.zeros(0), [])
    assert verify(p, solve(p)).ok


def test_deterministic():
    p = random_program(np.random.default_rng(4))
    a, b = solve(p), solve(p)
    assert np.array_equal(a.x, b.x)


def test_structural_errors():
    with pytest.raises(ProgramError):
        ConicProgram(np.ones(1), [(np.eye(2), np.zeros((2, 2, 2)))])
    with pytest.raises(ProgramError):
        ConicProgram(np.ones(1), [(np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros((1, 2, 2)))])
    with pytest.raises(ProgramError):
        ConicProgram(np.ones(1), [], G=np.ones((2, 1)), h=np.ones(3))


def test_dump_round_trip(tmp_path):
    p = random_program(np.random.default_rng(5), eq=1)
    sdp.save(p, tmp_path / "p.txt")
    q = sdp.load(tmp_path / "p.txt")
    np.testing.assert_array_equal(q.c, p.c)
    for (a0, a), (b0, b) in zip(p.blocks, q.blocks):
        np.testing.assert_array_equal(a0, b0)
        np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(q.G, p.G)
    np.testing.assert_array_equal(q.E, p.E)
    assert solve(q).primal_objective == solve(p).primal_objective

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_force_lp, lsq_gauge_oracle, random_lp
from stackfit.optimization import (
    EQ,
    LE,
    LinearProgram,
    LpSolution,
    LpStatus,
    SingularSystem,
    SolverConfig,
    format_lp,
    gauss_solve,
    parse_lp,
    solve,
    solve_linear_eq_constrained_lsq,
    to_standard_form,
    verify_solution,
    write_lp,
)
from stackfit.conic_geometry import lift_points


def test_textbook_lp():
    lp = LinearProgram([-1, -2], [[1, 1]], [LE], [1])
    sol = solve(lp)
    assert sol.status is LpStatus.OPTIMAL
    np.testing.assert_allclose(sol.x, [0, 1], atol=1e-12)
    assert sol.objective_value == pytest.approx(-2)


def test_unbounded_free_variable():
    sol = solve(LinearProgram([-1.0], lower=[-np.inf]))
    assert sol.status is LpStatus.UNBOUNDED
    assert sol.x is None


def test_unbounded_ray():
    sol = solve(LinearProgram([-1, 0], [[1, -1]], [LE], [1]))
    assert sol.status is LpStatus.UNBOUNDED


def test_infeasible():
    sol = solve(LinearProgram([1, 1], [[1, 1], [-1, -1]], [LE, LE], [1, -3]))
    assert sol.status is LpStatus.INFEASIBLE


def test_equality_and_bounds():
    # min x - y  s.t. x + y = 4, 1 <= x <= 3, y <= 2.5
    lp = LinearProgram([1, -1], [[1, 1]], [EQ], [4], lower=[1, 0], upper=[3, 2.5])
    sol = solve(lp)
    assert sol.optimal
    np.testing.assert_allclose(sol.x, [1.5, 2.5], atol=1e-12)
    assert verify_solution(lp, sol)


def test_to_standard_form_examples():
    lp = LinearProgram([1, 1], [[1, 2]], [LE], [3])
    std, vmap = to_standard_form(lp)
    assert std.num_vars == 3 and all(s == EQ for s in std.senses)
    np.testing.assert_allclose(std.A, [[1, 2, 1]])
    lp = LinearProgram([1.0], [[2.0]], [EQ], [3], lower=[-np.inf])
    std, vmap = to_standard_form(lp)
    assert std.num_vars == 2
    np.testing.assert_allclose(std.A, [[2, -2]])
    np.testing.assert_allclose(vmap.recover([0.0, 1.5]), [-1.5])


def test_random_lps_match_enumeration():
    rng = np.random.default_rng(2024)
    for _ in range(60):
        c, A, senses, b = random_lp(rng)
        lp = LinearProgram(c, A, senses, b)
        ref = brute_force_lp(c, A, senses, b)
        sol = solve(lp)
        if ref is None:
            assert sol.status is LpStatus.INFEASIBLE
        else:
            assert sol.optimal
            assert sol.objective_value == pytest.approx(ref, abs=1e-6)
            assert verify_solution(lp, sol, 1e-7)


def test_standard_form_equivalence():
    rng = np.random.default_rng(5)
    for _ in range(30):
        c, A, senses, b = random_lp(rng)
        lo = rng.integers(-2, 1, len(c)).astype(float)
        lp = LinearProgram(c, A, senses, b, lower=lo)
        std, vmap = to_standard_form(lp)
        s1, s2 = solve(lp), solve(std)
        assert s1.status == s2.status
        if s1.optimal:
            assert s1.objective_value == pytest.approx(s2.objective_value + vmap.objective_offset, abs=1e-9)
            assert verify_solution(lp, LpSolution(LpStatus.OPTIMAL, vmap.recover(s2.x),
                                                  float(lp.objective @ vmap.recover(s2.x)), 0))


def test_verify_solution_detects_perturbation():
    lp = LinearProgram([-1, -2], [[1, 1]], [LE], [1])
    sol = solve(lp)
    assert verify_solution(lp, sol, 1e-7)
    x = sol.x.copy()
    x[1] += 1.0
    bad = LpSolution(LpStatus.OPTIMAL, x, float(lp.objective @ x), sol.iterations)
    assert not verify_solution(lp, bad, 1e-7)
    assert not verify_solution(lp, LpSolution(LpStatus.INFEASIBLE, None, None, 0))


def test_known_vertex():
    # vertex (2, 3): x <= 2, y <= 3, maximise x + y
    lp = LinearProgram([-1, -1], [[1, 0], [0, 1]], [LE, LE], [2, 3])
    assert brute_force_lp([-1, -1], lp.A, lp.senses, lp.rhs) == pytest.approx(-5)
    sol = LpSolution(LpStatus.OPTIMAL, np.array([2.0, 3.0]), -5.0, 0)
    assert verify_solution(lp, sol)


def test_beale_cycling_example():
    # Beale (1955): cycles under Dantzig pricing with naive tie breaking
    c = [-0.75, 150, -1 / 50, 6]
    A = [[0.25, -60, -1 / 25, 9], [0.5, -90, -1 / 50, 3], [0, 0, 1, 0]]
    lp = LinearProgram(c, A, [LE] * 3, [0, 0, 1])
    ref = brute_force_lp(c, A, [LE] * 3, [0, 0, 1])
    for cfg in (SolverConfig(), SolverConfig(bland_after=1)):
        sol = solve(lp, cfg)
        assert sol.status is LpStatus.OPTIMAL
        assert sol.objective_value == pytest.approx(ref, abs=1e-9)


def test_highly_degenerate_lps_terminate():
    rng = np.random.default_rng(9)
    for _ in range(30):
        n, m = 6, 6
        A = rng.integers(-2, 3, (m, n)).astype(float)
        b = np.zeros(m)   # every vertex degenerate at the origin
        c = rng.integers(-3, 4, n).astype(float)
        A = np.vstack([A, np.ones(n)])
        b = np.append(b, 1.0)
        lp = LinearProgram(c, A, [LE] * (m + 1), b)
        sol = solve(lp, SolverConfig(bland_after=2))
        assert sol.status is not LpStatus.MAX_ITERATIONS
        assert sol.objective_value == pytest.approx(brute_force_lp(c, A, [LE] * (m + 1), b), abs=1e-9)


def test_max_iterations_status():
    rng = np.random.default_rng(1)
    c, A, senses, b = random_lp(rng, 6, 6)
    lp = LinearProgram(-np.abs(c) - 1, np.abs(A), [LE] * len(b), np.abs(b) + 1)
    sol = solve(lp, SolverConfig(max_iterations=1))
    assert sol.status in (LpStatus.MAX_ITERATIONS, LpStatus.OPTIMAL)
    assert solve(lp, SolverConfig(max_iterations=0)).status is LpStatus.MAX_ITERATIONS


def test_determinism():
    rng = np.random.default_rng(3)
    c, A, senses, b = random_lp(rng)
    lp = LinearProgram(c, A, senses, b)
    s1, s2 = solve(lp), solve(lp)
    assert s1.status == s2.status and s1.iterations == s2.iterations
    if s1.optimal:
        assert s1.x.tobytes() == s2.x.tobytes()


def test_no_better_point_by_random_perturbation():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 5:
        c, A, senses, b = random_lp(rng)
        lp = LinearProgram(c, A, senses, b)
        sol = solve(lp)
        if not sol.optimal:
            continue
        checked += 1
        eq = np.array([s == EQ for s in senses])
        for _ in range(1000):
            x = np.maximum(sol.x + rng.normal(0, 0.5, sol.x.size), 0)
            lhs = A @ x
            if np.any(lhs[~eq] > b[~eq] + 1e-9) or np.any(np.abs(lhs[eq] - b[eq]) > 1e-9):
                continue
            assert c @ x >= sol.objective_value - 1e-9


def test_lp_validation():
    with pytest.raises(ValueError):
        LinearProgram([1, 1], [[1, 1]], ["<"], [1])
    with pytest.raises(ValueError):
        LinearProgram([1], lower=[2], upper=[1])
    with pytest.raises(ValueError):
        LinearProgram([1, 1], [[1, 1]], [LE, LE], [1])
    with pytest.raises(ValueError):
        SolverConfig(feas_tol=0)


def test_cplex_round_trip(tmp_path):
    lp = LinearProgram([1, -2.5, 0], [[1, 1, 0], [0, -1, 3.25]], [LE, EQ], [4, -1e-3],
                       lower=[-np.inf, 0, -2], upper=[np.inf, 7, np.inf], names=["a", "b", "c"])
    text = format_lp(lp)
    assert text.splitlines()[1] == "Minimize"
    assert " a free" in text and " -2.0 <= c <= +inf" in text and " 0.0 <= b <= 7.0" in text
    assert " c2: - 1.0 b + 3.25 c = -0.001" in text
    back = parse_lp(text, lp.names)
    np.testing.assert_array_equal(back.objective, lp.objective)
    np.testing.assert_array_equal(back.A, lp.A)
    np.testing.assert_array_equal(back.rhs, lp.rhs)
    np.testing.assert_array_equal(back.lower, lp.lower)
    np.testing.assert_array_equal(back.upper, lp.upper)
    assert back.senses == lp.senses
    write_lp(lp, tmp_path / "x.lp")
    assert (tmp_path / "x.lp").read_bytes() == text.encode()


@given(st.integers(0, 10**6))
def test_cplex_round_trip_random(seed):
    rng = np.random.default_rng(seed)
    c, A, senses, b = random_lp(rng)
    lp = LinearProgram(c * rng.random(c.size), A * rng.random(A.shape), senses, b)
    back = parse_lp(format_lp(lp), [f"x{j + 1}" for j in range(lp.num_vars)])
    np.testing.assert_array_equal(back.A, lp.A)
    np.testing.assert_array_equal(back.objective, lp.objective)


def test_gauss_solve():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(7, 7))
    r = rng.normal(size=7)
    np.testing.assert_allclose(gauss_solve(M, r), np.linalg.solve(M, r), rtol=1e-10)
    with pytest.raises(SingularSystem):
        gauss_solve(np.ones((3, 3)), np.ones(3))


GAUGE = (np.array([1.0, 0, 1, 0, 0, 0]), 1.0)


def test_lsq_unit_circle():
    t = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    X = lift_points(np.column_stack([np.cos(t), np.sin(t)]))
    np.testing.assert_allclose(solve_linear_eq_constrained_lsq(X, GAUGE), [0.5, 0, 0.5, 0, 0, -0.5], atol=1e-9)


def test_lsq_collinear_is_singular():
    X = lift_points(np.column_stack([np.arange(5.0), 2 * np.arange(5.0) + 1]))
    with pytest.raises(SingularSystem):
        solve_linear_eq_constrained_lsq(X, GAUGE)


def test_lsq_matches_normal_equations_oracle():
    rng = np.random.default_rng(4)
    t = rng.uniform(0, 2 * np.pi, 200)
    p = np.column_stack([1 + 2 * np.cos(t), 2 + np.sin(t)]) + rng.normal(0, 1e-4, (200, 2))
    th = solve_linear_eq_constrained_lsq(lift_points(p), GAUGE)
    np.testing.assert_allclose(th, [0.2, 0, 0.8, -0.4, -3.2, 2.6], atol=1e-3)
    np.testing.assert_allclose(th, lsq_gauge_oracle(p), atol=1e-8)


def test_lsq_needs_five_rows():
    with pytest.raises(ValueError):
        solve_linear_eq_constrained_lsq(np.ones((4, 6)), GAUGE)

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from otpatch.ot import (
    NumericalUnderflowError,
    SolverConfig,
    TransportPlan,
    build_cost,
    exact_ot_1d,
    gaussian_w2_closed_form,
    ipot,
    ot_gradient,
    round_to_feasible,
    sinkhorn,
    solve_batch,
)

from conftest import central_differences, rel_err


def brute_force_ot(x_hat, x, p):
    """Minimum over all permutations (vertices of the Birkhoff polytope)."""
    m = len(x_hat)
    C = np.abs(np.subtract.outer(x_hat, x)) ** p
    return min(sum(C[i, s[i]] for i in range(m)) / m for s in itertools.permutations(range(m)))


def lp_ot(C):
    m = C.shape[0]
    A_eq = np.zeros((2 * m, m * m))
    for i in range(m):
        A_eq[i, i * m : (i + 1) * m] = 1
        A_eq[m + i, i::m] = 1
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.full(2 * m, 1.0 / m), bounds=(0, None), method="highs")
    return res.fun


class TestBuildCost:
    def test_examples(self):
        np.testing.assert_array_equal(build_cost([0, 2], [1, 1], 1).values, [[1, 1], [1, 1]])
        np.testing.assert_array_equal(build_cost([0], [3], 2).values, [[9]])

    def test_diagonal_zero(self, rng):
        x = rng.random(9)
        assert np.all(np.diag(build_cost(x, x).values) == 0)

    def test_errors(self):
        with pytest.raises(ValueError):
            build_cost([0, 1], [0, 1, 2])
        with pytest.raises(ValueError):
            build_cost([0, np.nan], [0, 1])
        with pytest.raises(ValueError):
            build_cost([0, 1], [0, 1], p=3)


class TestExact:
    def test_examples(self):
        assert exact_ot_1d([0, 1], [1, 2], 1)[0] == 1.0
        assert exact_ot_1d([3, 1, 2], [1, 2, 3], 1)[0] == 0.0
        x = np.random.default_rng(0).random(10)
        assert exact_ot_1d(x, x)[0] == 0.0

    def test_plan_is_scaled_permutation(self, rng):
        a, b = rng.random(12), rng.random(12)
        w, plan = exact_ot_1d(a, b)
        assert plan.is_feasible(1e-12)
        assert np.count_nonzero(plan.matrix) == 12
        C = build_cost(a, b).values
        assert np.sum(C * plan.matrix) == pytest.approx(w, rel=1e-13, abs=0)

    @pytest.mark.parametrize("p", [1, 2])
    def test_matches_permutation_brute_force(self, rng, p):
        for m in range(1, 7):
            a, b = rng.random(m), rng.random(m)
            assert exact_ot_1d(a, b, p)[0] == pytest.approx(brute_force_ot(a, b, p), abs=1e-14)

    @pytest.mark.parametrize("p", [1, 2])
    def test_matches_linear_program(self, rng, p):
        for m in (8, 15):
            a, b = rng.random(m), rng.random(m)
            assert exact_ot_1d(a, b, p)[0] == pytest.approx(lp_ot(build_cost(a, b, p).values), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 64))
    def test_permutation_invariance(self, seed, m):
        r = np.random.default_rng(seed)
        a, b = r.normal(size=m), r.normal(size=m)
        assert exact_ot_1d(r.permutation(a), r.permutation(b))[0] == exact_ot_1d(a, b)[0]

    @settings(max_examples=50, deadline=None)
    @given(
        ints=st.lists(st.integers(-1000, 1000), min_size=1, max_size=64),
        delta=st.integers(-64, 64),
    )
    def test_translation(self, ints, delta):
        # dyadic values keep every subtraction exact
        x = np.asarray(ints, dtype=np.float64) / 8
        d = delta / 16
        assert exact_ot_1d(x + d, x, 1)[0] == abs(d)


class TestEntropic:
    def test_sinkhorn_annealed_swap(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]])
        costs = []
        for eps in (0.5, 0.1, 0.05, 0.02):
            plan, cost = sinkhorn(C, SolverConfig(kind="sinkhorn", epsilon=eps))
            costs.append(cost)
        assert costs == sorted(costs, reverse=True)
        assert costs[-1] < 1e-9
        np.testing.assert_allclose(plan.matrix, [[0.5, 0], [0, 0.5]], atol=1e-9)

    @pytest.mark.parametrize("solver", [sinkhorn, ipot])
    def test_constant_cost(self, solver):
        plan, cost = solver(np.full((5, 5), 0.7))
        assert cost == pytest.approx(0.7, rel=1e-12)

    def test_sinkhorn_default_against_oracle(self):
        _, cost = sinkhorn(build_cost([0, 1], [1, 2]))
        assert abs(cost - 1.0) <= 5e-3

    @pytest.mark.parametrize("m", [1, 8, 27, 64])
    def test_ipot_identical_patches(self, m):
        x = np.random.default_rng(m).random(m)
        plan, cost = ipot(build_cost(x, x))
        assert cost <= 1e-6
        assert plan.is_feasible(1e-12)

    def test_ipot_swap(self):
        _, cost = ipot(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert cost <= 1e-3

    def test_ipot_gaussian_patches(self, rng):
        a, b = rng.normal(0, 0.1, 64), rng.normal(0.05, 0.15, 64)
        C = build_cost(a, b)
        _, cost = ipot(C)
        assert abs(cost - exact_ot_1d(a, b)[0]) <= 1e-3 * C.values.max()

    def test_all_zero_cost(self):
        for solver in (sinkhorn, ipot):
            plan, cost = solver(np.zeros((4, 4)))
            assert cost == 0.0
            assert plan.is_feasible(1e-12)

    def test_sinkhorn_batch_independent(self, rng):
        a, b = rng.random((12, 27)), rng.random((12, 27))
        for ratio in (0.1, 0.01):
            cfg = SolverConfig(kind="sinkhorn", epsilon_ratio=ratio)
            whole, _ = solve_batch(a, b, cfg)
            single = np.concatenate([solve_batch(a[i : i + 1], b[i : i + 1], cfg)[0] for i in range(12)])
            assert whole.tobytes() == single.tobytes()

    def test_log_domain_agrees_with_plain(self, rng):
        a, b = rng.random((20, 27)), rng.random((20, 27))
        for kind in ("sinkhorn", "ipot"):
            w_plain, _ = solve_batch(a, b, SolverConfig(kind=kind, epsilon_ratio=0.05, log_domain=False))
            w_log, _ = solve_batch(a, b, SolverConfig(kind=kind, epsilon_ratio=0.05, log_domain=True))
            np.testing.assert_allclose(w_log, w_plain, atol=1e-6)

    def test_underflow_error(self):
        C = np.array([[0.0, 1.0], [1.0, 0.0]]) * 1e4 + 1e4
        with pytest.raises(NumericalUnderflowError):
            sinkhorn(C, SolverConfig(kind="sinkhorn", epsilon=1.0, log_domain=False))
        _, cost = sinkhorn(C, SolverConfig(kind="sinkhorn", epsilon=1.0))
        assert cost == pytest.approx(1e4, rel=1e-9)

    def test_tiny_epsilon_log_domain(self, rng):
        a, b = rng.random(27), rng.random(27)
        C = build_cost(a, b)
        _, cost = ipot(C, SolverConfig(epsilon_ratio=1e-3))
        assert cost >= exact_ot_1d(a, b)[0] - 1e-9
        assert abs(cost - exact_ot_1d(a, b)[0]) <= 1e-2 * C.values.max()

    @pytest.mark.parametrize("m", [1, 8, 27, 64])
    @pytest.mark.parametrize("kind", ["sinkhorn", "ipot"])
    def test_feasibility_and_dominance(self, rng, m, kind):
        a, b = rng.random((30, m)), rng.random((30, m))
        C = np.abs(a[:, :, None] - b[:, None, :])
        exact, _ = solve_batch(a, b, SolverConfig(kind="exact_sorted"))
        for i in range(30):
            plan, cost = (sinkhorn if kind == "sinkhorn" else ipot)(C[i])
            assert plan.is_feasible(1e-5)
            assert abs(plan.mass - 1.0) <= 1e-5
            assert cost >= exact[i] - 1e-9

    def test_round_to_feasible(self, rng):
        raw = rng.random((6, 6))
        plan = round_to_feasible(raw)
        tp = TransportPlan(plan)
        assert tp.row_residual < 1e-15 and tp.col_residual < 1e-15
        assert np.all(plan >= 0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(kind="nope")
        with pytest.raises(ValueError):
            SolverConfig(outer_iters=0)
        with pytest.raises(ValueError):
            SolverConfig(epsilon=0.0)
        assert SolverConfig().iterations == 100
        assert SolverConfig(kind="sinkhorn").iterations == 1000


class TestIpotConvergenceProperty:
    def test_two_hundred_instances(self):
        r = np.random.default_rng(7)
        worst = 0.0
        for m in (1, 8, 27, 64):
            a, b = r.random((60, m)), r.random((60, m))
            exact, _ = solve_batch(a, b, SolverConfig(kind="exact_sorted"))
            w, _ = solve_batch(a, b, SolverConfig())
            cmax = np.abs(a[:, :, None] - b[:, None, :]).max(axis=(1, 2))
            gap = np.where(cmax > 0, (w - exact) / np.where(cmax > 0, cmax, 1), 0)
            worst = max(worst, gap.max())
            assert np.all(w >= exact - 1e-9)
        assert worst <= 1e-3


class TestGradient:
    def test_zero_at_identity(self, rng):
        x = rng.random(8)
        _, plan = exact_ot_1d(x, x)
        np.testing.assert_array_equal(ot_gradient(x, x, plan), 0.0)

    def test_single(self):
        np.testing.assert_array_equal(ot_gradient([2.0], [0.0], np.array([[1.0]]), 1), [1.0])

    def test_tie_gives_zero(self):
        assert ot_gradient([1.0], [1.0], np.array([[1.0]]), 1)[0] == 0.0

    @pytest.mark.parametrize("p", [1, 2])
    @pytest.mark.parametrize("kind", ["exact_sorted", "ipot"])
    def test_finite_differences(self, rng, p, kind):
        # m = 27; the plan is held fixed, as in the envelope gradient
        for _ in range(100):
            a = rng.random(27)
            b = rng.random(27)
            if np.min(np.abs(np.subtract.outer(a, b))) < 1e-3:
                continue
            if kind == "exact_sorted":
                plan = exact_ot_1d(a, b, p)[1].matrix
            else:
                plan = ipot(build_cost(a, b, p))[0].matrix
            f = lambda xh: float(np.sum(build_cost(xh, b, p).values * plan))
            fd = central_differences(f, a)
            assert rel_err(ot_gradient(a, b, plan, p), fd) <= 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ot_gradient([1.0, 2.0], [1.0, 2.0], np.eye(3))


class TestGaussian:
    def test_closed_form(self):
        assert gaussian_w2_closed_form(0, 1, 0, 1) == 0
        assert gaussian_w2_closed_form(0, 1, 1, 1) == 1
        with pytest.raises(ValueError):
            gaussian_w2_closed_form(0, -1, 0, 1)

    def test_sampled(self, rng):
        a = rng.normal(0.0, 0.1, 4096)
        b = rng.normal(0.05, 0.15, 4096)
        w2 = exact_ot_1d(a, b, p=2)[0]
        ref = gaussian_w2_closed_form(0.0, 0.1, 0.05, 0.15)
        assert ref == pytest.approx(0.005)
        assert abs(w2 - ref) <= 0.1 * ref

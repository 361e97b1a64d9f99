import math

import numpy as np
import pytest

import sqbsde as sq
from sqbsde import BranchError, IllConditioned, Infeasible, InvalidArgument
from sqbsde.bsde import (
    DualControl,
    LsmcOptions,
    RegressionBasis,
    dual_value,
    ladder_report,
    solve_lsmc,
    solve_truncated_ladder,
    subgradient_control,
)
from sqbsde.core import Terminal
from sqbsde.generators import GeneratorSpec
from sqbsde.transforms import solve_canonical

E15 = math.exp(1.5)


@pytest.fixture
def canon():
    return GeneratorSpec(delta=1.0)


class TestRegressionBasis:
    def test_build_shapes(self):
        basis = RegressionBasis(degree=3)
        x = np.random.default_rng(0).standard_normal(200)
        A, dA, params = basis.build(x, augment=True)
        assert A.shape == (200, 6)   # 1, xm, xm^2, xm^3, two exponentials
        assert dA.shape == A.shape
        A2, _, _ = basis.build(x, augment=False)
        assert A2.shape == (200, 4)

    def test_deriv_matches_difference_quotient(self):
        basis = RegressionBasis(degree=3)
        rng = np.random.default_rng(1)
        x = rng.standard_normal(500)
        A, dA, params = basis.build(x, augment=True)
        coef = rng.standard_normal(A.shape[1])
        xq = np.linspace(-1.5, 1.5, 11)
        dw = 1e-6

        def val(pts):
            xm = (pts - params["mu"]) / params["sd"]
            cols = [np.ones_like(pts)]
            for j in range(1, 4):
                cols.append(xm ** j)
            cols.append(np.exp(pts - params["mx"]))
            cols.append(np.exp(params["mn"] - pts))
            return np.column_stack(cols) @ coef

        fd = (val(xq + dw) - val(xq - dw)) / (2 * dw)
        assert np.allclose(basis.deriv_at(xq, params, coef), fd,
                           rtol=1e-7, atol=1e-7)

    def test_auto_augment(self, lognormal):
        basis = RegressionBasis()
        assert basis.resolved_augment(lognormal)
        assert not basis.resolved_augment(Terminal.const(1.0))
        assert RegressionBasis(augment_exp=True).resolved_augment(
            Terminal.const(1.0))


class TestSolveLsmc:
    def test_canonical_start_value(self, canon, paths4k, lognormal):
        sol = solve_lsmc(canon, lognormal, paths4k)
        assert sol.method == "lsmc"
        assert abs(sol.y0 / E15 - 1.0) < 0.05
        assert sol.diagnostics["scheme"] == "root"
        assert np.all(sol.y > 0)

    def test_field_tracks_exact_solution(self, canon, paths4k, lognormal):
        sol = solve_lsmc(canon, lognormal, paths4k)
        exact = solve_canonical(1.0, lognormal, paths4k)
        # compare conditional means halfway: regression noise averages out
        i = 25
        rel = abs(sol.y[:, i].mean() / exact.y[:, i].mean() - 1.0)
        assert rel < 0.05

    def test_negative_branch(self, paths4k):
        spec = GeneratorSpec(delta=1.0, sign="negative")
        neg = Terminal.from_fn(lambda x: -np.exp(x), label="-exp(x)")
        # fn-kind terminals do not auto-enable the exponential columns
        opts = LsmcOptions(basis=RegressionBasis(augment_exp=True))
        sol = solve_lsmc(spec, neg, paths4k, opts)
        assert abs(sol.y0 / (-E15) - 1.0) < 0.07
        assert np.all(sol.y < 0)

    def test_branch_error_on_mixed_terminal(self, canon, paths4k):
        mixed = Terminal.from_fn(lambda x: x, label="x")
        with pytest.raises(BranchError):
            solve_lsmc(canon, mixed, paths4k)

    def test_custom_picard_matches_root(self, paths4k, lognormal):
        beta, delta = 0.2, 1.0
        gcl = GeneratorSpec(delta=delta, beta=beta)
        cus = GeneratorSpec(
            delta=delta, beta=beta,
            custom=lambda t, y, z: beta * y + delta * z * z / y)
        a = solve_lsmc(gcl, lognormal, paths4k)
        b = solve_lsmc(cus, lognormal, paths4k)
        assert a.diagnostics["scheme"] == "root"
        assert b.diagnostics["scheme"] == "picard"
        assert abs(a.y0 / b.y0 - 1.0) < 0.01

    def test_root_scheme_needs_small_h_beta(self, paths4k, lognormal):
        spec = GeneratorSpec(delta=1.0, beta=60.0)
        with pytest.raises(InvalidArgument):
            solve_lsmc(spec, lognormal, paths4k)

    def test_root_scheme_rejects_custom(self, paths4k, lognormal):
        spec = GeneratorSpec(delta=1.0,
                             custom=lambda t, y, z: 0.5 * z * z / y)
        with pytest.raises(InvalidArgument):
            solve_lsmc(spec, lognormal, paths4k,
                       LsmcOptions(scheme="root"))

    def test_misaligned_states(self, canon, paths4k, lognormal):
        bad = np.zeros((7, 3))
        with pytest.raises(InvalidArgument):
            solve_lsmc(canon, lognormal, (bad, paths4k))

    def test_rank_deficient_regression(self, canon, lognormal):
        grid = sq.TimeGrid(0.0, 1.0, 10)
        tiny = sq.make_paths(grid, 6, seed=0)
        with pytest.raises(IllConditioned) as ei:
            solve_lsmc(canon, lognormal, tiny,
                       LsmcOptions(basis=RegressionBasis(degree=8)))
        assert ei.value.node is not None

    def test_delta_half_caveat(self, paths4k, lognormal):
        sol = solve_lsmc(GeneratorSpec(delta=0.5), lognormal, paths4k)
        assert "delta_half_caveat" in sol.diagnostics

    def test_comparison_ordering(self, canon, paths4k):
        lo = solve_lsmc(canon, Terminal.exp_affine(0.0, 1.0), paths4k)
        hi = solve_lsmc(canon, Terminal.exp_affine(math.log(1.2), 1.0),
                        paths4k)
        slack = 2 * math.hypot(lo.se, hi.se)
        assert lo.y0 <= hi.y0 + slack
        assert np.mean(lo.y[:, 25]) <= np.mean(hi.y[:, 25]) * (1 + 0.02)

    def test_clamp_rate_decreases_with_eps(self, canon, paths4k, lognormal):
        rates = []
        for eps in (1e-2, 1e-8):
            sol = solve_lsmc(canon, lognormal, paths4k,
                             LsmcOptions(eps=eps))
            rates.append(sol.clamp_rate)
        assert rates[-1] <= rates[0]
        assert rates[-1] < 0.01


class TestTruncatedLadder:
    def test_ladder_monotone_and_reported(self, paths4k, lognormal):
        spec = GeneratorSpec(delta=1.0, beta=0.1)
        sols = solve_truncated_ladder(spec, lognormal, paths4k,
                                      n_list=[2.0, 8.0, 32.0])
        assert [s.diagnostics["truncation_n"] for s in sols] == [2.0, 8.0,
                                                                 32.0]
        rep = ladder_report(sols)
        assert rep["monotone_within_2se"]
        assert len(rep["y0"]) == 3
        # the top rung should sit near the untruncated solve
        full = solve_lsmc(spec, lognormal, paths4k)
        assert abs(sols[-1].y0 / full.y0 - 1.0) < 0.05

    def test_unsorted_levels_rejected(self, paths4k, lognormal):
        spec = GeneratorSpec(delta=1.0)
        with pytest.raises(InvalidArgument):
            solve_truncated_ladder(spec, lognormal, paths4k,
                                   n_list=[8.0, 2.0])


class TestDuality:
    def test_tight_control_attains(self, canon, paths20k, lognormal):
        ctrl = DualControl(a=2.0, b=-1.0)
        value, se = dual_value(canon, lognormal, ctrl, paths20k)
        assert ctrl.margin == pytest.approx(0.0, abs=1e-12)
        assert abs(value - E15) < 3 * se
        assert ctrl.dual_value == value

    def test_interior_control_is_strict_lower_bound(self, canon, paths20k,
                                                    lognormal):
        ctrl = DualControl(a=1.0, b=-1.0)
        value, se = dual_value(canon, lognormal, ctrl, paths20k)
        assert ctrl.margin == pytest.approx(0.75, abs=1e-12)
        # deterministic control: the shifted expectation is exp(0.5)
        assert abs(value - math.exp(0.5)) < 3 * se
        assert value < E15

    def test_time_dependent_control(self, canon, paths20k, lognormal):
        ctrl = DualControl(a=2.0, b=lambda t: -1.0 - 0.5 * t)
        value, se = dual_value(canon, lognormal, ctrl, paths20k)
        assert value <= E15 + 3 * se

    def test_infeasible_names_node(self, canon, paths4k, lognormal):
        with pytest.raises(Infeasible) as ei:
            dual_value(canon, lognormal, DualControl(a=2.0, b=0.0), paths4k)
        assert ei.value.node == 0

    def test_infeasible_at_later_node(self, paths4k, lognormal):
        # beta(t) = 0.5 - t: the margin of (a, b) = (0, 0.2) turns negative
        # past t = 0.3, first violated at the first node above it
        spec = GeneratorSpec(delta=1.0, beta=lambda t: 0.5 - t)
        with pytest.raises(Infeasible) as ei:
            dual_value(spec, lognormal, DualControl(a=0.0, b=0.2), paths4k)
        h = paths4k.grid.h
        assert ei.value.node == int(math.floor(0.3 / h)) + 1

    def test_subgradient_of_exact_solution(self, canon, paths20k, lognormal):
        sol = solve_canonical(1.0, lognormal, paths20k)
        ctrl = subgradient_control(sol, canon)
        # Z = Y here, so a = 2, b = -1 on every path and node
        assert np.allclose(np.asarray(ctrl.a), 2.0, atol=1e-10)
        assert np.allclose(np.asarray(ctrl.b), -1.0, atol=1e-10)
        value, se = dual_value(canon, lognormal, ctrl, paths20k)
        assert abs(value - E15) < 3 * se

    def test_subgradient_of_lsmc_solution(self, canon, paths20k, lognormal):
        sol = solve_lsmc(canon, lognormal, paths20k)
        ctrl = subgradient_control(sol, canon)
        value, se = dual_value(canon, lognormal, ctrl, paths20k)
        # approximate attaining control: close to the true value from below
        assert value <= E15 + 3 * se
        assert value > 0.9 * E15

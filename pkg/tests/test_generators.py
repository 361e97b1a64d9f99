import math

import numpy as np
import pytest

import sqbsde as sq
from sqbsde import InvalidArgument, Singularity, Unsupported
from sqbsde.generators import (
    GeneratorSpec,
    check_assumptions,
    conjugate,
    eval_g,
    truncate_infconv,
    truncate_sup,
)


@pytest.fixture
def gspec():
    return GeneratorSpec(delta=1.0, alpha=0.1, beta=0.2, gamma=0.5)


class TestSpecValidation:
    def test_negative_delta(self):
        with pytest.raises(InvalidArgument):
            GeneratorSpec(delta=-0.5)

    def test_bad_sign(self):
        with pytest.raises(InvalidArgument):
            GeneratorSpec(delta=1.0, sign="mixed")

    @pytest.mark.parametrize("delta", [0.5, 0.75, 1.5])
    def test_negative_branch_needs_odd_integer_exponent(self, delta):
        # 2*delta + 1 even or fractional: mirror formula is ill-defined
        with pytest.raises(InvalidArgument):
            GeneratorSpec(delta=delta, sign="negative")

    def test_negative_branch_accepts_integer_delta(self):
        GeneratorSpec(delta=1.0, sign="negative")
        GeneratorSpec(delta=2.0, sign="negative")

    def test_m_property(self):
        assert GeneratorSpec(delta=1.0).m == 3.0
        assert GeneratorSpec(delta=0.25).m == 1.5

    def test_is_gclass(self, gspec):
        assert gspec.is_gclass
        assert not GeneratorSpec(delta=1.0,
                                 custom=lambda t, y, z: 0.0 * y).is_gclass


class TestEvalG:
    def test_formula(self, gspec):
        y, z = 2.0, 3.0
        want = 0.1 + 0.2 * y + 0.5 * z + 1.0 * z * z / y
        got = eval_g(gspec, 0.0, y, z)
        assert isinstance(got, float)
        assert got == pytest.approx(want, rel=1e-15)

    def test_time_dependent_coefficients(self):
        spec = GeneratorSpec(delta=1.0, alpha=lambda t: t, beta=0.0)
        assert eval_g(spec, 0.25, 1.0, 0.0) == pytest.approx(0.25)

    def test_singularity_at_zero(self, gspec):
        with pytest.raises(Singularity):
            eval_g(gspec, 0.0, 0.0, 1.0)
        with pytest.raises(Singularity):
            eval_g(gspec, 0.0, np.array([1.0, 0.0]), np.array([1.0, 1.0]))

    def test_wrong_branch_rejected(self, gspec):
        with pytest.raises(InvalidArgument):
            eval_g(gspec, 0.0, -1.0, 0.0)
        neg = GeneratorSpec(delta=1.0, alpha=0.1, beta=0.2, gamma=0.5,
                            sign="negative")
        with pytest.raises(InvalidArgument):
            eval_g(neg, 0.0, 1.0, 0.0)

    def test_negative_branch_mirror(self, gspec):
        neg = GeneratorSpec(delta=1.0, alpha=0.1, beta=0.2, gamma=0.5,
                            sign="negative")
        y, z = 1.7, -0.4
        assert eval_g(neg, 0.3, -y, -z) == pytest.approx(
            -eval_g(gspec, 0.3, y, z), rel=1e-14)

    def test_vectorized(self, gspec):
        ys = np.array([0.5, 1.0, 2.0])
        zs = np.array([-1.0, 0.0, 3.0])
        out = eval_g(gspec, 0.0, ys, zs)
        assert out.shape == (3,)
        for i in range(3):
            assert out[i] == pytest.approx(eval_g(gspec, 0.0, ys[i], zs[i]))


class TestDomination:
    def test_half_envelope_accepted(self):
        GeneratorSpec(
            delta=1.0, alpha=0.1, beta=0.2, gamma=0.0,
            custom=lambda t, y, z: 0.5 * (0.1 + 0.2 * y + z * z / y))

    def test_exceeding_envelope_rejected(self):
        with pytest.raises(InvalidArgument):
            GeneratorSpec(
                delta=1.0, alpha=0.1, beta=0.2, gamma=0.0,
                custom=lambda t, y, z: 0.1 + 0.2 * y + z * z / y + y)

    def test_negative_values_rejected(self):
        with pytest.raises(InvalidArgument):
            GeneratorSpec(delta=1.0, alpha=1.0,
                          custom=lambda t, y, z: -1.0 + 0.0 * y)


class TestConjugate:
    def test_gclass_feasible_value_is_minus_alpha(self):
        spec = GeneratorSpec(delta=1.0, alpha=0.3, beta=0.0, gamma=0.0)
        # boundary of the parabola b = beta - |a - gamma|^2 / (4 delta)
        c = conjugate(spec, 0.0, -1.0, 2.0)
        assert c.feasible
        assert c.value == pytest.approx(-0.3, abs=1e-12)

    def test_gclass_infeasible(self):
        spec = GeneratorSpec(delta=1.0, alpha=0.3, beta=0.0, gamma=0.0)
        c = conjugate(spec, 0.0, -0.9, 2.0)
        assert not c.feasible
        assert c.value == math.inf

    def test_gclass_gamma_shift(self):
        spec = GeneratorSpec(delta=1.0, alpha=0.0, beta=0.2, gamma=0.5)
        # feasible iff b <= 0.2 - (a - 0.5)^2 / 4
        assert conjugate(spec, 0.0, 0.2, 0.5).feasible
        assert not conjugate(spec, 0.0, 0.21, 0.5).feasible
        assert conjugate(spec, 0.0, 0.2 - 0.25, 1.5).feasible

    def test_delta_zero_needs_matching_slope(self):
        spec = GeneratorSpec(delta=0.0, alpha=0.0, beta=0.1, gamma=0.5)
        assert conjugate(spec, 0.0, 0.1, 0.5).feasible
        assert not conjugate(spec, 0.0, 0.1, 0.6).feasible
        assert not conjugate(spec, 0.0, 0.2, 0.5).feasible

    def test_custom_lattice(self):
        spec = GeneratorSpec(delta=1.0,
                             custom=lambda t, y, z: 0.5 * z * z / y)
        # sup_z (a z - z^2/(2y)) = a^2 y / 2, so the sup over y > 0 of
        # (b + a^2/2) y diverges iff b + a^2/2 > 0
        ok = conjugate(spec, 0.0, -1.0, 1.0)
        assert ok.feasible
        assert abs(ok.value) < 1e-2
        bad = conjugate(spec, 0.0, 1.0, 1.0)
        assert not bad.feasible
        assert bad.value == math.inf


class TestTruncations:
    YS = np.logspace(-1.5, 0.8, 7)[:, None]
    ZS = np.linspace(-4.0, 4.0, 9)[None, :]

    def _g(self, spec):
        Y = np.broadcast_to(self.YS, (7, 9))
        Z = np.broadcast_to(self.ZS, (7, 9))
        return eval_g(spec, 0.3, Y, Z)

    @pytest.mark.parametrize("maker", [truncate_sup, truncate_infconv])
    def test_below_envelope_and_monotone_in_n(self, maker):
        spec = GeneratorSpec(delta=1.0, alpha=0.1, beta=0.2, gamma=0.0)
        g = self._g(spec)
        prev = None
        for n in (1, 5, 25, 125):
            hn = maker(spec, n)(0.3, self.YS, self.ZS)
            assert hn.shape == (7, 9)
            assert np.all(hn <= g + 1e-9 * (1 + np.abs(g)))
            if prev is not None:
                assert np.all(hn >= prev - 1e-12 * (1 + np.abs(prev)))
            prev = hn

    @pytest.mark.parametrize("maker", [truncate_sup, truncate_infconv])
    def test_converges_where_slope_is_moderate(self, maker):
        spec = GeneratorSpec(delta=1.0, alpha=0.1, beta=0.2, gamma=0.0)
        hn = maker(spec, 100.0)
        for (y, z) in [(1.0, 3.0), (2.0, 0.5), (0.5, 1.0)]:
            g = eval_g(spec, 0.3, y, z)
            assert hn(0.3, y, z) == pytest.approx(g, abs=5e-11)

    def test_sup_handles_gamma(self):
        spec = GeneratorSpec(delta=1.0, alpha=0.1, beta=0.2, gamma=0.5)
        g = self._g(spec)
        hn = truncate_sup(spec, 50.0)(0.3, self.YS, self.ZS)
        assert np.all(hn <= g + 1e-9 * (1 + np.abs(g)))

    def test_infconv_rejects_gamma(self):
        spec = GeneratorSpec(delta=1.0, gamma=0.5)
        hn = truncate_infconv(spec, 10.0)
        with pytest.raises(Unsupported):
            hn(0.0, 1.0, 1.0)

    @pytest.mark.parametrize("maker", [truncate_sup, truncate_infconv])
    def test_finite_off_branch(self, maker):
        # the truncations extend past the y > 0 domain with finite values
        spec = GeneratorSpec(delta=1.0, alpha=0.1, beta=0.2, gamma=0.0)
        v = maker(spec, 10.0)(0.3, -1.0, 2.0)
        assert math.isfinite(v)

    @pytest.mark.parametrize("maker", [truncate_sup, truncate_infconv])
    def test_lipschitz_in_z(self, maker):
        spec = GeneratorSpec(delta=1.0, alpha=0.1, beta=0.2, gamma=0.0)
        n = 5.0
        hn = maker(spec, n)
        zs = np.linspace(-4.0, 4.0, 161)
        for y in (0.05, 0.3, 1.0, 4.0):
            vals = hn(0.3, y, zs)
            slopes = np.abs(np.diff(vals) / np.diff(zs))
            assert np.max(slopes) <= n + 1e-6

    @pytest.mark.parametrize("maker,kind", [(truncate_sup, "sup"),
                                            (truncate_infconv, "infconv")])
    def test_metadata(self, maker, kind):
        spec = GeneratorSpec(delta=1.0)
        hn = maker(spec, 7.0)
        assert hn.kind == kind
        assert hn.lipschitz == 7.0

    @pytest.mark.parametrize("maker", [truncate_sup, truncate_infconv])
    def test_n_gate(self, maker):
        with pytest.raises(InvalidArgument):
            maker(GeneratorSpec(delta=1.0), 0.5)

    def test_custom_spec_rejected(self):
        spec = GeneratorSpec(delta=1.0, alpha=1.0,
                             custom=lambda t, y, z: 0.0 * y)
        with pytest.raises(Unsupported):
            truncate_sup(spec, 10.0)
        with pytest.raises(Unsupported):
            truncate_infconv(spec, 10.0)


class TestCheckAssumptions:
    def test_argument_gates(self, gspec, paths4k, lognormal):
        with pytest.raises(InvalidArgument):
            check_assumptions(gspec, lognormal, p=1.0, r=0.1, paths=paths4k)
        with pytest.raises(InvalidArgument):
            check_assumptions(gspec, lognormal, p=2.0, r=0.5, paths=paths4k)
        with pytest.raises(InvalidArgument):
            check_assumptions(gspec, lognormal, p=2.0, r=0.0, paths=paths4k)

    def test_report_shape_and_tail_flag(self, gspec, paths4k, lognormal):
        rep = check_assumptions(gspec, lognormal, p=2.0, r=0.2, paths=paths4k)
        assert rep.q == pytest.approx(2.0)
        assert set(rep.estimates) >= {"terminal_moment",
                                      "coefficient_integral",
                                      "girsanov_moment"}
        assert set(rep.passes) == {"terminal_moment",
                                   "coefficient_integral",
                                   "girsanov_moment"}
        # exp(6 W_1) samples: the tail heuristic must flag the terminal
        # moment as unreliable while the deterministic parts pass
        assert not rep.passes["terminal_moment"]
        assert rep.passes["coefficient_integral"]
        assert not rep.all_pass
        # lambda folds the transformed drift and the Girsanov correction
        want = gspec.m * (0.1 + 0.2) + 0.25 / (2 * 0.2)
        assert rep.lambda_fn(0.0) == pytest.approx(want)

    def test_bounded_terminal_passes(self, paths4k):
        spec = GeneratorSpec(delta=1.0)
        rep = check_assumptions(spec, sq.Terminal.const(2.0), p=3.0, r=0.3,
                                paths=paths4k)
        assert rep.all_pass

import math

import numpy as np
import pytest

import sqbsde as sq
from sqbsde.errors import BranchError, InvalidArgument


class TestTimeGrid:
    def test_nodes_and_step(self):
        g = sq.TimeGrid(0.0, 1.0, 4)
        assert g.h == 0.25
        assert np.allclose(g.nodes(), [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_rejects_degenerate(self):
        with pytest.raises(InvalidArgument):
            sq.TimeGrid(1.0, 1.0, 4)
        with pytest.raises(InvalidArgument):
            sq.TimeGrid(0.0, 1.0, 0)


class TestPathBundle:
    def test_same_seed_bit_identical(self, grid50):
        a = sq.make_paths(grid50, 1000, seed=5)
        b = sq.make_paths(grid50, 1000, seed=5)
        assert np.array_equal(a.increments, b.increments)

    def test_different_seeds_differ(self, grid50):
        a = sq.make_paths(grid50, 1000, seed=5)
        b = sq.make_paths(grid50, 1000, seed=6)
        assert not np.array_equal(a.increments, b.increments)

    def test_prefix_stable_across_path_count(self, grid50):
        # chunked generation: the first k paths do not depend on n_paths
        a = sq.make_paths(grid50, 16384 + 7, seed=9)
        b = sq.make_paths(grid50, 16384, seed=9)
        assert np.array_equal(a.increments[:16384], b.increments)

    def test_increments_read_only(self, grid50):
        a = sq.make_paths(grid50, 100, seed=0)
        with pytest.raises(ValueError):
            a.increments[0, 0, 0] = 1.0

    def test_brownian_statistics(self, grid50):
        a = sq.make_paths(grid50, 50000, seed=3)
        W = a.w1
        assert W.shape == (50000, 51)
        assert np.all(W[:, 0] == 0.0)
        # terminal variance ~ T
        assert abs(W[:, -1].var() - 1.0) < 0.02
        assert abs(W[:, -1].mean()) < 0.02

    def test_drift_shift_adds_deterministic_ramp(self, grid50):
        plain = sq.make_paths(grid50, 64, seed=11)
        shifted = sq.make_paths(grid50, 64, seed=11, drift_shift=lambda t: 2.0)
        d = shifted.increments - plain.increments
        assert np.allclose(d, 2.0 * grid50.h)


class TestQuadrature:
    def test_gauss_hermite_moments(self):
        rule = sq.gauss_hermite(64)
        assert abs(rule.weights.sum() - 1.0) < 1e-12
        for k, want in ((1, 0.0), (2, 1.0), (3, 0.0), (4, 3.0), (6, 15.0)):
            got = float((rule.nodes ** k) @ rule.weights)
            assert abs(got - want) < 1e-10, k

    def test_gauss_hermite_lognormal_mean(self):
        rule = sq.gauss_hermite(64)
        got = float(np.exp(rule.nodes) @ rule.weights)
        assert abs(got - math.exp(0.5)) < 1e-12


class TestTerminal:
    def test_const(self):
        t = sq.Terminal.const(2.5)
        assert np.all(t.sample(np.array([-1.0, 3.0])) == 2.5)
        assert t.check_sign(np.array([0.0])) == 1

    def test_exp_affine(self):
        t = sq.Terminal.exp_affine(0.5, 2.0)
        x = np.array([-1.0, 0.0, 1.0])
        assert np.allclose(t.sample(x), np.exp(0.5 + 2.0 * x))

    def test_fn(self):
        t = sq.Terminal.from_fn(lambda x: x ** 2 + 1.0)
        assert np.allclose(t.sample(np.array([2.0])), [5.0])

    def test_check_sign_mixed_raises(self):
        t = sq.Terminal.from_fn(lambda x: x)
        with pytest.raises(BranchError):
            t.check_sign(np.array([-1.0, 1.0]))

    def test_check_sign_negative(self):
        t = sq.Terminal.const(-3.0)
        assert t.check_sign(np.array([0.0])) == -1

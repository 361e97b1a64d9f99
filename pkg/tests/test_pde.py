import math

import numpy as np
import pytest

from sqbsde import BranchError, InvalidArgument, Unsupported
from sqbsde.expr import parse
from sqbsde.generators import GeneratorSpec
from sqbsde.pde import (
    PDEProblem,
    SolutionField,
    eval_neumann_series,
    eval_probabilistic,
    eval_transform_exact,
    solve_fd,
)
from sqbsde.sde import ConvexDomain, DiffusionSpec


def _whole_space(delta=1.0, terminal="exp(x)", T=1.0, **gen_kw):
    return PDEProblem(
        diffusion=DiffusionSpec(mu=0.0, sigma=1.0),
        generator=GeneratorSpec(delta=delta, **gen_kw),
        terminal=parse(terminal),
        T=T,
    )


def _neumann(terminal="2 + cos(pi*x)", T=0.2, delta=1.0):
    return PDEProblem(
        diffusion=DiffusionSpec(mu=0.0, sigma=1.0,
                                domain=ConvexDomain.interval(0.0, 1.0)),
        generator=GeneratorSpec(delta=delta),
        terminal=parse(terminal),
        T=T,
        boundary="neumann",
    )


class TestPDEProblem:
    def test_cosine_terminal_builds(self):
        # pi is a bound constant, not a free variable of the expression
        prob = _neumann()
        assert prob.h(np.array([0.0]))[0] == pytest.approx(3.0)

    def test_neumann_needs_domain(self):
        with pytest.raises(InvalidArgument):
            PDEProblem(diffusion=DiffusionSpec(mu=0.0, sigma=1.0),
                       generator=GeneratorSpec(delta=1.0),
                       terminal=parse("2 + cos(pi*x)"), T=0.2,
                       boundary="neumann")

    def test_terminal_must_be_positive(self):
        with pytest.raises(BranchError):
            _whole_space(terminal="x")
        with pytest.raises(BranchError):
            _whole_space(terminal="cos(x)")

    def test_time_order(self):
        with pytest.raises(InvalidArgument):
            _whole_space(T=0.0)

    def test_is_canonical(self):
        assert _whole_space().is_canonical()
        assert not _whole_space(beta=0.1).is_canonical()
        assert not PDEProblem(
            diffusion=DiffusionSpec(mu=0.0, sigma=1.0),
            generator=GeneratorSpec(delta=1.0,
                                    custom=lambda t, y, z: 0.5 * z * z / y),
            terminal=parse("exp(x)"), T=1.0).is_canonical()


class TestSolutionField:
    def _field(self):
        return SolutionField(ts=np.array([0.0, 0.5, 1.0]),
                             xs=np.array([-1.0, 0.0, 1.0]),
                             values=np.arange(9.0).reshape(3, 3),
                             method="test")

    def test_value_picks_nearest_node(self):
        f = self._field()
        assert f.value(0.49, -0.1) == 4.0
        assert f.value(2.0, 5.0) == 8.0

    def test_to_csv_format(self, tmp_path):
        f = self._field()
        out = tmp_path / "field.csv"
        f.to_csv(str(out))
        raw = out.read_bytes()
        assert b"\r" not in raw
        lines = raw.decode("utf-8").splitlines()
        assert lines[0] == "t,x,v,se,method"
        assert len(lines) == 1 + 9
        assert lines[1].split(",")[4] == "test"


class TestEvalProbabilistic:
    def test_canonical_matches_closed_form(self):
        prob = _whole_space()
        ts = [0.5, 0.75]
        xs = [-1.0, 0.0, 1.0]
        field = eval_probabilistic(prob, ts, xs, n_steps=2, n_paths=20000,
                                   seed=0)
        for i, t in enumerate(ts):
            for j, x in enumerate(xs):
                ref = math.exp(x + 1.5 * (1.0 - t))
                err = abs(field.values[i, j] - ref)
                assert err < 3 * field.se[i, j] + 1e-12
                assert err / ref < 0.10

    def test_terminal_row_is_exact(self):
        prob = _whole_space()
        field = eval_probabilistic(prob, [1.0], [0.3], n_paths=100)
        assert field.values[0, 0] == pytest.approx(math.exp(0.3), rel=1e-12)

    def test_first_order_coefficients(self):
        # beta and gamma shift the exponent rate: v = exp(x + 1.9 (T - t))
        prob = _whole_space(beta=0.1, gamma=0.3)
        field = eval_probabilistic(prob, [0.5], [0.0], n_steps=50,
                                   n_paths=20000, seed=1)
        ref = math.exp(1.9 * 0.5)
        assert abs(field.values[0, 0] - ref) < 3 * field.se[0, 0] + 1e-12
        assert abs(field.values[0, 0] / ref - 1.0) < 0.10

    def test_custom_generator_runs_lsmc(self):
        prob = PDEProblem(
            diffusion=DiffusionSpec(mu=0.0, sigma=1.0),
            generator=GeneratorSpec(
                delta=1.0, custom=lambda t, y, z: 0.5 * z * z / y),
            terminal=parse("exp(x)"), T=1.0)
        field = eval_probabilistic(prob, [0.5], [0.0], n_steps=25,
                                   n_paths=8000, seed=2)
        # effective quadratic weight 1/2: v = exp(x + (T - t))
        assert abs(field.values[0, 0] / math.exp(0.5) - 1.0) < 0.05

    def test_errors_name_the_node(self):
        # domain on the diffusion without a Neumann flag trips the simulator
        prob = PDEProblem(
            diffusion=DiffusionSpec(mu=0.0, sigma=1.0,
                                    domain=ConvexDomain.interval(0.0, 1.0)),
            generator=GeneratorSpec(delta=1.0),
            terminal=parse("exp(x)"), T=1.0)
        with pytest.raises(InvalidArgument) as ei:
            eval_probabilistic(prob, [0.5], [0.5], n_paths=100)
        assert "at grid node (t=0.5, x=0.5)" in str(ei.value)


class TestEvalTransformExact:
    def test_constant_coefficients_use_quadrature(self):
        prob = _whole_space()
        ts = np.linspace(0.0, 1.0, 5)
        xs = np.linspace(-2.0, 2.0, 9)
        field = eval_transform_exact(prob, ts, xs)
        assert field.method == "transform-exact"
        ref = np.exp(xs[None, :] + 1.5 * (1.0 - ts)[:, None])
        assert np.max(np.abs(field.values / ref - 1.0)) < 1e-6

    def test_state_dependent_sigma_uses_mc(self):
        prob = PDEProblem(
            diffusion=DiffusionSpec(mu=0.0, sigma=parse("1 + 0.1*sin(x)")),
            generator=GeneratorSpec(delta=1.0),
            terminal=parse("exp(x)"), T=1.0)
        field = eval_transform_exact(prob, [0.75], [0.0], n_paths=20000,
                                     seed=3, n_steps=50)
        assert field.method == "transform-mc"
        # sigma stays within 10% of 1, so the canonical value anchors it
        assert abs(field.values[0, 0] / math.exp(1.5 * 0.25) - 1.0) < 0.10

    def test_requires_canonical(self):
        with pytest.raises(Unsupported):
            eval_transform_exact(_whole_space(beta=0.1), [0.0], [0.0])

    def test_rejects_neumann(self):
        with pytest.raises(Unsupported):
            eval_transform_exact(_neumann(), [0.0], [0.5])


class TestNeumannSeries:
    def test_known_value(self):
        field = eval_neumann_series(_neumann(), [0.0], [0.0])
        assert field.values[0, 0] == pytest.approx(2.5098252577145392,
                                                   rel=1e-12)
        assert field.diagnostics["residual"] < 1e-10

    def test_long_horizon_flattens_to_mean(self):
        field = eval_neumann_series(_neumann(T=80.0), [0.0],
                                    [0.0, 0.3, 0.7, 1.0])
        # all modes decay; only the transformed average 11/3 survives
        assert np.allclose(field.values[0], 11.0 ** (1.0 / 3.0), rtol=1e-12)

    def test_terminal_outside_catalog(self):
        prob = _neumann(terminal="2 + x")
        with pytest.raises(Unsupported):
            eval_neumann_series(prob, [0.0], [0.5])

    def test_needs_unit_interval(self):
        prob = PDEProblem(
            diffusion=DiffusionSpec(mu=0.0, sigma=1.0,
                                    domain=ConvexDomain.interval(0.0, 2.0)),
            generator=GeneratorSpec(delta=1.0),
            terminal=parse("2 + cos(pi*x/2)"), T=0.2, boundary="neumann")
        with pytest.raises(Unsupported):
            eval_neumann_series(prob, [0.0], [0.5])

    def test_needs_canonical_and_neumann(self):
        with pytest.raises(Unsupported):
            eval_neumann_series(_whole_space(), [0.0], [0.0])
        prob = PDEProblem(
            diffusion=DiffusionSpec(mu=0.0, sigma=1.0,
                                    domain=ConvexDomain.interval(0.0, 1.0)),
            generator=GeneratorSpec(delta=1.0, beta=0.1),
            terminal=parse("2 + cos(pi*x)"), T=0.2, boundary="neumann")
        with pytest.raises(Unsupported):
            eval_neumann_series(prob, [0.0], [0.5])


class TestSolveFd:
    def test_stability_gate_names_required_steps(self):
        prob = _neumann()
        xs = np.linspace(0.0, 1.0, 101)
        with pytest.raises(InvalidArgument) as ei:
            solve_fd(prob, xs, n_tsteps=10)
        assert "n_tsteps >=" in str(ei.value)

    def test_neumann_matches_series(self):
        prob = _neumann()
        xs = np.linspace(0.0, 1.0, 101)
        field = solve_fd(prob, xs, n_tsteps=8000)
        series = eval_neumann_series(prob, [0.0], [0.0, 0.25, 0.5, 1.0])
        for j, x in enumerate([0.0, 0.25, 0.5, 1.0]):
            fd_val = field.value(0.0, x)
            assert abs(fd_val / series.values[0, j] - 1.0) < 1e-3

    def test_neumann_boundary_slope_vanishes(self):
        prob = _neumann()
        xs = np.linspace(0.0, 1.0, 101)
        field = solve_fd(prob, xs, n_tsteps=8000)
        v0 = field.values[0]
        assert abs(v0[1] - v0[0]) < 5e-3
        assert abs(v0[-1] - v0[-2]) < 5e-3

    def test_whole_space_matches_transform(self):
        prob = _whole_space()
        xs = np.linspace(-3.0, 3.0, 151)
        # exact edge data keeps boundary error out of the interior check
        field = solve_fd(prob, xs, n_tsteps=2600,
                         boundary_values=lambda t, x: math.exp(
                             x + 1.5 * (1.0 - t)))
        ref = eval_transform_exact(prob, field.ts[::260], xs)
        mid = (np.abs(xs) <= 1.0)
        got = field.values[::260][:, mid]
        want = ref.values[:, mid]
        assert np.max(np.abs(got / want - 1.0)) < 2e-3

    def test_uniform_grid_required(self):
        prob = _whole_space()
        with pytest.raises(InvalidArgument):
            solve_fd(prob, [0.0, 0.1, 0.3], n_tsteps=100)

    def test_custom_generator_unsupported(self):
        prob = PDEProblem(
            diffusion=DiffusionSpec(mu=0.0, sigma=1.0),
            generator=GeneratorSpec(delta=1.0,
                                    custom=lambda t, y, z: 0.5 * z * z / y),
            terminal=parse("exp(x)"), T=1.0)
        with pytest.raises(Unsupported):
            solve_fd(prob, np.linspace(-1, 1, 21), n_tsteps=500)

    def test_clamp_rate_reported(self):
        prob = _neumann()
        xs = np.linspace(0.0, 1.0, 51)
        field = solve_fd(prob, xs, n_tsteps=2000)
        assert "clamp_rate" in field.diagnostics
        assert field.diagnostics["clamp_rate"] == 0.0

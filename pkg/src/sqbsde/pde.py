"""Space-time evaluation of the singular semilinear PDE

    dv/dt + (1/2) sigma^2 v_xx + mu v_x + H(t, v, sigma v_x) = 0,   v(T,.) = h,

by the probabilistic representation v(t,x) = Y_t^{t,x}, with an eigenfunction
series for the Neumann problem on [0,1] and an explicit finite-difference
scheme as independent cross-checks. One space dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .bsde import LsmcOptions, solve_lsmc
from .core import PathBundle, Terminal, TimeGrid, gauss_hermite, make_paths
from .errors import (BranchError, InvalidArgument, NumericDomain, SqbsdeError,
                     Unsupported)
from .expr import Expr
from .generators import GeneratorSpec
from .sde import DiffusionSpec, euler, euler_reflected, _is_const
from .transforms import PowerTransform, inverse

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def _as_space_fn(h) -> Callable:
    if isinstance(h, Expr):
        vs = set(h.variables()) - {"x"}
        if vs:
            raise InvalidArgument(
                f"terminal expression uses unknown variables {sorted(vs)}")
        return lambda x: h(x=np.asarray(x, dtype=float))
    if isinstance(h, Terminal):
        return h.sample
    if callable(h):
        return h
    c = float(h)
    return lambda x: np.full_like(np.asarray(x, dtype=float), c)


@dataclass(frozen=True)
class PDEProblem:
    diffusion: DiffusionSpec
    generator: GeneratorSpec
    terminal: object                   # h(x): Expr, callable, or constant
    T: float
    t0: float = 0.0
    boundary: str = "none"             # none | neumann

    def __post_init__(self):
        if self.boundary not in ("none", "neumann"):
            raise InvalidArgument("boundary must be 'none' or 'neumann'")
        if self.boundary == "neumann" and self.diffusion.domain is None:
            raise InvalidArgument("Neumann problem needs a domain on the "
                                  "diffusion")
        if self.T <= self.t0:
            raise InvalidArgument("need T > t0")
        hfn = _as_space_fn(self.terminal)
        object.__setattr__(self, "_h_fn", hfn)
        dom = self.diffusion.domain
        xs = (np.linspace(dom.a, dom.b, 41) if dom is not None
              else np.linspace(-5.0, 5.0, 41))
        hv = np.asarray(hfn(xs), dtype=float)
        if not np.all(np.isfinite(hv)) or not np.all(hv > 0):
            raise BranchError("terminal h must be strictly positive on the "
                              "sampled lattice")

    def h(self, x):
        return np.asarray(self._h_fn(np.asarray(x, dtype=float)), dtype=float)

    def is_canonical(self) -> bool:
        g = self.generator
        if not g.is_gclass:
            return False
        ts = np.linspace(self.t0, self.T, 17)
        return all(abs(g.alpha_at(t)) < 1e-14 and abs(g.beta_at(t)) < 1e-14
                   and abs(g.gamma_at(t)) < 1e-14 for t in ts)


@dataclass
class SolutionField:
    ts: np.ndarray
    xs: np.ndarray
    values: np.ndarray            # (len(ts), len(xs))
    method: str
    se: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def value(self, t: float, x: float) -> float:
        i = int(np.argmin(np.abs(self.ts - t)))
        j = int(np.argmin(np.abs(self.xs - x)))
        return float(self.values[i, j])

    def to_csv(self, path: str):
        se = self.se if self.se is not None else np.zeros_like(self.values)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("t,x,v,se,method\n")
            for i, t in enumerate(self.ts):
                for j, x in enumerate(self.xs):
                    f.write("%.17g,%.17g,%.17g,%.17g,%s\n"
                            % (t, x, self.values[i, j], se[i, j], self.method))


def _annotate(err: SqbsdeError, t: float, x: float) -> SqbsdeError:
    return type(err)(f"at grid node (t={t:.6g}, x={x:.6g}): {err}")


def _canonical_value_se(prob: PDEProblem, xT: np.ndarray):
    """u-inverse of the sampled mean of u(h(X_T)), with a delta-method SE."""
    pt = PowerTransform(prob.generator.delta)
    m = pt.m
    u_samples = prob.h(xT) ** m / m
    ubar = float(np.mean(u_samples))
    if ubar <= 0:
        raise BranchError("transformed terminal mean lost positivity")
    se_u = float(np.std(u_samples) / math.sqrt(len(u_samples)))
    v = (m * ubar) ** (1.0 / m)
    se_v = (m * ubar) ** (1.0 / m - 1.0) * se_u
    return v, se_v


def eval_probabilistic(prob: PDEProblem, ts: Sequence[float],
                       xs: Sequence[float], n_steps: int = 50,
                       n_paths: int = 4000, seed: int = 0,
                       options: Optional[LsmcOptions] = None) -> SolutionField:
    """v(t,x) = Y_t^{t,x} node by node: simulate the forward diffusion from
    (t,x) (reflected when the problem is Neumann), then solve the terminal-
    value problem on those paths. Canonical and first-order generators use the
    transform reduction on the terminal samples; anything else runs the LSMC
    engine. Per-node seeds derive deterministically from `seed`.
    """
    ts = np.asarray(list(ts), dtype=float)
    xs = np.asarray(list(xs), dtype=float)
    vals = np.empty((len(ts), len(xs)))
    ses = np.zeros_like(vals)
    g = prob.generator
    canonical = prob.is_canonical()
    gclass_weighted = (not canonical and g.is_gclass
                       and all(abs(g.alpha_at(t)) < 1e-14
                               for t in np.linspace(prob.t0, prob.T, 17)))
    for i, t in enumerate(ts):
        for j, x in enumerate(xs):
            node_seed = seed * 1000003 + i * 1009 + j
            if t >= prob.T - 1e-12:
                vals[i, j] = float(prob.h(np.asarray([x]))[0])
                continue
            grid = TimeGrid(t, prob.T, n_steps)
            bundle = make_paths(grid, n_paths=n_paths, seed=node_seed)
            try:
                if prob.boundary == "neumann":
                    states = euler_reflected(prob.diffusion, t, x,
                                             bundle).states
                else:
                    states = euler(prob.diffusion, t, x, bundle)
                if canonical:
                    vals[i, j], ses[i, j] = _canonical_value_se(
                        prob, states[:, -1])
                elif gclass_weighted:
                    vals[i, j], ses[i, j] = _gclass_terminal_value(
                        prob, bundle, states)
                else:
                    opt = options or LsmcOptions()
                    opt = LsmcOptions(
                        basis=opt.basis, n_picard=opt.n_picard, eps=opt.eps,
                        kappa=opt.kappa, scheme=opt.scheme,
                        sigma_fn=lambda tt, xx: prob.diffusion.sigma_at(tt, xx))
                    sol = solve_lsmc(g, Terminal.from_fn(prob.h),
                                     (states, bundle), opt)
                    vals[i, j], ses[i, j] = sol.y0, sol.se
            except SqbsdeError as e:
                raise _annotate(e, t, x) from e
    field_ = SolutionField(ts=ts, xs=xs, values=vals, method="probabilistic",
                           se=ses)
    if not np.all(field_.values > 0):
        raise BranchError("probabilistic field lost positivity")
    return field_


def _gclass_terminal_value(prob: PDEProblem, bundle: PathBundle,
                           states: np.ndarray):
    """First-order generator (alpha = 0): transformed value is the likelihood-
    weighted mean of u(h(X_T)) times the beta integrating factor."""
    g = prob.generator
    pt = PowerTransform(g.delta)
    m = pt.m
    grid = bundle.grid
    nodes = grid.nodes()[:-1]
    h = grid.h
    gam = np.array([g.gamma_at(s) for s in nodes])
    beta_int = float(np.sum([g.beta_at(s) for s in nodes]) * h)
    F = math.exp(m * beta_int)
    logL = bundle.dw1 @ gam - 0.5 * float(gam @ gam) * h
    L = np.exp(logL)
    u_samples = L * (prob.h(states[:, -1]) ** m / m)
    ubar = F * float(np.mean(u_samples))
    if ubar <= 0:
        raise BranchError("transformed terminal mean lost positivity")
    se_u = F * float(np.std(u_samples) / math.sqrt(len(u_samples)))
    return (m * ubar) ** (1.0 / m), (m * ubar) ** (1.0 / m - 1.0) * se_u


def eval_transform_exact(prob: PDEProblem, ts: Sequence[float],
                         xs: Sequence[float], n_quad: int = 128,
                         n_paths: int = 20000, seed: int = 0,
                         n_steps: int = 200) -> SolutionField:
    """v(t,x) = u^{-1}(E[u(h(X_T^{t,x}))]) for the canonical generator.

    Gauss-Hermite quadrature when the diffusion is Gaussian-explicit
    (constant mu, sigma, no domain); otherwise Monte-Carlo over Euler paths.
    """
    if not prob.is_canonical():
        raise Unsupported("transform-exact evaluation needs the canonical "
                          "generator (alpha=beta=gamma=0)")
    if prob.boundary != "none":
        raise Unsupported("transform-exact evaluation covers whole-space "
                          "problems; use the series or reflected evaluator")
    pt = PowerTransform(prob.generator.delta)
    m = pt.m
    ts = np.asarray(list(ts), dtype=float)
    xs = np.asarray(list(xs), dtype=float)
    mu_c = _is_const(prob.diffusion.mu)
    sg_c = _is_const(prob.diffusion.sigma)
    vals = np.empty((len(ts), len(xs)))
    ses = np.zeros_like(vals)
    if mu_c is not None and sg_c is not None:
        rule = gauss_hermite(n_quad)
        for i, t in enumerate(ts):
            tau = prob.T - t
            loc = xs + mu_c * tau
            scale = abs(sg_c) * math.sqrt(max(tau, 0.0))
            pts = loc[:, None] + scale * rule.nodes[None, :]
            ubar = (prob.h(pts) ** m / m) @ rule.weights
            if np.any(ubar <= 0):
                raise BranchError("transformed terminal mean lost positivity")
            vals[i] = (m * ubar) ** (1.0 / m)
        method = "transform-exact"
    else:
        for i, t in enumerate(ts):
            for j, x in enumerate(xs):
                if t >= prob.T - 1e-12:
                    vals[i, j] = float(prob.h(np.asarray([x]))[0])
                    continue
                grid = TimeGrid(t, prob.T, n_steps)
                bundle = make_paths(grid, n_paths=n_paths,
                                    seed=seed * 1000003 + i * 1009 + j)
                X = euler(prob.diffusion, t, x, bundle)
                vals[i, j], ses[i, j] = _canonical_value_se(prob, X[:, -1])
        method = "transform-mc"
    return SolutionField(ts=ts, xs=xs, values=vals, method=method, se=ses)


# ---------------------------------------------------------------------------
# Neumann eigenfunction series on [0,1]
# ---------------------------------------------------------------------------


def _cosine_coefficients(fn: Callable, n_modes: int, n_grid: int = 4097):
    xg = np.linspace(0.0, 1.0, n_grid)
    fv = np.asarray(fn(xg), dtype=float)
    coeffs = [float(_trapezoid(fv, xg))]
    for k in range(1, n_modes + 1):
        ck = 2.0 * float(_trapezoid(fv * np.cos(k * math.pi * xg), xg))
        coeffs.append(ck)
    rec = np.full_like(xg, coeffs[0])
    for k in range(1, n_modes + 1):
        rec += coeffs[k] * np.cos(k * math.pi * xg)
    resid = float(np.max(np.abs(rec - fv)))
    return np.array(coeffs), resid


def eval_neumann_series(prob: PDEProblem, ts: Sequence[float],
                        xs: Sequence[float],
                        n_modes: int = 10) -> SolutionField:
    """Separation-of-variables solution of the transformed heat equation with
    zero normal derivative on [0,1]:

        w(t,x) = a0 + sum_k a_k exp(-k^2 pi^2 (T-t)/2) cos(k pi x),

    a_k the cosine coefficients of u(h(.)). Terminals whose transform is not
    a finite cosine polynomial (residual above 1e-8 of scale) are rejected.
    """
    if prob.boundary != "neumann":
        raise Unsupported("series evaluator is for the Neumann problem")
    dom = prob.diffusion.domain
    if dom is None or dom.kind != "interval" or abs(dom.a) > 1e-12 \
            or abs(dom.b - 1.0) > 1e-12:
        raise Unsupported("series evaluator needs the interval [0,1]")
    if _is_const(prob.diffusion.mu) != 0.0 or _is_const(
            prob.diffusion.sigma) != 1.0:
        raise Unsupported("series evaluator needs mu=0, sigma=1")
    if not prob.is_canonical():
        raise Unsupported("series evaluator needs the canonical generator")
    pt = PowerTransform(prob.generator.delta)
    m = pt.m
    coeffs, resid = _cosine_coefficients(lambda x: prob.h(x) ** m / m, n_modes)
    scale = max(abs(coeffs).max(), 1e-300)
    if resid > 1e-8 * scale:
        raise Unsupported("terminal is outside the cosine catalog "
                          f"(series residual {resid:.3g})")
    ts = np.asarray(list(ts), dtype=float)
    xs = np.asarray(list(xs), dtype=float)
    vals = np.empty((len(ts), len(xs)))
    for i, t in enumerate(ts):
        tau = prob.T - t
        w = np.full_like(xs, coeffs[0])
        for k in range(1, n_modes + 1):
            w += coeffs[k] * math.exp(-0.5 * (k * math.pi) ** 2 * tau) \
                * np.cos(k * math.pi * xs)
        if np.any(m * w <= 0):
            raise BranchError("series value lost positivity")
        vals[i] = (m * w) ** (1.0 / m)
    return SolutionField(ts=ts, xs=xs, values=vals, method="series",
                         diagnostics={"coefficients": coeffs.tolist(),
                                      "residual": resid})


# ---------------------------------------------------------------------------
# explicit finite differences
# ---------------------------------------------------------------------------


def solve_fd(prob: PDEProblem, xs: Sequence[float], n_tsteps: int,
             boundary_values: Optional[Callable] = None) -> SolutionField:
    """Explicit backward time-stepping with centered differences on a uniform
    x-grid. Neumann problems mirror ghost nodes; whole-space problems pin the
    two edge nodes to boundary_values(t, x) (default: frozen terminal values).

    Stability requires dt <= 0.25 dx^2 / max sigma^2; violations raise with
    the admissible dt.
    """
    g = prob.generator
    if not g.is_gclass:
        raise Unsupported("finite differences support the dominating-class "
                          "generator form")
    xs = np.asarray(list(xs), dtype=float)
    dxs = np.diff(xs)
    dx = float(dxs[0])
    if not np.allclose(dxs, dx, rtol=1e-10, atol=1e-14):
        raise InvalidArgument("x-grid must be uniform")
    dt = (prob.T - prob.t0) / n_tsteps
    ts_all = np.linspace(prob.t0, prob.T, n_tsteps + 1)
    sig2_max = 0.0
    for t in ts_all[:: max(1, n_tsteps // 16)]:
        sig2_max = max(sig2_max,
                       float(np.max(prob.diffusion.sigma_at(t, xs) ** 2)))
    dt_adm = 0.25 * dx * dx / max(sig2_max, 1e-300)
    if dt > dt_adm * (1 + 1e-12):
        raise InvalidArgument(
            f"explicit scheme unstable: dt={dt:.6g} exceeds admissible "
            f"dt={dt_adm:.6g}; use n_tsteps >= "
            f"{int(math.ceil((prob.T - prob.t0) / dt_adm))}")

    neumann = prob.boundary == "neumann"
    if neumann:
        dom = prob.diffusion.domain
        if abs(xs[0] - dom.a) > 1e-12 or abs(xs[-1] - dom.b) > 1e-12:
            raise InvalidArgument("x-grid must span the domain exactly for "
                                  "the Neumann problem")
    hvals = prob.h(xs)
    eps = 1e-6 * float(np.median(hvals))
    values = np.empty((n_tsteps + 1, len(xs)))
    values[-1] = hvals
    v = hvals.copy()
    clamped_total = 0
    for k in range(n_tsteps - 1, -1, -1):
        t = ts_all[k + 1]  # coefficients evaluated at the right node
        if neumann:
            vpad = np.concatenate([[v[1]], v, [v[-2]]])
            xpad = np.concatenate([[xs[0] - dx], xs, [xs[-1] + dx]])
            sig2 = prob.diffusion.sigma_at(t, xpad) ** 2
            mu = prob.diffusion.mu_at(t, xpad)
            out, nc = _kernels.fd_step_interior(
                vpad, dx, dt, sig2, mu, g.alpha_at(t), g.beta_at(t),
                g.gamma_at(t), g.delta, eps)
            v = out[1:-1]
        else:
            sig2 = prob.diffusion.sigma_at(t, xs) ** 2
            mu = prob.diffusion.mu_at(t, xs)
            out, nc = _kernels.fd_step_interior(
                v, dx, dt, sig2, mu, g.alpha_at(t), g.beta_at(t),
                g.gamma_at(t), g.delta, eps)
            v = out
            tk = ts_all[k]
            if boundary_values is not None:
                v[0] = float(boundary_values(tk, xs[0]))
                v[-1] = float(boundary_values(tk, xs[-1]))
            # default: edge nodes stay at the terminal values
        clamped_total += nc
        values[k] = v
    clamp_rate = clamped_total / (n_tsteps * len(xs))
    return SolutionField(ts=ts_all, xs=xs, values=values,
                         method="finite-difference",
                         diagnostics={"clamp_rate": clamp_rate, "dx": dx,
                                      "dt": dt, "eps": eps})

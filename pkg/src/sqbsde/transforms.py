"""Power-transform reductions: exact solvers for the canonical singular
generator delta*|z|^2/y and its first-order extension beta*y + gamma*z +
delta*|z|^2/y, plus two-sided bounds when a zeroth-order alpha term is present.

The map u(y) = y^m/m with m = 2*delta + 1 turns the canonical BSDE into a
conditional expectation; everything here is quadrature-exact for terminals of
the form f(W_T).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from .bsde import BSDESolution
from .core import PathBundle, QuadratureRule, Terminal, gauss_hermite
from .errors import BranchError, InvalidArgument, NumericDomain, Unsupported
from .generators import GeneratorSpec

_ODD_TOL = 1e-9


@dataclass(frozen=True)
class PowerTransform:
    """u(y) = y^m / m with m = 2*delta + 1, strictly increasing on y > 0."""

    delta: float

    def __post_init__(self):
        if self.delta < 0:
            raise InvalidArgument("delta must be nonnegative")

    @property
    def m(self) -> float:
        return 2.0 * self.delta + 1.0

    @property
    def odd_integer(self) -> bool:
        m = self.m
        return abs(m - round(m)) < _ODD_TOL and round(m) % 2 == 1


def forward(pt: PowerTransform, y):
    """u(y) = y^m/m. Negative y allowed only when m is an odd integer."""
    y = np.asarray(y, dtype=float)
    m = pt.m
    if pt.odd_integer:
        out = np.sign(y) * np.abs(y) ** m / m
    else:
        if np.any(y <= 0):
            raise NumericDomain("forward transform needs y > 0 "
                                "(m is not an odd integer)")
        out = y ** m / m
    return out if out.ndim else float(out)


def inverse(pt: PowerTransform, w):
    """v(w) = (m*w)^{1/m}; inverse of forward."""
    w = np.asarray(w, dtype=float)
    m = pt.m
    mw = m * w
    if pt.odd_integer:
        out = np.sign(mw) * np.abs(mw) ** (1.0 / m)
    else:
        if np.any(mw <= 0):
            raise NumericDomain("inverse transform needs w > 0 "
                                "(m is not an odd integer)")
        out = mw ** (1.0 / m)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class IntegratingFactor:
    """F(s,t) = exp(int_s^t rho(u) du), rho integrated once on a fine grid.

    The cumulative integral is a trapezoid rule on n_intervals panels over
    [t0, T]; factor() interpolates the cumulative values linearly, so the
    cocycle identity F(s,t)F(t,r) = F(s,r) holds to roundoff by construction.
    """

    rate: Callable[[float], float]
    t0: float
    T: float
    n_intervals: int = 2048

    def __post_init__(self):
        ts = np.linspace(self.t0, self.T, self.n_intervals + 1)
        vals = np.array([float(self.rate(t)) for t in ts])
        cum = np.concatenate(
            [[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(ts))])
        object.__setattr__(self, "_ts", ts)
        object.__setattr__(self, "_cum", cum)

    @staticmethod
    def from_spec(spec: GeneratorSpec, t0: float, T: float) -> "IntegratingFactor":
        m = spec.m
        return IntegratingFactor(
            rate=lambda t: m * (spec.alpha_at(t) + spec.beta_at(t)),
            t0=t0, T=T)

    def cumulative(self, t: float) -> float:
        """int_{t0}^t rho(u) du."""
        return float(np.interp(t, self._ts, self._cum))

    def factor(self, s: float, t: float) -> float:
        return math.exp(self.cumulative(t) - self.cumulative(s))


def _terminal_bar(terminal: Terminal, m: float, mirrored: bool):
    """u(xi) = xi^m/m as a function of the terminal state, positive branch."""
    def f(x):
        v = terminal.sample(x)
        if mirrored:
            v = -v
        return v ** m / m
    return f


def _conditional_power(fbar, w, tau, rule: QuadratureRule):
    """E[fbar(w + sqrt(tau) N)] per point w, N standard normal."""
    if tau <= 0:
        return fbar(w)
    nodes = rule.nodes * math.sqrt(tau)
    vals = fbar(w[:, None] + nodes[None, :])
    return vals @ rule.weights


def _check_moment(xi_m: np.ndarray):
    if not np.all(np.isfinite(xi_m)):
        raise NumericDomain("terminal power moment is not finite on the "
                            "sampled paths")


def solve_canonical(delta: float, terminal: Terminal, paths: PathBundle,
                    n_quad: int = 64) -> BSDESolution:
    """Exact solution of the BSDE with generator delta*|z|^2/y and terminal
    xi = terminal(W_T): Y_t = (E[xi^m | F_t])^{1/m}, evaluated per node by
    Gauss-Hermite quadrature over the independent increment.
    """
    if paths.dim != 1:
        raise Unsupported("solve_canonical supports dim=1")
    pt = PowerTransform(delta)
    m = pt.m
    grid = paths.grid
    ts = grid.nodes()
    W = paths.w1
    xiT = terminal.sample(W[:, -1])
    sgn = terminal.check_sign(W[:, -1])
    mirrored = sgn < 0
    if mirrored and not pt.odd_integer:
        raise BranchError("negative terminal needs an odd integer exponent "
                          "m = 2*delta + 1")
    fbar = _terminal_bar(terminal, m, mirrored)
    _check_moment(fbar(W[:, -1]))
    rule = gauss_hermite(n_quad)

    n_paths, n_nodes = W.shape
    Y = np.empty((n_paths, n_nodes))
    Z = np.empty((n_paths, n_nodes))
    T = ts[-1]
    for i, t in enumerate(ts):
        tau = T - t
        wbar = _conditional_power(fbar, W[:, i], tau, rule)
        if not np.all(np.isfinite(wbar)):
            raise NumericDomain("conditional power moment overflowed under "
                                "the quadrature tails")
        if np.any(wbar <= 0):
            raise BranchError("conditional power moment lost positivity")
        Y[:, i] = (m * wbar) ** (1.0 / m)
        if terminal.kind == "exp_affine":
            Z[:, i] = terminal.a1 * Y[:, i]
        elif terminal.kind == "const":
            Z[:, i] = 0.0
        else:
            dw = 1e-4 * (1.0 + np.abs(W[:, i]))
            up = _conditional_power(fbar, W[:, i] + dw, tau, rule)
            dn = _conditional_power(fbar, W[:, i] - dw, tau, rule)
            # Z = d/dw (m wbar)^{1/m} = (m wbar)^{1/m-1} * d wbar/dw
            Z[:, i] = (m * wbar) ** (1.0 / m - 1.0) * (up - dn) / (2 * dw)
    if mirrored:
        Y, Z = -Y, -Z
    y0 = float(Y[0, 0])
    sol = BSDESolution(grid=grid, y=Y, z=Z, y0=y0, se=0.0,
                       method="transform-exact",
                       diagnostics={"n_quad": n_quad, "exponent_m": m},
                       states=W)
    return sol


def solve_gclass_exact(spec: GeneratorSpec, terminal: Terminal,
                       paths: PathBundle, n_quad: int = 64,
                       mode: str = "shift") -> BSDESolution:
    """Exact solution for generators beta*y + gamma*z + delta*|z|^2/y (alpha
    must vanish): the transformed field is linear, so
    Ybar_t = F(t,T) * E_{Q}[xibar | F_t] with F the integrating factor of
    m*beta and Q the measure under which W has drift gamma.

    mode="shift" realizes Q by shifting the quadrature mean (exact);
    mode="weights" reweights sampled increments by the Girsanov likelihood
    (Monte-Carlo in the time direction, used as a consistency check).
    """
    if paths.dim != 1:
        raise Unsupported("solve_gclass_exact supports dim=1")
    if spec.dim != 1:
        raise Unsupported("solve_gclass_exact supports dim=1 generators")
    if not spec.is_gclass:
        raise Unsupported("exact solve needs the dominating-class form; "
                          "use the LSMC engine for custom generators")
    ts_check = np.linspace(paths.grid.t0, paths.grid.T, 33)
    if any(abs(spec.alpha_at(t)) > 1e-12 for t in ts_check):
        raise Unsupported("exact solve requires alpha == 0; "
                          "sandwich_bounds brackets the alpha != 0 case")
    if mode not in ("shift", "weights"):
        raise InvalidArgument("mode must be 'shift' or 'weights'")

    pt = PowerTransform(spec.delta)
    m = pt.m
    grid = paths.grid
    ts = grid.nodes()
    T = ts[-1]
    W = paths.w1
    sgn = terminal.check_sign(W[:, -1])
    mirrored = sgn < 0
    if mirrored and not pt.odd_integer:
        raise BranchError("negative terminal needs an odd integer "
                          "exponent m = 2*delta + 1")
    if mirrored != (spec.sign == "negative"):
        raise BranchError("terminal sign does not match the spec branch")
    fbar = _terminal_bar(terminal, m, mirrored)
    _check_moment(fbar(W[:, -1]))
    fac = IntegratingFactor(rate=lambda t: m * spec.beta_at(t),
                            t0=grid.t0, T=T)
    gshift = IntegratingFactor(rate=spec.gamma_at, t0=grid.t0, T=T)
    rule = gauss_hermite(n_quad)

    n_paths, n_nodes = W.shape
    if mode == "weights" and n_paths > 20000:
        raise Unsupported("weights mode pairs every node state with every "
                          "sampled future (O(n_paths^2)); keep n_paths <= "
                          "20000 or use mode='shift'")
    Y = np.empty((n_paths, n_nodes))
    Z = np.empty((n_paths, n_nodes))
    h = grid.h
    se = 0.0
    for i, t in enumerate(ts):
        tau = T - t
        F = fac.factor(t, T)
        if mode == "shift" or tau == 0:
            shift = gshift.cumulative(T) - gshift.cumulative(t)
            wq = _conditional_power(lambda x: fbar(x + shift), W[:, i], tau,
                                    rule)
        else:
            # likelihood-weighted average over the bundle's future increments
            dwf = paths.dw1[:, i:]
            gam = np.array([spec.gamma_at(s) for s in ts[i:-1]])
            logL = dwf @ gam - 0.5 * float(gam @ gam) * h
            L = np.exp(logL)
            L /= L.mean()
            incr = dwf.sum(axis=1)
            vals = fbar(W[:, i][:, None] + incr[None, :])
            wq = (vals * L[None, :]).mean(axis=1)
            if i == 0:
                # all paths share W_0, so row 0 is the node-0 sample set
                s0 = vals[0] * L
                se_w = float(np.std(s0) / math.sqrt(n_paths))
                se = (m * F * wq[0]) ** (1.0 / m - 1.0) * F * se_w
        wbar = F * wq
        if not np.all(np.isfinite(wbar)):
            raise NumericDomain("conditional power moment overflowed under "
                                "the quadrature tails")
        if np.any(wbar <= 0):
            raise BranchError("conditional power moment lost positivity")
        Y[:, i] = (m * wbar) ** (1.0 / m)
        if terminal.kind == "exp_affine" and mode == "shift":
            Z[:, i] = terminal.a1 * Y[:, i]
        elif terminal.kind == "const":
            Z[:, i] = 0.0
        else:
            dw = 1e-4 * (1.0 + np.abs(W[:, i]))
            if mode == "shift" or tau == 0:
                shift = gshift.cumulative(T) - gshift.cumulative(t)
                up = _conditional_power(lambda x: fbar(x + shift),
                                        W[:, i] + dw, tau, rule)
                dn = _conditional_power(lambda x: fbar(x + shift),
                                        W[:, i] - dw, tau, rule)
            else:
                up = (fbar((W[:, i] + dw)[:, None] + incr[None, :])
                      * L[None, :]).mean(axis=1)
                dn = (fbar((W[:, i] - dw)[:, None] + incr[None, :])
                      * L[None, :]).mean(axis=1)
            Z[:, i] = (m * wbar) ** (1.0 / m - 1.0) * F * (up - dn) / (2 * dw)
    if mirrored:
        Y, Z = -Y, -Z
    y0 = float(Y[0, 0])
    return BSDESolution(grid=grid, y=Y, z=Z, y0=y0, se=se,
                        method="transform-exact" if mode == "shift"
                        else "transform-weighted",
                        diagnostics={"n_quad": n_quad, "exponent_m": m,
                                     "mode": mode},
                        states=W)


@dataclass(frozen=True)
class SandwichBounds:
    """Transformed-scale envelope mapped back to the original scale: at every
    node, lower <= Y <= upper for any generator dominated by the spec."""

    grid: object
    lower: np.ndarray
    upper: np.ndarray
    lower0: float
    upper0: float


def sandwich_bounds(spec: GeneratorSpec, terminal: Terminal,
                    paths: PathBundle, n_quad: int = 64) -> SandwichBounds:
    """Two-sided bounds for the alpha != 0 case.

    On the transformed scale ybar = u(y):
      lower:  E_Q[xibar | F_t]  (drop alpha and beta)
      upper:  F(t,T) E_Q[xibar | F_t] + m * int_t^T F(t,s) alpha(s) ds
    with F the integrating factor of m*(alpha+beta) and Q the gamma-drifted
    measure. Both are mapped back through the inverse transform.
    """
    if paths.dim != 1:
        raise Unsupported("sandwich_bounds supports dim=1")
    if not spec.is_gclass:
        raise Unsupported("bounds are defined for the dominating-class form")
    if spec.sign != "positive":
        raise BranchError("bounds are stated on the positive branch")
    pt = PowerTransform(spec.delta)
    m = pt.m
    grid = paths.grid
    ts = grid.nodes()
    T = ts[-1]
    W = paths.w1
    if terminal.check_sign(W[:, -1]) < 0:
        raise BranchError("terminal must be positive for sandwich bounds")
    fbar = _terminal_bar(terminal, m, False)
    _check_moment(fbar(W[:, -1]))
    fac = IntegratingFactor.from_spec(spec, grid.t0, T)
    gshift = IntegratingFactor(rate=spec.gamma_at, t0=grid.t0, T=T)
    rule = gauss_hermite(n_quad)

    n_paths, n_nodes = W.shape
    lower = np.empty((n_paths, n_nodes))
    upper = np.empty((n_paths, n_nodes))
    squad = np.linspace(grid.t0, T, 513)
    for i, t in enumerate(ts):
        tau = T - t
        shift = gshift.cumulative(T) - gshift.cumulative(t)
        wq = _conditional_power(lambda x: fbar(x + shift), W[:, i], tau, rule)
        if not np.all(np.isfinite(wq)):
            raise NumericDomain("conditional power moment overflowed under "
                                "the quadrature tails")
        if np.any(wq <= 0):
            raise BranchError("conditional power moment lost positivity")
        mask = squad >= t
        ss = squad[mask]
        integ = np.array([fac.factor(t, s) * spec.alpha_at(s) for s in ss])
        trapezoid = getattr(np, "trapezoid", None) or np.trapz
        source = m * float(trapezoid(integ, ss)) if len(ss) > 1 else 0.0
        lower[:, i] = inverse(pt, wq)
        upper[:, i] = inverse(pt, fac.factor(t, T) * wq + source)
    return SandwichBounds(grid=grid, lower=lower, upper=upper,
                          lower0=float(lower[0, 0]), upper0=float(upper[0, 0]))

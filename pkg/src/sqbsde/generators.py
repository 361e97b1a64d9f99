"""Generators H dominated by g(t,y,z) = alpha + beta*y + gamma.z + delta|z|^2/y.

The dominating class has a closed-form convex conjugate and closed-form
truncations; custom generators get sampled domination checks and lattice
conjugation. The negative branch is realized through the mirror
H~(t,y,z) = -H(t,-y,-z), which requires 2*delta+1 to be an odd integer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from . import _kernels
from .core import PathBundle, Terminal
from .errors import InvalidArgument, Singularity, Unsupported

_FEAS_TOL = 1e-12


def as_coeff(c) -> Callable[[float], float]:
    """Normalize a constant, callable, or Expr of t into a callable of t."""
    if callable(c) and not hasattr(c, "node"):
        return c
    if hasattr(c, "node"):  # Expr
        from . import expr as _expr

        return lambda t: _expr.eval(c, {"t": t})
    v = float(c)
    return lambda t: v


@dataclass
class GeneratorSpec:
    """Generator description; immutable by convention after construction."""

    delta: float
    alpha: object = 0.0
    beta: object = 0.0
    gamma: object = 0.0
    custom: Optional[Callable] = None  # H(t, y, z), numpy-vectorized in y,z
    sign: str = "positive"
    dim: int = 1

    def __post_init__(self):
        if self.delta < 0:
            raise InvalidArgument("delta must be >= 0")
        if self.sign not in ("positive", "negative"):
            raise InvalidArgument("sign must be 'positive' or 'negative'")
        if self.sign == "negative":
            m = 2 * self.delta + 1
            if abs(m - round(m)) > 1e-12 or round(m) % 2 == 0:
                raise InvalidArgument(
                    "negative branch requires 2*delta+1 to be an odd integer"
                )
        self._alpha = as_coeff(self.alpha)
        self._beta = as_coeff(self.beta)
        self._gamma = as_coeff(self.gamma)
        if self.custom is not None:
            self._check_domination()

    # coefficient accessors ------------------------------------------------

    def alpha_at(self, t: float) -> float:
        return float(self._alpha(t))

    def beta_at(self, t: float) -> float:
        return float(self._beta(t))

    def gamma_at(self, t: float):
        g = self._gamma(t)
        if self.dim == 1:
            return float(np.asarray(g).reshape(()))
        return np.asarray(g, dtype=float)

    @property
    def m(self) -> float:
        """The power-transform exponent 2*delta + 1."""
        return 2.0 * self.delta + 1.0

    @property
    def is_gclass(self) -> bool:
        return self.custom is None

    def coeffs_nonnegative(self, ts) -> bool:
        return all(self.alpha_at(t) >= 0 and self.beta_at(t) >= 0 for t in ts)

    def _check_domination(self):
        # sampled 0 <= H <= g on a fixed positive-branch lattice
        ts = np.linspace(0.0, 1.0, 5)
        ys = np.logspace(-1, 1, 7)
        zs = np.linspace(-10.0, 10.0, 9)
        Y, Z = np.meshgrid(ys, zs)
        for t in ts:
            h = np.asarray(self.custom(t, Y, Z), dtype=float)
            g = (self.alpha_at(t) + self.beta_at(t) * Y
                 + self.gamma_at(t) * Z + self.delta * Z * Z / Y)
            if np.any(h > g + 1e-9 * (1 + np.abs(g))):
                raise InvalidArgument(
                    "custom generator exceeds its dominating envelope "
                    "on the test lattice"
                )
            if np.any(h < -1e-9):
                raise InvalidArgument(
                    "custom generator is negative on the positive-branch lattice"
                )

    def eval_custom(self, t, y, z):
        return np.asarray(self.custom(t, y, z), dtype=float)


@dataclass(frozen=True)
class ConjugateValue:
    value: float
    feasible: bool


@dataclass
class AssumptionReport:
    lambda_fn: Callable[[float], float]
    p: float
    q: float
    r: float
    estimates: Dict[str, float] = field(default_factory=dict)
    passes: Dict[str, bool] = field(default_factory=dict)

    @property
    def all_pass(self) -> bool:
        return all(self.passes.values())


def eval_g(spec: GeneratorSpec, t: float, y, z):
    """The dominating generator at (t, y, z); mirrored on the negative branch."""
    y_arr = np.asarray(y, dtype=float)
    z_arr = np.asarray(z, dtype=float)
    if np.any(y_arr == 0.0):
        raise Singularity("generator undefined at y = 0")
    if spec.sign == "negative":
        if np.any(y_arr > 0):
            raise InvalidArgument("negative branch requires y < 0")
        # mirror: -H(t, -y, -z) with the positive-branch formula
        inner = _g_formula(spec, t, -y_arr, -z_arr)
        out = -inner
    else:
        if np.any(y_arr < 0):
            raise InvalidArgument("positive branch requires y > 0")
        out = _g_formula(spec, t, y_arr, z_arr)
    if np.ndim(y) == 0 and np.ndim(z) == 0:
        return float(out)
    return out


def _g_formula(spec, t, y, z):
    gam = spec.gamma_at(t)
    if spec.dim == 1:
        gz = gam * z
        z2 = z * z
    else:
        gz = np.tensordot(np.asarray(z), gam, axes=([-1], [0]))
        z2 = np.sum(np.asarray(z) ** 2, axis=-1)
    return spec.alpha_at(t) + spec.beta_at(t) * y + gz + spec.delta * z2 / y


def conjugate(spec: GeneratorSpec, t: float, b: float, a) -> ConjugateValue:
    """H*(t,b,a) = sup_{y>0,z} (b*y + a.z - H(t,y,z)).

    Closed form for the dominating class: value -alpha(t), feasible iff
    b <= beta(t) - |a-gamma(t)|^2/(4*delta). Custom generators use a
    documented lattice supremum with divergence detection.
    """
    a_arr = np.atleast_1d(np.asarray(a, dtype=float))
    gam = np.atleast_1d(np.asarray(spec.gamma_at(t), dtype=float))
    if spec.is_gclass:
        d2 = float(np.sum((a_arr - gam) ** 2))
        if spec.delta > 0:
            feasible = b <= spec.beta_at(t) - d2 / (4 * spec.delta) + _FEAS_TOL
        else:
            feasible = (b <= spec.beta_at(t) + _FEAS_TOL) and d2 <= _FEAS_TOL
        value = -spec.alpha_at(t) if feasible else math.inf
        return ConjugateValue(value=value, feasible=bool(feasible))
    return _conjugate_lattice(spec, t, b, a_arr)


def _conjugate_lattice(spec, t, b, a_arr):
    # z reduced to its component along (a - gamma); sup on nested lattices,
    # flagged infeasible if the sup keeps growing with the lattice bound
    if spec.dim != 1:
        raise Unsupported("lattice conjugation implemented for dim=1")
    a = float(a_arr[0])

    def lattice_sup(ybound, zbound):
        ys = np.concatenate([np.logspace(-3, math.log10(ybound), 41)])
        zs = np.linspace(-zbound, zbound, 81)
        Y, Z = np.meshgrid(ys, zs)
        H = spec.eval_custom(t, Y, Z)
        return float(np.max(b * Y + a * Z - H))

    s1 = lattice_sup(1e2, 25.0)
    s2 = lattice_sup(1e3, 50.0)
    if s2 > s1 + 1e-6 * (1 + abs(s1)):
        return ConjugateValue(value=math.inf, feasible=False)
    return ConjugateValue(value=s2, feasible=True)


def truncate_sup(spec: GeneratorSpec, n: float) -> Callable:
    """n-Lipschitz truncation from below via the constrained conjugate sup.

    Returns Hn(t, y, z) accepting scalars or arrays; Hn <= H on the
    positive branch and increases to H pointwise as n grows.
    """
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if not spec.is_gclass:
        raise Unsupported("sup-truncation requires the dominating-class form")
    if spec.dim != 1:
        raise Unsupported("truncation ladder implemented for dim=1")

    def Hn(t, y, z):
        y_b, z_b = np.broadcast_arrays(np.asarray(y, dtype=float),
                                       np.asarray(z, dtype=float))
        y_arr, z_arr = y_b.ravel(), z_b.ravel()
        gam = spec.gamma_at(t)
        zmag = np.abs(z_arr)
        gdz = gam * z_arr
        g1 = gam  # gamma . zhat for sign(z) = +1; sign handled via |z|
        # align p with sign(z): substitute p -> p*sign(z) keeps |a| form when
        # gamma and z are colinear scalars; fold sign into g1 per point is
        # equivalent to using |z| and g1*sign(z). Evaluate per sign group.
        out = np.empty(y_arr.shape)
        for sgn in (-1.0, 1.0):
            m = np.sign(z_arr) == sgn
            if not np.any(m):
                continue
            out[m] = _kernels.trunc_sup_eval(
                y_arr[m], zmag[m], gdz[m], sgn * gam, gam * gam,
                spec.alpha_at(t), spec.beta_at(t), spec.delta, float(n),
            )
        m = z_arr == 0
        if np.any(m):
            out[m] = _kernels.trunc_sup_eval(
                y_arr[m], zmag[m], gdz[m], 0.0, gam * gam,
                spec.alpha_at(t), spec.beta_at(t), spec.delta, float(n),
            )
        if np.ndim(y) == 0 and np.ndim(z) == 0:
            return float(out[0])
        return out.reshape(np.broadcast_shapes(np.shape(y), np.shape(z)))

    Hn.lipschitz = float(n)
    Hn.kind = "sup"
    return Hn


def truncate_infconv(spec: GeneratorSpec, n: float) -> Callable:
    """n-Lipschitz truncation by inf-convolution with n * euclidean distance.

    Finite everywhere (H >= 0 on its domain); increases to H pointwise.
    Implemented for gamma == 0.
    """
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if not spec.is_gclass:
        raise Unsupported("inf-convolution requires the dominating-class form")
    if spec.dim != 1:
        raise Unsupported("truncation ladder implemented for dim=1")

    def Hn(t, y, z):
        if abs(spec.gamma_at(t)) > 0:
            raise Unsupported("inf-convolution ladder implemented for gamma = 0")
        y_b, z_b = np.broadcast_arrays(np.asarray(y, dtype=float),
                                       np.asarray(z, dtype=float))
        y_arr, z_arr = y_b.ravel(), z_b.ravel()
        out = _kernels.trunc_infconv_eval(
            y_arr, np.abs(z_arr), spec.alpha_at(t), spec.beta_at(t),
            spec.delta, float(n),
        )
        if np.ndim(y) == 0 and np.ndim(z) == 0:
            return float(out[0])
        return out.reshape(np.broadcast_shapes(np.shape(y), np.shape(z)))

    Hn.lipschitz = float(n)
    Hn.kind = "infconv"
    return Hn


def _hill_index(samples: np.ndarray) -> float:
    """Hill tail-index estimate on the top 5% order statistics.

    Larger is lighter-tailed; values <= 1 suggest an infinite mean.
    Degenerate (constant or tiny) samples return +inf.
    """
    x = np.sort(np.abs(np.asarray(samples, dtype=float)))
    k = max(20, x.size // 20)
    if x.size < 2 * k or x[-1] <= 0:
        return math.inf
    tail = x[-k:]
    x0 = tail[0]
    if x0 <= 0 or np.all(tail == x0):
        return math.inf
    logs = np.log(tail / x0)
    mean = float(np.mean(logs[1:])) if logs.size > 1 else 0.0
    if mean <= 0:
        return math.inf
    return 1.0 / mean


def check_assumptions(spec: GeneratorSpec, terminal: Terminal, p: float,
                      r: float, paths: PathBundle) -> AssumptionReport:
    """Sampled integrability report for the standing moment conditions.

    Estimates E[xi^{(2d+1)p} e^{p int lambda}], E[(int e^{int lambda/2} alpha)^p]
    and E[e^{q int gamma dW}] on the bundle, with a Hill-type tail heuristic.
    Advisory: finiteness cannot be decided from samples.
    """
    if paths.dim != 1:
        raise Unsupported("check_assumptions implemented for dim=1 bundles")
    if p <= 1:
        raise InvalidArgument("p must be > 1")
    rmax = 0.5 * min(1.0, p - 1.0)
    if not (0 < r < rmax):
        raise InvalidArgument(f"r must lie in (0, {rmax}) for p={p}")
    q = p / (p - 1.0)
    m = spec.m

    def lam(t: float) -> float:
        g = spec.gamma_at(t)
        g2 = float(np.sum(np.atleast_1d(g) ** 2))
        return m * (spec.alpha_at(t) + spec.beta_at(t)) + g2 / (2 * r)

    ts = paths.grid.nodes()
    lam_vals = np.array([lam(t) for t in ts])
    alpha_vals = np.array([spec.alpha_at(t) for t in ts])
    cum_lam = np.concatenate([[0.0], np.cumsum(
        0.5 * (lam_vals[1:] + lam_vals[:-1]) * np.diff(ts))])
    int_lam = cum_lam[-1]

    W = paths.w1
    xi = terminal.sample(W[:, -1])
    s1 = np.abs(xi) ** (m * p) * math.exp(p * int_lam)
    e1 = float(np.mean(s1))

    # deterministic coefficient integral
    trapezoid = getattr(np, "trapezoid", None) or np.trapz
    integrand = np.exp(0.5 * cum_lam) * alpha_vals
    int_alpha = float(trapezoid(integrand, ts))
    e2 = int_alpha ** p

    gam_vals = np.array([float(np.atleast_1d(spec.gamma_at(t))[0])
                         for t in ts[:-1]])
    s3 = np.exp(q * paths.dw1 @ gam_vals)
    e3 = float(np.mean(s3))

    hill1 = _hill_index(s1)
    hill3 = _hill_index(s3)
    estimates = {
        "terminal_moment": e1,
        "coefficient_integral": e2,
        "girsanov_moment": e3,
        "terminal_tail_index": hill1,
        "girsanov_tail_index": hill3,
    }
    passes = {
        "terminal_moment": math.isfinite(e1) and hill1 > 1.2,
        "coefficient_integral": math.isfinite(e2),
        "girsanov_moment": math.isfinite(e3) and hill3 > 1.2,
    }
    return AssumptionReport(lambda_fn=lam, p=p, q=q, r=r,
                            estimates=estimates, passes=passes)

"""Forward simulation: Euler-Maruyama paths, projected Euler for reflected
diffusions on convex domains (interval or ball) with accumulated local time,
and flow-continuity diagnostics under common random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .core import PathBundle
from .errors import BlowUp, InvalidArgument, Unsupported
from .expr import Expr

_BLOWUP = 1e12


def _as_spacetime(c) -> Callable:
    """Normalize a coefficient (scalar, callable, or expression in t,x) to a
    callable (t, x) -> array."""
    if isinstance(c, Expr):
        extra = set(c.variables()) - {"t", "x"}
        if extra:
            raise InvalidArgument(
                f"coefficient expression uses unknown variables {sorted(extra)}")
        return lambda t, x: c(t=t, x=x)
    if callable(c):
        return c
    val = float(c)
    return lambda t, x: np.full_like(np.asarray(x, dtype=float), val)


def _is_const(c) -> Optional[float]:
    if isinstance(c, Expr):
        if not c.variables():
            return float(c())
        return None
    if callable(c):
        return None
    return float(c)


@dataclass(frozen=True)
class ConvexDomain:
    """Interval [a,b] or ball(center, radius), with the signed distance phi
    (positive inside, zero on the boundary) and a closed-form projection."""

    kind: str
    a: float = 0.0
    b: float = 1.0
    center: np.ndarray = None
    radius: float = 1.0

    def __post_init__(self):
        if self.kind not in ("interval", "ball"):
            raise InvalidArgument("domain kind must be 'interval' or 'ball'")
        if self.kind == "interval" and not self.a < self.b:
            raise InvalidArgument("interval needs a < b")
        if self.kind == "ball":
            c = np.atleast_1d(np.asarray(
                self.center if self.center is not None else 0.0, dtype=float))
            object.__setattr__(self, "center", c)
            if self.radius <= 0:
                raise InvalidArgument("ball needs radius > 0")

    @staticmethod
    def interval(a: float, b: float) -> "ConvexDomain":
        return ConvexDomain(kind="interval", a=a, b=b)

    @staticmethod
    def ball(center, radius: float) -> "ConvexDomain":
        return ConvexDomain(kind="ball", center=np.asarray(center, dtype=float),
                            radius=radius)

    def phi(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "interval":
            return np.minimum(x - self.a, self.b - x)
        d = np.linalg.norm(np.atleast_2d(x) - self.center[None, :], axis=-1)
        out = self.radius - d
        return out if x.ndim > 1 else float(out[0])

    def contains(self, x, tol: float = 0.0) -> bool:
        return bool(np.all(np.asarray(self.phi(x)) >= -tol))

    def project(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "interval":
            return np.clip(x, self.a, self.b)
        flat = np.atleast_2d(x) - self.center[None, :]
        d = np.linalg.norm(flat, axis=-1, keepdims=True)
        scale = np.where(d > self.radius, self.radius / np.where(d == 0, 1, d),
                         1.0)
        out = self.center[None, :] + flat * scale
        return out.reshape(x.shape)


@dataclass(frozen=True)
class DiffusionSpec:
    """dX = mu(t,X)dt + sigma(t,X)dW, optionally confined to a convex domain.

    mu and sigma are scalars, callables, or expressions in (t, x); a sampled
    lattice check rejects superlinear growth at construction.
    """

    mu: object = 0.0
    sigma: object = 1.0
    dim: int = 1
    domain: Optional[ConvexDomain] = None

    def __post_init__(self):
        if self.dim != 1:
            raise Unsupported("DiffusionSpec currently supports dim=1")
        mu_fn = _as_spacetime(self.mu)
        sg_fn = _as_spacetime(self.sigma)
        object.__setattr__(self, "_mu_fn", mu_fn)
        object.__setattr__(self, "_sg_fn", sg_fn)
        self._check_linear_growth()

    def mu_at(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self._mu_fn(t, x), dtype=float)
        # constant expressions fold to scalars; keep the x shape
        return out if out.shape == x.shape else np.full(x.shape, float(out))

    def sigma_at(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.asarray(self._sg_fn(t, x), dtype=float)
        return out if out.shape == x.shape else np.full(x.shape, float(out))

    def _check_linear_growth(self):
        xs = np.linspace(-100.0, 100.0, 41)
        worst_far = 0.0
        worst_near = 0.0
        for t in (0.0, 0.25, 0.5, 0.75, 1.0):
            r = (np.abs(self.mu_at(t, xs)) + np.abs(self.sigma_at(t, xs))) \
                / (1.0 + np.abs(xs))
            if not np.all(np.isfinite(r)):
                raise InvalidArgument("drift/volatility not finite on the "
                                      "growth-check lattice")
            near = r[np.abs(xs) <= 10.0].max()
            worst_far = max(worst_far, float(r.max()))
            worst_near = max(worst_near, float(near))
        if worst_far > 4.0 * max(worst_near, 1e-12):
            raise InvalidArgument(
                "drift/volatility grow superlinearly on the sampled lattice "
                f"(ratio {worst_far:.3g} vs near-origin {worst_near:.3g})")


@dataclass(frozen=True)
class ReflectedPath:
    states: np.ndarray       # (n_paths, n_nodes)
    local_time: np.ndarray   # (n_paths, n_nodes), nondecreasing
    contact: np.ndarray      # boolean, where the projection acted
    domain: ConvexDomain
    grid: object


def _check_finite(X, i):
    bad = ~np.isfinite(X)
    if np.any(np.abs(np.where(bad, np.inf, X)) > _BLOWUP) or np.any(bad):
        idx = np.where(bad | (np.abs(X) > _BLOWUP))[0]
        p = int(idx[0])
        raise BlowUp(f"state exploded on path {p} at step {i}",
                     path=p, step=i)


def euler(spec: DiffusionSpec, t0: float, x0: float,
          paths: PathBundle) -> np.ndarray:
    """Euler-Maruyama states, shape (n_paths, n_nodes). Column 0 equals x0;
    grid times come from the bundle (its grid must start at t0)."""
    if spec.domain is not None:
        raise InvalidArgument("spec has a domain; use euler_reflected")
    if paths.dim != 1:
        raise Unsupported("euler supports dim=1 bundles")
    grid = paths.grid
    if abs(grid.t0 - t0) > 1e-12:
        raise InvalidArgument("bundle grid does not start at t0")
    h = grid.h
    dW = paths.dw1
    mu_c = _is_const(spec.mu)
    sg_c = _is_const(spec.sigma)
    if mu_c is not None and sg_c is not None:
        X = _kernels.euler_const(float(x0), mu_c, sg_c, dW, h)
        _check_finite(X[:, -1], grid.n_steps)
        return X
    ts = grid.nodes()
    n_paths = paths.n_paths
    X = np.empty((n_paths, grid.n_steps + 1))
    X[:, 0] = x0
    for i in range(grid.n_steps):
        x = X[:, i]
        X[:, i + 1] = x + spec.mu_at(ts[i], x) * h \
            + spec.sigma_at(ts[i], x) * dW[:, i]
        _check_finite(X[:, i + 1], i + 1)
    return X


def euler_reflected(spec: DiffusionSpec, t0: float, x0: float,
                    paths: PathBundle) -> ReflectedPath:
    """Projected Euler: predictor step, then closed-form projection onto the
    domain; the projection displacement accumulates into the local time."""
    if spec.domain is None:
        raise InvalidArgument("euler_reflected needs a domain on the spec")
    dom = spec.domain
    if dom.kind != "interval":
        raise Unsupported("reflected simulation supports interval domains")
    if not dom.contains(np.asarray([x0])):
        raise InvalidArgument("x0 is outside the domain closure")
    if paths.dim != 1:
        raise Unsupported("euler_reflected supports dim=1 bundles")
    grid = paths.grid
    if abs(grid.t0 - t0) > 1e-12:
        raise InvalidArgument("bundle grid does not start at t0")
    h = grid.h
    dW = paths.dw1
    mu_c = _is_const(spec.mu)
    sg_c = _is_const(spec.sigma)
    if mu_c is not None and sg_c is not None:
        X, K = _kernels.euler_reflected_interval(
            float(x0), mu_c, sg_c, dW, h, dom.a, dom.b)
    else:
        ts = grid.nodes()
        n_paths = paths.n_paths
        X = np.empty((n_paths, grid.n_steps + 1))
        K = np.zeros((n_paths, grid.n_steps + 1))
        X[:, 0] = x0
        for i in range(grid.n_steps):
            x = X[:, i]
            pred = x + spec.mu_at(ts[i], x) * h \
                + spec.sigma_at(ts[i], x) * dW[:, i]
            proj = np.clip(pred, dom.a, dom.b)
            X[:, i + 1] = proj
            K[:, i + 1] = K[:, i] + np.abs(proj - pred)
    contact = np.zeros_like(X, dtype=bool)
    contact[:, 1:] = np.diff(K, axis=1) > 0
    contact[:, 0] = float(np.min(dom.phi(np.atleast_1d(x0)))) <= 0
    return ReflectedPath(states=X, local_time=K, contact=contact,
                         domain=dom, grid=grid)


def _energy_distance_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| from sorted samples."""
    def mean_abs_self(a):
        a = np.sort(a)
        n = a.shape[0]
        i = np.arange(n)
        return 2.0 * float(np.sum((2 * i + 1 - n) * a)) / (n * n)

    def mean_abs_cross(a, b):
        a = np.sort(a)
        ca = np.concatenate([[0.0], np.cumsum(a)])
        n = a.shape[0]
        pos = np.searchsorted(a, b)
        # sum_i |a_i - t| = t*pos - ca[pos] + (ca[n]-ca[pos]) - t*(n-pos)
        s = b * pos - ca[pos] + (ca[n] - ca[pos]) - b * (n - pos)
        return float(np.mean(s) / n)

    return 2.0 * mean_abs_cross(x, y) - mean_abs_self(x) - mean_abs_self(y)


def _simulate_held(spec, t_start, x_start, paths):
    """Paths that sit at x_start until t_start, then evolve with the bundle's
    increments from the first node at or after t_start (common noise)."""
    grid = paths.grid
    ts = grid.nodes()
    i0 = int(np.searchsorted(ts, t_start - 1e-12))
    h = grid.h
    dW = paths.dw1
    n_paths = paths.n_paths
    X = np.empty((n_paths, grid.n_steps + 1))
    X[:, : i0 + 1] = x_start
    dom = spec.domain
    for i in range(i0, grid.n_steps):
        x = X[:, i]
        pred = x + spec.mu_at(ts[i], x) * h + spec.sigma_at(ts[i], x) * dW[:, i]
        X[:, i + 1] = dom.project(pred) if dom is not None else pred
        _check_finite(X[:, i + 1], i + 1)
    return X, i0


def flow_continuity_test(spec: DiffusionSpec,
                         starts: Sequence[Tuple[float, float]],
                         target: Tuple[float, float],
                         paths: PathBundle) -> dict:
    """Distance between the flows from perturbed starts and from the target
    start, under common random numbers.

    Strong metric: sup over shared nodes of the RMS state gap. Law metric:
    energy distance between the terminal samples. Both sequences are reported
    with a nonincreasing-within-slack flag (15% relative slack).
    """
    t_ref, x_ref = target
    X_ref, i_ref = _simulate_held(spec, t_ref, x_ref, paths)
    rows = []
    for (tn, xn) in starts:
        Xn, i_n = _simulate_held(spec, tn, xn, paths)
        i0 = max(i_ref, i_n)
        gap = Xn[:, i0:] - X_ref[:, i0:]
        strong = float(np.sqrt(np.mean(gap ** 2, axis=0)).max())
        law = _energy_distance_1d(Xn[:, -1], X_ref[:, -1])
        rows.append({"t": tn, "x": xn, "strong_gap": strong,
                     "energy_distance": max(law, 0.0)})

    def nonincreasing(vals, slack=0.15):
        return all(vals[k + 1] <= vals[k] * (1 + slack) + 1e-15
                   for k in range(len(vals) - 1))

    strongs = [r["strong_gap"] for r in rows]
    laws = [r["energy_distance"] for r in rows]
    return {"rows": rows,
            "strong_monotone": nonincreasing(strongs),
            "law_monotone": nonincreasing(laws)}

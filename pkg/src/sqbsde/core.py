"""Time grids, seeded path bundles, Gaussian quadrature, terminal descriptors.

Everything stochastic in the package draws its randomness from a PathBundle
built here. Generation is chunked and each chunk is seeded by (seed, chunk
index), so regeneration is bit-identical regardless of how many workers
consume the bundle, and results never depend on chunk scheduling order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import BranchError, InvalidArgument, NumericDomain

_CHUNK = 16384


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [t0, T] with n_steps intervals."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (self.t0 < self.T):
            raise InvalidArgument(f"need t0 < T, got [{self.t0}, {self.T}]")
        if self.n_steps < 1:
            raise InvalidArgument("n_steps must be >= 1")

    @property
    def h(self) -> float:
        return (self.T - self.t0) / self.n_steps

    def nodes(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.n_steps + 1)


@dataclass(frozen=True)
class PathBundle:
    """Seeded ensemble of Brownian increments on a TimeGrid.

    increments has shape (n_paths, n_steps, dim) and already includes the
    drift shift a(t)*h when one was requested; drift_shift records it.
    """

    grid: TimeGrid
    dim: int
    n_paths: int
    seed: int
    increments: np.ndarray
    drift_shift: Optional[Callable[[float], float]] = None

    def brownian(self) -> np.ndarray:
        """Cumulative paths, shape (n_paths, n_steps+1, dim), starting at 0."""
        out = np.zeros((self.n_paths, self.grid.n_steps + 1, self.dim))
        np.cumsum(self.increments, axis=1, out=out[:, 1:, :])
        return out

    @property
    def w1(self) -> np.ndarray:
        """1-D cumulative paths, shape (n_paths, n_steps+1). Requires dim=1."""
        if self.dim != 1:
            raise InvalidArgument("w1 requires a one-dimensional bundle")
        return self.brownian()[:, :, 0]

    @property
    def dw1(self) -> np.ndarray:
        if self.dim != 1:
            raise InvalidArgument("dw1 requires a one-dimensional bundle")
        return self.increments[:, :, 0]


def make_paths(grid: TimeGrid, n_paths: int, seed: int, dim: int = 1,
               drift_shift: Optional[Callable] = None) -> PathBundle:
    """Generate a PathBundle; deterministic in all arguments.

    drift_shift, when given, is a function of t returning a scalar or a
    length-dim vector; a(t_i)*h is added to each step-i increment.
    """
    if n_paths < 1:
        raise InvalidArgument("n_paths must be >= 1")
    if dim < 1:
        raise InvalidArgument("dim must be >= 1")
    h = grid.h
    sqrth = math.sqrt(h)
    inc = np.empty((n_paths, grid.n_steps, dim))
    for k, start in enumerate(range(0, n_paths, _CHUNK)):
        stop = min(start + _CHUNK, n_paths)
        rng = np.random.default_rng([seed, k])
        inc[start:stop] = rng.standard_normal((stop - start, grid.n_steps, dim))
    inc *= sqrth
    if drift_shift is not None:
        ts = grid.nodes()[:-1]
        shift = np.array([np.broadcast_to(drift_shift(t), (dim,)) for t in ts],
                         dtype=float)
        inc += shift[None, :, :] * h
    inc.setflags(write=False)
    return PathBundle(grid=grid, dim=dim, n_paths=n_paths, seed=seed,
                      increments=inc, drift_shift=drift_shift)


# ---------------------------------------------------------------------------
# Gauss-Hermite quadrature for standard-normal expectations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadratureRule:
    kind: str
    n_nodes: int
    nodes: np.ndarray   # abscissae for a N(0,1) variable
    weights: np.ndarray  # normalized to sum to 1


def gauss_hermite(n_nodes: int = 64) -> QuadratureRule:
    """Rule such that sum(w_i * f(x_i)) approximates E f(Z), Z ~ N(0,1)."""
    if n_nodes < 1:
        raise InvalidArgument("n_nodes must be >= 1")
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    nodes = x * math.sqrt(2.0)
    weights = w / math.sqrt(math.pi)
    weights = weights / weights.sum()
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule("gauss-hermite", n_nodes, nodes, weights)


def gauss_expect(f: Callable, variance: float,
                 rule: Optional[QuadratureRule] = None) -> float:
    """E f(X) for X ~ N(0, variance), by Gauss-Hermite quadrature.

    f may be scalar or numpy-vectorized. Non-finite values at a node raise
    NumericDomain naming the node.
    """
    if variance < 0:
        raise InvalidArgument("variance must be >= 0")
    if rule is None:
        rule = gauss_hermite()
    pts = math.sqrt(variance) * rule.nodes
    vals = np.asarray(f(pts), dtype=float)
    if vals.shape != pts.shape:  # f was not vectorized
        vals = np.array([float(f(p)) for p in pts])
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.argmax(bad))
        raise NumericDomain(
            f"integrand non-finite at quadrature node x={pts[i]:.6g}",
            where=pts[i],
        )
    return float(vals @ rule.weights)


# ---------------------------------------------------------------------------
# terminal descriptors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Terminal:
    """Description of the terminal value as a function of the terminal state.

    kinds:
      const       xi = c
      exp_affine  xi = exp(a0 + a1*x)
      fn          xi = fn(x), fn numpy-vectorized
    exp_affine and const unlock closed-form conditional expectations and
    closed-form Z; generic fn falls back to quadrature/regression.
    """

    kind: str
    c: float = 0.0
    a0: float = 0.0
    a1: float = 0.0
    fn: Optional[Callable] = field(default=None, compare=False)
    label: str = ""

    @staticmethod
    def const(c: float) -> "Terminal":
        return Terminal(kind="const", c=float(c), label=f"const({c})")

    @staticmethod
    def exp_affine(a0: float, a1: float) -> "Terminal":
        return Terminal(kind="exp_affine", a0=float(a0), a1=float(a1),
                        label=f"exp({a0}+{a1}*x)")

    @staticmethod
    def from_fn(fn: Callable, label: str = "fn") -> "Terminal":
        return Terminal(kind="fn", fn=fn, label=label)

    def sample(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind == "const":
            return np.full(x.shape, self.c)
        if self.kind == "exp_affine":
            return np.exp(self.a0 + self.a1 * x)
        return np.asarray(self.fn(x), dtype=float)

    def check_sign(self, x: np.ndarray) -> int:
        """Return +1/-1 for strictly positive/negative samples, else raise."""
        v = self.sample(x)
        if np.all(v > 0):
            return 1
        if np.all(v < 0):
            return -1
        raise BranchError("terminal samples are not of one strict sign")

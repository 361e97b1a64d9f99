"""Hot numeric kernels in two interchangeable implementations.

Each public function dispatches to a numba-compiled scalar-loop version or a
vectorized pure-numpy version depending on the active backend (see _backend).
Both variants implement identical formulas; a parity test pins them together.

Kernels:
  trunc_sup_eval        pointwise sup-truncated generator (closed form)
  trunc_infconv_eval    pointwise inf-convolution truncation (nested golden)
  lsmc_gclass_update    fused per-node LSMC update (implicit root + carry)
  fd_step_interior      one explicit backward finite-difference step
  euler_const           constant-coefficient Euler paths
  euler_reflected_interval  projected Euler on an interval with local time
"""

import numpy as np

from ._backend import BACKEND, njit

_INVPHI = 0.6180339887498949  # (sqrt(5)-1)/2
_GOLDEN_ITERS = 90  # interval shrinks by ~1e-19, exhausts double precision
_NEG_INF = -1.0e300


# ---------------------------------------------------------------------------
# sup-truncation
#
# H^n(t,y,z) = alpha + sup{ b*y + a.z : |a|<=n, |b|<=n, b <= beta-|a-gamma|^2/(4 delta) }
#
# The optimal a lies in span{gamma, z}; writing a = gamma + p*zhat reduces the
# sup to one scalar p with a concave piecewise-quadratic objective, maximized
# exactly over {interval endpoints, clipped stationary point, cap kinks}.
# Inputs per point: y, |z|, gamma.z, g1 = gamma.zhat, g0 = |gamma|^2.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _sup_point(y, zmag, gdz, g1, g0, alpha, beta, delta, n):
    if delta == 0.0:
        # feasible a is exactly gamma; b ranges in [-n, min(n, beta)]
        if g0 > n * n:
            return _NEG_INF
        if y >= 0.0:
            return alpha + gdz + min(n, beta) * y
        return alpha + gdz - n * y
    if zmag == 0.0:
        # only the cap matters; take |a-gamma| as small as |a|<=n allows
        pmin = np.sqrt(g0) - n
        if pmin < 0.0:
            pmin = 0.0
        cap = beta - pmin * pmin / (4.0 * delta)
        if cap < -n:
            return _NEG_INF
        if y >= 0.0:
            return alpha + min(n, cap) * y
        return alpha - n * y
    disc = n * n - (g0 - g1 * g1)
    if disc <= 0.0:
        return _NEG_INF
    root = np.sqrt(disc)
    plo = -g1 - root
    phi = -g1 + root
    s = np.sqrt(4.0 * delta * (beta + n))  # cap(p) >= -n  <=>  |p| <= s
    if plo < -s:
        plo = -s
    if phi > s:
        phi = s
    if plo > phi:
        return _NEG_INF
    if y < 0.0:
        # b* = -n, objective linear increasing in p
        return alpha + gdz - n * y + phi * zmag
    # psi(p) = min(n, beta - p^2/(4 delta))*y + p*zmag is concave; its max is
    # at the smooth stationary point, a kink where the cap saturates, or an
    # interval endpoint. Evaluate all candidates exactly.
    best = _NEG_INF
    pbar = 2.0 * delta * zmag / y if y > 0.0 else phi
    cands = (plo, phi, min(max(pbar, plo), phi))
    for p in cands:
        v = min(n, beta - p * p / (4.0 * delta)) * y + p * zmag
        if v > best:
            best = v
    if beta > n:
        pn = np.sqrt(4.0 * delta * (beta - n))
        for p in (min(max(pn, plo), phi), min(max(-pn, plo), phi)):
            v = min(n, beta - p * p / (4.0 * delta)) * y + p * zmag
            if v > best:
                best = v
    return alpha + gdz + best


@njit(cache=True)
def _sup_eval_nb(ys, zmags, gdzs, g1, g0, alpha, beta, delta, n):
    out = np.empty(ys.shape[0])
    for i in range(ys.shape[0]):
        out[i] = _sup_point(ys[i], zmags[i], gdzs[i], g1, g0, alpha, beta, delta, n)
    return out


def _sup_eval_np(ys, zmags, gdzs, g1, g0, alpha, beta, delta, n):
    out = np.full(ys.shape[0], _NEG_INF)
    if delta == 0.0:
        if g0 > n * n:
            return out
        pos = ys >= 0.0
        out = alpha + gdzs + np.where(pos, min(n, beta) * ys, -n * ys)
        return out
    zzero = zmags == 0.0
    if np.any(zzero):
        pmin = max(np.sqrt(g0) - n, 0.0)
        cap = beta - pmin * pmin / (4.0 * delta)
        if cap >= -n:
            vals = np.where(ys >= 0.0, alpha + min(n, cap) * ys, alpha - n * ys)
            out = np.where(zzero, vals, out)
    disc = n * n - (g0 - g1 * g1)
    if disc <= 0.0:
        return out
    root = np.sqrt(disc)
    s = np.sqrt(4.0 * delta * (beta + n))
    plo = max(-g1 - root, -s)
    phi = min(-g1 + root, s)
    if plo > phi:
        return out
    act = (~zzero) & (ys < 0.0)
    out = np.where(act, alpha + gdzs - n * ys + phi * zmags, out)
    act = (~zzero) & (ys >= 0.0)
    if np.any(act):
        y = ys[act]
        zm = zmags[act]
        with np.errstate(divide="ignore"):
            pbar = np.where(y > 0, 2.0 * delta * zm / np.where(y > 0, y, 1.0), phi)
        cands = [np.full(y.shape, plo), np.full(y.shape, phi),
                 np.clip(pbar, plo, phi)]
        if beta > n:
            pn = np.sqrt(4.0 * delta * (beta - n))
            cands.append(np.full(y.shape, min(max(pn, plo), phi)))
            cands.append(np.full(y.shape, min(max(-pn, plo), phi)))
        best = np.full(y.shape, _NEG_INF)
        for p in cands:
            v = np.minimum(n, beta - p * p / (4.0 * delta)) * y + p * zm
            best = np.maximum(best, v)
        out[act] = alpha + gdzs[act] + best
    return out


def trunc_sup_eval(ys, zmags, gdzs, g1, g0, alpha, beta, delta, n):
    """Sup-truncated generator values at points (ys[i], z with |z|=zmags[i]).

    gdzs[i] = gamma.z at point i; g1 = gamma.zhat (shared); g0 = |gamma|^2.
    Returns -1e300 where the truncated feasible set is empty.
    """
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    zmags = np.ascontiguousarray(zmags, dtype=np.float64)
    gdzs = np.ascontiguousarray(gdzs, dtype=np.float64)
    if BACKEND == "numba":
        return _sup_eval_nb(
            ys, zmags, gdzs, float(g1), float(g0), float(alpha), float(beta),
            float(delta), float(n),
        )
    return _sup_eval_np(
        ys, zmags, gdzs, float(g1), float(g0), float(alpha), float(beta),
        float(delta), float(n),
    )


# ---------------------------------------------------------------------------
# inf-convolution truncation (gamma == 0)
#
# H^n(y,z) = inf over y'>0, tau of [alpha + beta y' + delta tau^2/y'
#                                   + n*sqrt((y-y')^2 + (|z|-tau)^2)]
# Jointly convex (perspective + norm); nested golden section.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _infconv_inner(yp, y, zmag, delta, n):
    lo = 0.0
    hi = zmag
    dy2 = (y - yp) * (y - yp)
    for _ in range(_GOLDEN_ITERS):
        d = _INVPHI * (hi - lo)
        x1 = hi - d
        x2 = lo + d
        f1 = delta * x1 * x1 / yp + n * np.sqrt(dy2 + (zmag - x1) * (zmag - x1))
        f2 = delta * x2 * x2 / yp + n * np.sqrt(dy2 + (zmag - x2) * (zmag - x2))
        if f1 > f2:
            lo = x1
        else:
            hi = x2
    t = 0.5 * (lo + hi)
    return delta * t * t / yp + n * np.sqrt(dy2 + (zmag - t) * (zmag - t))


@njit(cache=True)
def _infconv_point(y, zmag, alpha, beta, delta, n):
    lo = 1e-12
    hi = max(10.0, 2.0 * (abs(y) + zmag + 1.0))
    for _ in range(_GOLDEN_ITERS):
        d = _INVPHI * (hi - lo)
        x1 = hi - d
        x2 = lo + d
        f1 = beta * x1 + _infconv_inner(x1, y, zmag, delta, n)
        f2 = beta * x2 + _infconv_inner(x2, y, zmag, delta, n)
        if f1 > f2:
            lo = x1
        else:
            hi = x2
    yp = 0.5 * (lo + hi)
    return alpha + beta * yp + _infconv_inner(yp, y, zmag, delta, n)


@njit(cache=True)
def _infconv_eval_nb(ys, zmags, alpha, beta, delta, n):
    out = np.empty(ys.shape[0])
    for i in range(ys.shape[0]):
        out[i] = _infconv_point(ys[i], zmags[i], alpha, beta, delta, n)
    return out


def _infconv_eval_np(ys, zmags, alpha, beta, delta, n):
    def inner(yp):
        lo = np.zeros_like(yp)
        hi = zmags.copy()
        dy2 = (ys - yp) ** 2
        for _ in range(_GOLDEN_ITERS):
            d = _INVPHI * (hi - lo)
            x1 = hi - d
            x2 = lo + d
            f1 = delta * x1 * x1 / yp + n * np.sqrt(dy2 + (zmags - x1) ** 2)
            f2 = delta * x2 * x2 / yp + n * np.sqrt(dy2 + (zmags - x2) ** 2)
            shrink = f1 > f2
            lo = np.where(shrink, x1, lo)
            hi = np.where(shrink, hi, x2)
        t = 0.5 * (lo + hi)
        return delta * t * t / yp + n * np.sqrt(dy2 + (zmags - t) ** 2)

    lo = np.full(ys.shape, 1e-12)
    hi = np.maximum(10.0, 2.0 * (np.abs(ys) + zmags + 1.0))
    for _ in range(_GOLDEN_ITERS):
        d = _INVPHI * (hi - lo)
        x1 = hi - d
        x2 = lo + d
        f1 = beta * x1 + inner(x1)
        f2 = beta * x2 + inner(x2)
        shrink = f1 > f2
        lo = np.where(shrink, x1, lo)
        hi = np.where(shrink, hi, x2)
    yp = 0.5 * (lo + hi)
    return alpha + beta * yp + inner(yp)


def trunc_infconv_eval(ys, zmags, alpha, beta, delta, n):
    """Inf-convolution truncated generator at (ys[i], |z|=zmags[i]), gamma=0."""
    ys = np.ascontiguousarray(ys, dtype=np.float64)
    zmags = np.ascontiguousarray(zmags, dtype=np.float64)
    if BACKEND == "numba":
        return _infconv_eval_nb(ys, zmags, float(alpha), float(beta),
                                float(delta), float(n))
    return _infconv_eval_np(ys, zmags, float(alpha), float(beta),
                            float(delta), float(n))


# ---------------------------------------------------------------------------
# LSMC fused node update for the dominating-class generator
#
# Solves y = base + h*(alpha + beta*y + gz + delta*z^2/y) exactly
# (positive root), floors at eps, evaluates the generator and advances the
# pathwise carry P <- P + h*H - zraw*dW.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _lsmc_update_nb(P, base, zraw, zgen, gz, dW, h, alpha, beta, delta, eps):
    m = P.shape[0]
    y = np.empty(m)
    Pn = np.empty(m)
    a2 = 1.0 - h * beta
    clamped = 0
    for i in range(m):
        bt = base[i] + h * (alpha + gz[i])
        yi = (bt + np.sqrt(bt * bt + 4.0 * a2 * h * delta * zgen[i] * zgen[i])) / (2.0 * a2)
        if yi < eps:
            yi = eps
            clamped += 1
        Hi = alpha + beta * yi + gz[i] + delta * zgen[i] * zgen[i] / yi
        y[i] = yi
        Pn[i] = P[i] + h * Hi - zraw[i] * dW[i]
    return y, Pn, clamped


def _lsmc_update_np(P, base, zraw, zgen, gz, dW, h, alpha, beta, delta, eps):
    a2 = 1.0 - h * beta
    bt = base + h * (alpha + gz)
    y = (bt + np.sqrt(bt * bt + 4.0 * a2 * h * delta * zgen * zgen)) / (2.0 * a2)
    clamped = int(np.count_nonzero(y < eps))
    y = np.maximum(y, eps)
    H = alpha + beta * y + gz + delta * zgen * zgen / y
    Pn = P + h * H - zraw * dW
    return y, Pn, clamped


def lsmc_gclass_update(P, base, zraw, zgen, gz, dW, h, alpha, beta, delta, eps):
    """One LSMC node update; requires h*beta < 1. Returns (y, P_new, n_clamped)."""
    args = [np.ascontiguousarray(a, dtype=np.float64)
            for a in (P, base, zraw, zgen, gz, dW)]
    if BACKEND == "numba":
        return _lsmc_update_nb(*args, float(h), float(alpha), float(beta),
                               float(delta), float(eps))
    return _lsmc_update_np(*args, float(h), float(alpha), float(beta),
                           float(delta), float(eps))


# ---------------------------------------------------------------------------
# explicit finite-difference step (interior nodes)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _fd_step_nb(v, dx, dt, sig2, mu, alpha, beta, gamma, delta, eps):
    nx = v.shape[0]
    out = v.copy()
    clamped = 0
    for i in range(1, nx - 1):
        vx = (v[i + 1] - v[i - 1]) / (2.0 * dx)
        vxx = (v[i + 1] - 2.0 * v[i] + v[i - 1]) / (dx * dx)
        z = np.sqrt(sig2[i]) * vx
        vi = v[i]
        if vi < eps:
            vi = eps
        H = alpha + beta * v[i] + gamma * z + delta * z * z / vi
        vn = v[i] + dt * (0.5 * sig2[i] * vxx + mu[i] * vx + H)
        if vn < eps:
            vn = eps
            clamped += 1
        out[i] = vn
    return out, clamped


def _fd_step_np(v, dx, dt, sig2, mu, alpha, beta, gamma, delta, eps):
    vx = (v[2:] - v[:-2]) / (2.0 * dx)
    vxx = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (dx * dx)
    z = np.sqrt(sig2[1:-1]) * vx
    vi = np.maximum(v[1:-1], eps)
    H = alpha + beta * v[1:-1] + gamma * z + delta * z * z / vi
    vn = v[1:-1] + dt * (0.5 * sig2[1:-1] * vxx + mu[1:-1] * vx + H)
    clamped = int(np.count_nonzero(vn < eps))
    out = v.copy()
    out[1:-1] = np.maximum(vn, eps)
    return out, clamped


def fd_step_interior(v, dx, dt, sig2, mu, alpha, beta, gamma, delta, eps):
    """One explicit backward-in-time step; boundaries left to the caller."""
    v = np.ascontiguousarray(v, dtype=np.float64)
    sig2 = np.ascontiguousarray(sig2, dtype=np.float64)
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    if BACKEND == "numba":
        return _fd_step_nb(v, float(dx), float(dt), sig2, mu, float(alpha),
                           float(beta), float(gamma), float(delta), float(eps))
    return _fd_step_np(v, float(dx), float(dt), sig2, mu, float(alpha),
                       float(beta), float(gamma), float(delta), float(eps))


# ---------------------------------------------------------------------------
# Euler loops (constant coefficients)
# ---------------------------------------------------------------------------


@njit(cache=True)
def _euler_const_nb(x0, mu, sig, dW, h):
    n_paths, n_steps = dW.shape
    X = np.empty((n_paths, n_steps + 1))
    for p in range(n_paths):
        X[p, 0] = x0
        for i in range(n_steps):
            X[p, i + 1] = X[p, i] + mu * h + sig * dW[p, i]
    return X

def _euler_const_np(x0, mu, sig, dW, h):
    n_paths, n_steps = dW.shape
    X = np.empty((n_paths, n_steps + 1))
    X[:, 0] = x0
    X[:, 1:] = x0 + mu * h * np.arange(1, n_steps + 1) + sig * np.cumsum(dW, axis=1)
    return X


def euler_const(x0, mu, sig, dW, h):
    dW = np.ascontiguousarray(dW, dtype=np.float64)
    if BACKEND == "numba":
        return _euler_const_nb(float(x0), float(mu), float(sig), dW, float(h))
    return _euler_const_np(float(x0), float(mu), float(sig), dW, float(h))


@njit(cache=True)
def _euler_refl_nb(x0, mu, sig, dW, h, lo, hi):
    n_paths, n_steps = dW.shape
    X = np.empty((n_paths, n_steps + 1))
    K = np.zeros((n_paths, n_steps + 1))
    for p in range(n_paths):
        X[p, 0] = x0
        for i in range(n_steps):
            pred = X[p, i] + mu * h + sig * dW[p, i]
            proj = min(max(pred, lo), hi)
            X[p, i + 1] = proj
            K[p, i + 1] = K[p, i] + abs(proj - pred)
    return X, K


def _euler_refl_np(x0, mu, sig, dW, h, lo, hi):
    n_paths, n_steps = dW.shape
    X = np.empty((n_paths, n_steps + 1))
    K = np.zeros((n_paths, n_steps + 1))
    X[:, 0] = x0
    for i in range(n_steps):
        pred = X[:, i] + mu * h + sig * dW[:, i]
        proj = np.clip(pred, lo, hi)
        X[:, i + 1] = proj
        K[:, i + 1] = K[:, i] + np.abs(proj - pred)
    return X, K


def euler_reflected_interval(x0, mu, sig, dW, h, lo, hi):
    dW = np.ascontiguousarray(dW, dtype=np.float64)
    if BACKEND == "numba":
        return _euler_refl_nb(float(x0), float(mu), float(sig), dW, float(h),
                              float(lo), float(hi))
    return _euler_refl_np(float(x0), float(mu), float(sig), dW, float(h),
                          float(lo), float(hi))

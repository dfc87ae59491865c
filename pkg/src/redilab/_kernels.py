"""Compiled RK4 reference integration for mixture score fields.

Used only by :func:`redilab.solver.rk4_integrate` when the field carries its
packed mixture parameters. Agreement with the numpy path is a tested property.
"""
from __future__ import annotations

import math

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _accumulate(x, a, s2, log_w, means, covs, equal_var, out):
    """out <- score of the time-scaled mixture at x (two passes, stable softmax)."""
    k_n, d = means.shape
    best = -np.inf
    for k in range(k_n):
        v = a * a * covs[k] + s2
        sq = 0.0
        for j in range(d):
            diff = x[j] - a * means[k, j]
            sq += diff * diff
        lg = log_w[k] - 0.5 * sq / v
        if not equal_var:
            # cancels in the softmax when every component shares one variance
            lg -= 0.5 * d * math.log(v)
        if lg > best:
            best = lg
    total = 0.0
    for j in range(d):
        out[j] = 0.0
    for k in range(k_n):
        v = a * a * covs[k] + s2
        sq = 0.0
        for j in range(d):
            diff = x[j] - a * means[k, j]
            sq += diff * diff
        lg = log_w[k] - 0.5 * sq / v
        if not equal_var:
            lg -= 0.5 * d * math.log(v)
        e = math.exp(lg - best)
        total += e
        for j in range(d):
            out[j] -= (e / v) * (x[j] - a * means[k, j])
    for j in range(d):
        out[j] /= total


@numba.njit(cache=True, inline="always")
def _rhs(x, a, s2, f, g2, log_w, means, covs, eq, ulog_w, umeans, ucovs, ueq, w_g, out, tmp_s):
    d = x.shape[0]
    _accumulate(x, a, s2, log_w, means, covs, eq, out)
    if w_g != 1.0:
        _accumulate(x, a, s2, ulog_w, umeans, ucovs, ueq, tmp_s)
        for j in range(d):
            out[j] = tmp_s[j] + w_g * (out[j] - tmp_s[j])
    for j in range(d):
        out[j] = f * x[j] - 0.5 * g2 * out[j]


@numba.njit(cache=True, nogil=True)
def rk4_mixture(x0, log_w, means, covs, equal_var, ulog_w, umeans, ucovs, uequal_var, w_g, coef, ts):
    """Integrate every row of ``x0`` over the substep times ``ts``.

    ``coef`` comes from :func:`rk4_coefficients`: row 2i is substep end i,
    row 2i+1 the midpoint of substep i.
    """
    n, d = x0.shape
    n_sub = len(ts) - 1
    out = np.empty_like(x0)
    k1 = np.empty(d)
    k2 = np.empty(d)
    k3 = np.empty(d)
    k4 = np.empty(d)
    y = np.empty(d)
    x = np.empty(d)
    tmp_s = np.empty(d)
    for r in range(n):
        for j in range(d):
            x[j] = x0[r, j]
        lw = log_w[r]
        mu = means[r]
        cv = covs[r]
        eq = equal_var[r]
        for i in range(n_sub):
            h = ts[i + 1] - ts[i]
            _rhs(x, coef[2 * i, 0], coef[2 * i, 1], coef[2 * i, 2], coef[2 * i, 3], lw, mu, cv, eq,
                 ulog_w, umeans, ucovs, uequal_var, w_g, k1, tmp_s)
            for j in range(d):
                y[j] = x[j] + 0.5 * h * k1[j]
            _rhs(y, coef[2 * i + 1, 0], coef[2 * i + 1, 1], coef[2 * i + 1, 2], coef[2 * i + 1, 3], lw, mu, cv, eq,
                 ulog_w, umeans, ucovs, uequal_var, w_g, k2, tmp_s)
            for j in range(d):
                y[j] = x[j] + 0.5 * h * k2[j]
            _rhs(y, coef[2 * i + 1, 0], coef[2 * i + 1, 1], coef[2 * i + 1, 2], coef[2 * i + 1, 3], lw, mu, cv, eq,
                 ulog_w, umeans, ucovs, uequal_var, w_g, k3, tmp_s)
            for j in range(d):
                y[j] = x[j] + h * k3[j]
            _rhs(y, coef[2 * i + 2, 0], coef[2 * i + 2, 1], coef[2 * i + 2, 2], coef[2 * i + 2, 3], lw, mu, cv, eq,
                 ulog_w, umeans, ucovs, uequal_var, w_g, k4, tmp_s)
            for j in range(d):
                x[j] = x[j] + (h / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        for j in range(d):
            out[r, j] = x[j]
    return out


_FAST = {"arcp", "contract"}


@numba.njit(cache=True, inline="always", fastmath=_FAST)
def _score2(x0, x1, a, s2, log_w, means, covs, equal_var):
    """2-D score with a single-pass (online) softmax."""
    best = -np.inf
    total = 0.0
    o0 = 0.0
    o1 = 0.0
    for k in range(means.shape[0]):
        if log_w[k] == -np.inf:
            continue
        v = a * a * covs[k] + s2
        d0 = x0 - a * means[k, 0]
        d1 = x1 - a * means[k, 1]
        lg = log_w[k] - 0.5 * (d0 * d0 + d1 * d1) / v
        if not equal_var:
            lg -= math.log(v)
        # the current maximum always has weight exactly 1, so each component
        # costs at most one exp
        if best == -np.inf:
            best = lg
            e = 1.0
        elif lg > best:
            scale = math.exp(best - lg)
            total *= scale
            o0 *= scale
            o1 *= scale
            best = lg
            e = 1.0
        else:
            e = math.exp(lg - best)
        total += e
        o0 -= e * d0 / v
        o1 -= e * d1 / v
    return o0 / total, o1 / total


@numba.njit(cache=True, inline="always", fastmath=_FAST)
def _rhs2(x0, x1, a, s2, f, g2, log_w, means, covs, eq, ulog_w, umeans, ucovs, ueq, w_g):
    c0, c1 = _score2(x0, x1, a, s2, log_w, means, covs, eq)
    if w_g != 1.0:
        u0, u1 = _score2(x0, x1, a, s2, ulog_w, umeans, ucovs, ueq)
        c0 = u0 + w_g * (c0 - u0)
        c1 = u1 + w_g * (c1 - u1)
    return f * x0 - 0.5 * g2 * c0, f * x1 - 0.5 * g2 * c1


@numba.njit(cache=True, nogil=True, fastmath=_FAST)
def rk4_mixture_2d(x0, log_w, means, covs, equal_var, ulog_w, umeans, ucovs, uequal_var, w_g, coef, ts):
    """:func:`rk4_mixture` specialised to d = 2 with scalar stage values.

    Time is the outer loop so consecutive rows are independent work; this
    hides the latency of the serial RK4 chain within one row.
    """
    n = x0.shape[0]
    p = x0[:, 0].copy()
    q = x0[:, 1].copy()
    for i in range(len(ts) - 1):
        h = ts[i + 1] - ts[i]
        j = 2 * i
        a_a, s_a, f_a, g_a = coef[j, 0], coef[j, 1], coef[j, 2], coef[j, 3]
        a_m, s_m, f_m, g_m = coef[j + 1, 0], coef[j + 1, 1], coef[j + 1, 2], coef[j + 1, 3]
        a_b, s_b, f_b, g_b = coef[j + 2, 0], coef[j + 2, 1], coef[j + 2, 2], coef[j + 2, 3]
        for r in range(n):
            lw = log_w[r]
            mu = means[r]
            cv = covs[r]
            eq = equal_var[r]
            x = p[r]
            y = q[r]
            a0, a1 = _rhs2(x, y, a_a, s_a, f_a, g_a, lw, mu, cv, eq, ulog_w, umeans, ucovs, uequal_var, w_g)
            b0, b1 = _rhs2(x + 0.5 * h * a0, y + 0.5 * h * a1, a_m, s_m, f_m, g_m,
                           lw, mu, cv, eq, ulog_w, umeans, ucovs, uequal_var, w_g)
            c0, c1 = _rhs2(x + 0.5 * h * b0, y + 0.5 * h * b1, a_m, s_m, f_m, g_m,
                           lw, mu, cv, eq, ulog_w, umeans, ucovs, uequal_var, w_g)
            d0, d1 = _rhs2(x + h * c0, y + h * c1, a_b, s_b, f_b, g_b,
                           lw, mu, cv, eq, ulog_w, umeans, ucovs, uequal_var, w_g)
            p[r] = x + (h / 6.0) * (a0 + 2.0 * b0 + 2.0 * c0 + d0)
            q[r] = y + (h / 6.0) * (a1 + 2.0 * b1 + 2.0 * c1 + d1)
    out = np.empty_like(x0)
    out[:, 0] = p
    out[:, 1] = q
    return out


def equal_variances(log_w: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """Per row: do all live components share one covariance scale?"""
    live = np.isfinite(log_w)
    lo = np.where(live, covs, np.inf).min(axis=-1)
    hi = np.where(live, covs, -np.inf).max(axis=-1)
    return lo == hi


def rk4_coefficients(schedule, ts: np.ndarray) -> np.ndarray:
    """(alpha, sigma^2, f, g^2) at substep ends and midpoints, interleaved."""
    mids = 0.5 * (ts[:-1] + ts[1:])
    pts = np.empty(2 * len(ts) - 1)
    pts[0::2] = ts
    pts[1::2] = mids
    a = schedule.alpha(pts)
    s = schedule.sigma(pts)
    return np.stack([a, s * s, schedule.f_drift(pts), schedule.g_squared(pts)], axis=1)



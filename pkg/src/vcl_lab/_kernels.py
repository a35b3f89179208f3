"""Hot reduction kernels for the Monte-Carlo and moment code.

Each kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version.  The numba path is used when numba imports cleanly and the
environment variable ``VCL_LAB_DISABLE_NUMBA`` is unset (or ``0``).  Both
paths use two-pass summation and agree to rounding.
"""

import os

import numpy as np

_DISABLE = os.environ.get("VCL_LAB_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLE


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------


def row_variances_numpy(x):
    n = x.shape[1]
    mean = x.mean(axis=1, keepdims=True)
    dev = x - mean
    return np.einsum("ij,ij->i", dev, dev) / (n - 1)


def central_moments_numpy(x):
    mean = x.mean()
    dev = x - mean
    sq = dev * dev
    return mean, sq.mean(), (sq * sq).mean()


def ratio_band_count_numpy(v1, v2, lo, hi):
    ok = v2 > 0.0
    r = np.empty_like(v1)
    r[ok] = 1.0 - v1[ok] / v2[ok]
    r2 = r * r
    return int(np.count_nonzero(ok & (r2 >= lo) & (r2 <= hi)))


def ratio_interval_count_numpy(v1, v2, lo, hi):
    ok = v2 > 0.0
    r = np.full_like(v1, np.nan)
    r[ok] = v1[ok] / v2[ok]
    return int(np.count_nonzero(ok & (r >= lo) & (r <= hi)))


def rel_band_count_numpy(v, sigma2, eps):
    q = v / sigma2
    return int(np.count_nonzero((q >= 1.0 - eps) & (q <= 1.0 + eps)))


def unit_vcl_epoch_numpy(x, order, theta, beta, vel, n, batch_size, lr, momentum, clip):
    """One epoch of SGD on a single linear unit under the two-subset loss.

    ``theta`` (d,), ``beta`` (1,) and ``vel`` (d + 1,) are updated in place;
    theta and beta form one clipping group.  Returns the summed loss.
    """
    count = order.shape[0]
    d = theta.shape[0]
    total = 0.0
    start = 0
    while start + 2 * n <= count:
        xb = x[order[start:start + 2 * n]]
        rho = xb @ theta
        d1 = rho[:n] - rho[:n].mean()
        d2 = rho[n:] - rho[n:].mean()
        v1 = d1 @ d1 / (n - 1)
        v2 = d2 @ d2 / (n - 1)
        den = v2 + beta[0]
        r = v1 / den
        total += (1.0 - r) ** 2
        dr = -2.0 * (1.0 - r)
        g1 = dr / den * 2.0 / (n - 1)
        g2 = -dr * v1 / (den * den) * 2.0 / (n - 1)
        grad = np.empty(d + 1)
        grad[:d] = g1 * (d1 @ xb[:n]) + g2 * (d2 @ xb[n:])
        grad[d] = -dr * v1 / (den * den)
        gn = np.sqrt(grad @ grad)
        if clip > 0.0 and gn > clip:
            grad *= clip / gn
        vel *= momentum
        vel += grad
        theta -= lr * vel[:d]
        beta[0] -= lr * vel[d]
        start += batch_size
    return total


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def row_variances_numba(x):
        m, n = x.shape
        out = np.empty(m)
        for i in range(m):
            s = 0.0
            for j in range(n):
                s += x[i, j]
            mu = s / n
            acc = 0.0
            for j in range(n):
                d = x[i, j] - mu
                acc += d * d
            out[i] = acc / (n - 1)
        return out

    @njit(cache=True)
    def central_moments_numba(x):
        n = x.shape[0]
        s = 0.0
        for i in range(n):
            s += x[i]
        mu = s / n
        m2 = 0.0
        m4 = 0.0
        for i in range(n):
            d = x[i] - mu
            d2 = d * d
            m2 += d2
            m4 += d2 * d2
        return mu, m2 / n, m4 / n

    @njit(cache=True)
    def ratio_band_count_numba(v1, v2, lo, hi):
        hits = 0
        for i in range(v1.shape[0]):
            if v2[i] > 0.0:
                r = 1.0 - v1[i] / v2[i]
                r2 = r * r
                if r2 >= lo and r2 <= hi:
                    hits += 1
        return hits

    @njit(cache=True)
    def ratio_interval_count_numba(v1, v2, lo, hi):
        hits = 0
        for i in range(v1.shape[0]):
            if v2[i] > 0.0:
                r = v1[i] / v2[i]
                if r >= lo and r <= hi:
                    hits += 1
        return hits

    @njit(cache=True)
    def rel_band_count_numba(v, sigma2, eps):
        hits = 0
        for i in range(v.shape[0]):
            q = v[i] / sigma2
            if q >= 1.0 - eps and q <= 1.0 + eps:
                hits += 1
        return hits

    @njit(cache=True)
    def unit_vcl_epoch_numba(x, order, theta, beta, vel, n, batch_size, lr, momentum, clip):
        count = order.shape[0]
        d = theta.shape[0]
        rho = np.empty(2 * n)
        grad = np.empty(d + 1)
        total = 0.0
        start = 0
        while start + 2 * n <= count:
            for i in range(2 * n):
                acc = 0.0
                row = order[start + i]
                for k in range(d):
                    acc += x[row, k] * theta[k]
                rho[i] = acc
            m1 = 0.0
            m2 = 0.0
            for i in range(n):
                m1 += rho[i]
                m2 += rho[n + i]
            m1 /= n
            m2 /= n
            v1 = 0.0
            v2 = 0.0
            for i in range(n):
                a = rho[i] - m1
                b = rho[n + i] - m2
                v1 += a * a
                v2 += b * b
            v1 /= n - 1
            v2 /= n - 1
            den = v2 + beta[0]
            r = v1 / den
            total += (1.0 - r) * (1.0 - r)
            dr = -2.0 * (1.0 - r)
            g1 = dr / den * 2.0 / (n - 1)
            g2 = -dr * v1 / (den * den) * 2.0 / (n - 1)
            for k in range(d):
                acc = 0.0
                for i in range(n):
                    acc += g1 * (rho[i] - m1) * x[order[start + i], k]
                    acc += g2 * (rho[n + i] - m2) * x[order[start + n + i], k]
                grad[k] = acc
            grad[d] = -dr * v1 / (den * den)
            gn = 0.0
            for k in range(d + 1):
                gn += grad[k] * grad[k]
            gn = np.sqrt(gn)
            if clip > 0.0 and gn > clip:
                for k in range(d + 1):
                    grad[k] *= clip / gn
            for k in range(d + 1):
                vel[k] = momentum * vel[k] + grad[k]
            for k in range(d):
                theta[k] -= lr * vel[k]
            beta[0] -= lr * vel[d]
            start += batch_size
        return total


if USE_NUMBA:
    BACKEND = "numba"
    row_variances = row_variances_numba
    _central_moments = central_moments_numba
    _ratio_band_count = ratio_band_count_numba
    _rel_band_count = rel_band_count_numba
    _ratio_interval_count = ratio_interval_count_numba
    unit_vcl_epoch = unit_vcl_epoch_numba
else:
    BACKEND = "numpy"
    row_variances = row_variances_numpy
    _central_moments = central_moments_numpy
    _ratio_band_count = ratio_band_count_numpy
    _rel_band_count = rel_band_count_numpy
    _ratio_interval_count = ratio_interval_count_numpy
    unit_vcl_epoch = unit_vcl_epoch_numpy


def central_moments(x):
    """Return ``(mean, biased variance, fourth central moment)`` of a 1-D array."""
    mu, m2, m4 = _central_moments(np.ascontiguousarray(x, dtype=np.float64))
    return float(mu), float(m2), float(m4)


def ratio_band_count(v1, v2, lo, hi):
    """Count pairs with ``lo <= (1 - v1/v2)**2 <= hi``; ``v2 == 0`` never counts."""
    return int(_ratio_band_count(np.ascontiguousarray(v1), np.ascontiguousarray(v2), float(lo), float(hi)))


def ratio_interval_count(v1, v2, lo, hi):
    """Count pairs with ``lo <= v1/v2 <= hi``; ``v2 == 0`` never counts."""
    return int(_ratio_interval_count(np.ascontiguousarray(v1), np.ascontiguousarray(v2), float(lo), float(hi)))


def rel_band_count(v, sigma2, eps):
    """Count entries with ``1 - eps <= v / sigma2 <= 1 + eps``."""
    return int(_rel_band_count(np.ascontiguousarray(v), float(sigma2), float(eps)))

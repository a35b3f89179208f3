"""Sample-moment statistics, kurtosis, and concentration of sample variances.

Closed forms live next to their Monte-Carlo counterparts so every formula
can be checked against simulation.  Kurtosis uses the divisor-``n``
variance in its denominator, which makes a balanced two-point sample hit
exactly 1.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels

_CHUNK_DRAWS = 1 << 22


class UndefinedKurtosis(ValueError):
    """Raised when kurtosis is requested for a zero-variance sample."""


@dataclass(frozen=True)
class SampleMoments:
    n: int
    mean: float
    var_unbiased: float
    m4_central: float
    kurtosis: Optional[float]  # None for a constant sample

    @property
    def kurtosis_defined(self) -> bool:
        return self.kurtosis is not None

    @property
    def var_biased(self) -> float:
        return self.var_unbiased * (self.n - 1) / self.n


def _as_sample(sample) -> np.ndarray:
    x = np.asarray(sample, dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError(f"need at least 2 observations, got {x.size}")
    return x


def _is_constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x[0]))


def sample_variance_unbiased(sample) -> float:
    """Unbiased (divisor ``n - 1``) sample variance.

    Uses the corrected two-pass scheme: the residual sum of deviations is
    subtracted to cancel the rounding error left in the mean.
    """
    x = _as_sample(sample)
    if _is_constant(x):
        return 0.0
    n = x.size
    dev = x - x.mean()
    s = dev.sum()
    return float((np.dot(dev, dev) - s * s / n) / (n - 1))


def compute_moments(sample) -> SampleMoments:
    x = _as_sample(sample)
    n = x.size
    if _is_constant(x):
        return SampleMoments(n=n, mean=float(x[0]), var_unbiased=0.0, m4_central=0.0, kurtosis=None)
    mean, m2, m4 = _kernels.central_moments(x)
    # Kurtosis is scale-free; computing it on deviations scaled to unit
    # max-abs keeps m2**2 from underflowing on tiny-magnitude samples.
    dev = x - mean
    _, s2, s4 = _kernels.central_moments(dev / np.abs(dev).max())
    kurt = s4 / (s2 * s2) if s2 > 0.0 else None
    return SampleMoments(n=n, mean=mean, var_unbiased=m2 * n / (n - 1), m4_central=m4, kurtosis=kurt)


def kurtosis(sample) -> float:
    """Plug-in kurtosis ``m4 / m2**2``; raises :class:`UndefinedKurtosis` on constant input."""
    m = compute_moments(sample)
    if m.kurtosis is None:
        raise UndefinedKurtosis("kurtosis undefined for a zero-variance sample")
    return m.kurtosis


def column_kurtosis(x: np.ndarray) -> np.ndarray:
    """Kurtosis of every column of a 2-D array; NaN marks constant columns."""
    x = np.asarray(x, dtype=np.float64)
    dev = x - x.mean(axis=0)
    scale = np.abs(dev).max(axis=0)
    out = np.full(x.shape[1], np.nan)
    ok = scale > 0.0
    dev = dev[:, ok] / scale[ok]
    dev -= dev.mean(axis=0)
    sq = dev * dev
    m2 = sq.mean(axis=0)
    m4 = (sq * sq).mean(axis=0)
    out[ok] = np.where(m2 > 0.0, m4 / np.where(m2 > 0.0, m2 * m2, 1.0), np.nan)
    return out


def var_of_sample_variance(m4: float, sigma2: float, n: int) -> float:
    """Variance of the unbiased sample variance of ``n`` i.i.d. draws.

    ``m4 / n - sigma2**2 * (n - 3) / (n * (n - 1))``
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    s4 = sigma2 * sigma2
    if m4 < s4 * (1.0 - 1e-12):
        raise ValueError(f"m4={m4!r} violates m4 >= sigma2**2={s4!r}")
    return m4 / n - s4 * (n - 3) / (n * (n - 1))


def population_vcl(kappa: float, n: int) -> float:
    """Population loss ``E[(1 - s2/sigma2)**2] = kappa/n - (n-3)/(n(n-1))``."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if kappa < 1.0 - 1e-12:
        raise ValueError("kurtosis is at least 1")
    return kappa / n - (n - 3) / (n * (n - 1))


def _check_eps(eps: float) -> None:
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")


def chebyshev_bound_rhs(kappa: float, n: int, eps: float) -> float:
    """Lower bound on the probability that two sample variances agree.

    Returns ``(1 - (kappa/n - (n-3)/(n(n-1))) / eps**2)**2``, or 0 when the
    bracket is negative.
    """
    _check_eps(eps)
    if n < 2:
        raise ValueError("n must be >= 2")
    if kappa < 1.0 - 1e-12:
        raise ValueError("kappa must be >= 1")
    inner = 1.0 - population_vcl(kappa, n) / (eps * eps)
    return max(inner, 0.0) ** 2


def single_variance_bound(kappa: float, n: int, eps: float) -> float:
    """Chebyshev lower bound on ``Pr(1 - eps <= s2/sigma2 <= 1 + eps)``, clamped at 0."""
    _check_eps(eps)
    return max(1.0 - population_vcl(kappa, n) / (eps * eps), 0.0)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


class DistSampler:
    """i.i.d. real draws; subclasses know their population moments."""

    name = "dist"
    sigma2: Optional[float] = None
    m4: Optional[float] = None

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        raise NotImplementedError

    @property
    def kurtosis(self) -> Optional[float]:
        if self.sigma2 is None or self.m4 is None or self.sigma2 == 0:
            return None
        return self.m4 / self.sigma2**2

    def __repr__(self):
        return f"{type(self).__name__}(sigma2={self.sigma2})"


class GaussianSampler(DistSampler):
    name = "gaussian"

    def __init__(self, sigma2: float = 1.0, mean: float = 0.0):
        self.sigma2 = float(sigma2)
        self.m4 = 3.0 * self.sigma2**2
        self.mean = mean

    def draw(self, rng, size):
        return rng.normal(self.mean, np.sqrt(self.sigma2), size)


class UniformSampler(DistSampler):
    name = "uniform"

    def __init__(self, sigma2: float = 1.0):
        self.sigma2 = float(sigma2)
        self.half_width = np.sqrt(3.0 * self.sigma2)
        self.m4 = 1.8 * self.sigma2**2

    def draw(self, rng, size):
        return rng.uniform(-self.half_width, self.half_width, size)


class LaplaceSampler(DistSampler):
    name = "laplace"

    def __init__(self, sigma2: float = 1.0):
        self.sigma2 = float(sigma2)
        self.scale = np.sqrt(self.sigma2 / 2.0)
        self.m4 = 6.0 * self.sigma2**2

    def draw(self, rng, size):
        return rng.laplace(0.0, self.scale, size)


class TwoPointDist(DistSampler):
    """``a * z + b`` with ``z ~ Bernoulli(1/2)``: the kurtosis-1 extreme."""

    name = "two_point"

    def __init__(self, a: float = 2.0, b: float = 0.0):
        if a == 0:
            raise ValueError("scale a must be nonzero")
        self.a = float(a)
        self.b = float(b)
        self.sigma2 = self.a**2 / 4.0
        self.m4 = self.a**4 / 16.0

    def draw(self, rng, size):
        return self.a * rng.integers(0, 2, size).astype(np.float64) + self.b


class ConstantSampler(DistSampler):
    name = "constant"

    def __init__(self, value: float = 0.0):
        self.value = float(value)
        self.sigma2 = 0.0
        self.m4 = 0.0

    def draw(self, rng, size):
        return np.full(size, self.value)


class DiscreteSampler(DistSampler):
    """Finite-support distribution with exact population moments."""

    name = "discrete"

    def __init__(self, values, probs):
        v = np.asarray(values, dtype=np.float64)
        p = np.asarray(probs, dtype=np.float64)
        if v.shape != p.shape or np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError("probs must be a non-negative vector summing to 1, aligned with values")
        self.values, self.probs = v, p / p.sum()
        mu = float(np.dot(self.probs, v))
        d2 = (v - mu) ** 2
        self.sigma2 = float(np.dot(self.probs, d2))
        self.m4 = float(np.dot(self.probs, d2 * d2))

    def draw(self, rng, size):
        return rng.choice(self.values, size=size, p=self.probs)


SAMPLERS = {
    "gaussian": GaussianSampler,
    "uniform": UniformSampler,
    "laplace": LaplaceSampler,
    "two_point": lambda sigma2=1.0: TwoPointDist(a=2.0 * np.sqrt(sigma2)),
    "constant": lambda sigma2=0.0: ConstantSampler(),
}


def make_sampler(name: str, sigma2: float = 1.0) -> DistSampler:
    try:
        factory = SAMPLERS[name]
    except KeyError:
        raise ValueError(f"unknown distribution {name!r}; choose from {sorted(SAMPLERS)}") from None
    return factory(sigma2=sigma2)


# ---------------------------------------------------------------------------
# Monte-Carlo oracles
# ---------------------------------------------------------------------------


def _trial_variances(dist: DistSampler, n: int, trials: int, rng: np.random.Generator, width: int = 1):
    """Unbiased variances of ``width`` consecutive size-``n`` blocks per trial.

    Returns an array of shape ``(width, trials)``.
    """
    rows = max(1, _CHUNK_DRAWS // (n * width))
    out = np.empty((width, trials))
    done = 0
    while done < trials:
        m = min(rows, trials - done)
        block = dist.draw(rng, (m, width * n))
        for k in range(width):
            out[k, done:done + m] = _kernels.row_variances(np.ascontiguousarray(block[:, k * n:(k + 1) * n]))
        done += m
    return out


def mc_var_of_sample_variance(dist: DistSampler, n: int, trials: int, seed) -> float:
    """Empirical variance of ``trials`` unbiased sample variances of size ``n``."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    v = _trial_variances(dist, n, trials, rng)[0]
    if trials == 1:
        return 0.0
    if _is_constant(v):
        return 0.0
    return float(np.var(v, ddof=1))


def mc_ratio_coverage(dist: DistSampler, n: int, eps: float, trials: int, seed) -> float:
    """Fraction of sample pairs whose squared ratio deviation lands in the Chebyshev band.

    The event is ``4e^2/(1+e)^2 <= (1 - s1/s2)^2 <= 4e^2/(1-e)^2``; pairs
    with ``s2 == 0`` count as misses.
    """
    _check_eps(eps)
    if n < 2 or trials < 1:
        raise ValueError("need n >= 2 and trials >= 1")
    rng = np.random.default_rng(seed)
    v = _trial_variances(dist, n, trials, rng, width=2)
    lo = 4 * eps * eps / (1 + eps) ** 2
    hi = 4 * eps * eps / (1 - eps) ** 2
    return _kernels.ratio_band_count(v[0], v[1], lo, hi) / trials


def mc_ratio_interval_coverage(dist: DistSampler, n: int, eps: float, trials: int, seed) -> float:
    """Fraction of sample pairs with ``(1-e)/(1+e) <= s1/s2 <= (1+e)/(1-e)``.

    This is the event the Chebyshev argument actually controls: both
    variances within a factor ``1 +- e`` of the population value.  Unlike
    :func:`mc_ratio_coverage` it contains the ratio 1.
    """
    _check_eps(eps)
    if n < 2 or trials < 1:
        raise ValueError("need n >= 2 and trials >= 1")
    rng = np.random.default_rng(seed)
    v = _trial_variances(dist, n, trials, rng, width=2)
    return _kernels.ratio_interval_count(v[0], v[1], (1 - eps) / (1 + eps), (1 + eps) / (1 - eps)) / trials


def mc_single_variance_coverage(values: np.ndarray, n: int, eps: float, trials: int, seed) -> float:
    """Resampling estimate of ``Pr(1 - eps <= s2/sigma2 <= 1 + eps)``.

    Size-``n`` batches are drawn with replacement from ``values``, so the
    population is the empirical distribution itself and ``sigma2`` is its
    divisor-``n`` variance.
    """
    _check_eps(eps)
    x = _as_sample(values)
    _, sigma2, _ = _kernels.central_moments(x)
    if sigma2 <= 0:
        raise UndefinedKurtosis("zero-variance values")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, (trials, n))
    v = _kernels.row_variances(x[idx])
    return _kernels.rel_band_count(v, sigma2, eps) / trials


def mc_kurtosis(dist: DistSampler, draws: int, seed) -> float:
    rng = np.random.default_rng(seed)
    return kurtosis(dist.draw(rng, draws))

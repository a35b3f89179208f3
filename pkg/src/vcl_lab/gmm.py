"""Two-component Gaussian mixtures under linear projection.

Covers the closed-form kurtosis of a projected mixture, the prior range in
which kurtosis minimisation separates the components (the LDA direction)
rather than merging them, and two ways of finding the minimiser:
projected gradient descent on the closed form, and training a single
linear unit with the variance constancy loss alone.
"""

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from . import _kernels
from . import autodiff as ad
from .vcl import VclConfig, vcl_unit_loss

SEPARATE_LO = (1.0 - np.sqrt(1.0 / 3.0)) / 2.0
SEPARATE_HI = (1.0 + np.sqrt(1.0 / 3.0)) / 2.0


class Regime(enum.Enum):
    SEPARATE = "separate"
    MERGE = "merge"


@dataclass
class Gmm2:
    p: float
    mu1: np.ndarray
    mu2: np.ndarray
    sigma1: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        self.mu1 = np.asarray(self.mu1, dtype=np.float64)
        self.mu2 = np.asarray(self.mu2, dtype=np.float64)
        d = self.mu1.size
        self.sigma1 = np.asarray(self.sigma1, dtype=np.float64).reshape(d, d)
        self.sigma2 = np.asarray(self.sigma2, dtype=np.float64).reshape(d, d)
        if not 0.0 < self.p < 1.0:
            raise ValueError("mixture prior p must lie in (0, 1)")
        for s in (self.sigma1, self.sigma2):
            if not np.allclose(s, s.T, atol=1e-12):
                raise ValueError("covariances must be symmetric")
            if np.linalg.eigvalsh(s).min() < -1e-10:
                raise ValueError("covariances must be positive semidefinite")

    @property
    def dim(self) -> int:
        return self.mu1.size

    @property
    def alpha(self) -> float:
        return self.p * (1.0 - self.p)

    @classmethod
    def isotropic(cls, p, mu1, mu2, var=1.0):
        d = len(mu1)
        eye = var * np.eye(d)
        return cls(p, mu1, mu2, eye, eye.copy())


@dataclass
class ScatterPair:
    sigma_w: np.ndarray
    sigma_b: np.ndarray


def scatter_matrices(g: Gmm2) -> ScatterPair:
    diff = g.mu1 - g.mu2
    return ScatterPair(sigma_w=g.p * g.sigma1 + (1.0 - g.p) * g.sigma2, sigma_b=np.outer(diff, diff))


def _quad_forms(g: Gmm2, theta):
    sp = scatter_matrices(g)
    theta = np.asarray(theta, dtype=np.float64)
    return sp, float(theta @ sp.sigma_b @ theta), float(theta @ sp.sigma_w @ theta)


def projection_kurtosis(g: Gmm2, theta) -> float:
    """Kurtosis of ``x @ theta`` for ``x ~ g``.

    ``3 + a(1-6a) b**2 / (a b + w)**2`` with ``a = p(1-p)``,
    ``b = theta' Sigma_b theta`` and ``w = theta' Sigma_w theta``; exact when
    both components share a covariance.
    """
    _, b, w = _quad_forms(g, theta)
    a = g.alpha
    var = a * b + w
    if not var > 0:
        raise ValueError("projection has zero variance")
    return 3.0 + a * (1.0 - 6.0 * a) * b * b / (var * var)


def projection_kurtosis_grad(g: Gmm2, theta) -> np.ndarray:
    sp, b, w = _quad_forms(g, theta)
    a = g.alpha
    c = a * (1.0 - 6.0 * a)
    var = a * b + w
    if not var > 0:
        raise ValueError("projection has zero variance")
    dk_db = 2.0 * c * b * w / var**3
    dk_dw = -2.0 * c * b * b / var**3
    theta = np.asarray(theta, dtype=np.float64)
    return dk_db * 2.0 * (sp.sigma_b @ theta) + dk_dw * 2.0 * (sp.sigma_w @ theta)


def phase_regime(p: float) -> Regime:
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    return Regime.SEPARATE if SEPARATE_LO <= p <= SEPARATE_HI else Regime.MERGE


def _fix_sign(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        v = -v
    return v


def lda_direction(sp: ScatterPair) -> np.ndarray:
    """Unit vector maximising ``theta' Sb theta / theta' Sw theta``."""
    if np.allclose(sp.sigma_b, 0.0):
        raise ValueError("between-class scatter is zero; no discriminant direction")
    try:
        vals, vecs = scipy.linalg.eigh(sp.sigma_b, sp.sigma_w)
    except np.linalg.LinAlgError as exc:
        raise ValueError("within-class scatter must be positive definite") from exc
    v = vecs[:, np.argmax(vals)]
    return _fix_sign(v / np.linalg.norm(v))


def merge_direction(sp: ScatterPair) -> np.ndarray:
    """Unit vector minimising ``theta' Sb theta / theta' Sw theta``."""
    try:
        vals, vecs = scipy.linalg.eigh(sp.sigma_b, sp.sigma_w)
    except np.linalg.LinAlgError as exc:
        raise ValueError("within-class scatter must be positive definite") from exc
    v = vecs[:, np.argmin(vals)]
    return _fix_sign(v / np.linalg.norm(v))


def grid_direction(sp: ScatterPair, maximize: bool = True, step_deg: float = 1.0) -> np.ndarray:
    """Brute-force 2-D search of the Rayleigh quotient over a half-circle grid."""
    if sp.sigma_w.shape != (2, 2):
        raise ValueError("grid search is 2-D only")
    angles = np.deg2rad(np.arange(0.0, 180.0, step_deg))
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    num = np.einsum("ki,ij,kj->k", dirs, sp.sigma_b, dirs)
    den = np.einsum("ki,ij,kj->k", dirs, sp.sigma_w, dirs)
    q = num / den
    return _fix_sign(dirs[np.argmax(q) if maximize else np.argmin(q)])


def angle_deg(u, v) -> float:
    """Unsigned angle between the lines spanned by ``u`` and ``v`` (0 to 90 degrees)."""
    c = abs(float(np.dot(u, v))) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(min(c, 1.0))))


@dataclass
class DirectionTrajectory:
    directions: np.ndarray  # (steps + 1) x d unit vectors
    kurtosis: np.ndarray  # closed-form kurtosis per row, NaN when not available
    betas: Optional[np.ndarray] = None

    @property
    def final(self) -> np.ndarray:
        return self.directions[-1]

    def to_rows(self):
        for i, (d, k) in enumerate(zip(self.directions, self.kurtosis)):
            yield [i, *d.tolist(), float(k)]


def minimize_projection_kurtosis(g: Gmm2, theta0, steps: int = 500, lr: float = 0.5) -> DirectionTrajectory:
    """Gradient descent on the closed-form kurtosis, renormalising to unit length each step."""
    theta = np.asarray(theta0, dtype=np.float64)
    norm = np.linalg.norm(theta)
    if norm == 0:
        raise ValueError("theta0 must be nonzero")
    theta = theta / norm
    dirs = [theta]
    kurts = [projection_kurtosis(g, theta)]
    for _ in range(steps):
        theta = theta - lr * projection_kurtosis_grad(g, theta)
        theta = theta / np.linalg.norm(theta)
        dirs.append(theta)
        kurts.append(projection_kurtosis(g, theta))
    return DirectionTrajectory(np.array(dirs), np.array(kurts))


def _schedule(lr):
    if isinstance(lr, (int, float)):
        return [(0, float(lr))]
    bps = sorted((int(e), float(r)) for e, r in lr)
    if not bps or bps[0][0] != 0:
        raise ValueError("lr schedule must start at epoch 0")
    return bps


def _rate(bps, epoch):
    rate = bps[0][1]
    for e, r in bps:
        if e <= epoch:
            rate = r
    return rate


def train_single_unit_vcl(samples, cfg: VclConfig, epochs: int = 60, batch_size: int = 20, lr=0.05,
                          momentum: float = 0.9, clip_norm: Optional[float] = 1.0, seed=0,
                          gmm: Optional[Gmm2] = None, engine: str = "kernel") -> DirectionTrajectory:
    """Train one linear unit ``rho = x @ theta`` with the variance constancy loss alone.

    Each minibatch contributes its first two consecutive subsets of
    ``cfg.n`` rows; ``theta`` and the unit's ``beta`` follow SGD with
    momentum, clipped jointly to ``clip_norm``.  ``lr`` is a rate or a list
    of ``(epoch, rate)`` breakpoints.  The direction is recorded after
    every epoch.

    ``engine="autodiff"`` runs each step through :func:`vcl_unit_loss` on the
    tape; ``engine="kernel"`` runs the same arithmetic in a fused epoch loop.
    """
    if engine not in ("kernel", "autodiff"):
        raise ValueError("engine must be 'kernel' or 'autodiff'")
    bps = _schedule(lr)
    x = np.ascontiguousarray(samples, dtype=np.float64)
    cfg.check_batch(batch_size)
    rng = np.random.default_rng(seed)
    d = x.shape[1]
    theta = rng.normal(size=d)
    theta /= np.linalg.norm(theta)
    beta = np.full(1, float(cfg.beta_init))
    vel = np.zeros(d + 1)
    clip = -1.0 if clip_norm is None else float(clip_norm)

    dirs, kurts, betas = [], [], []

    def record():
        u = theta / np.linalg.norm(theta)
        dirs.append(u.copy())
        kurts.append(projection_kurtosis(gmm, u) if gmm is not None else np.nan)
        betas.append(float(beta[0]))

    record()
    for epoch in range(epochs):
        rate = _rate(bps, epoch)
        order = rng.permutation(x.shape[0])
        if engine == "kernel":
            _kernels.unit_vcl_epoch(x, order, theta, beta, vel, cfg.n, batch_size, rate, momentum, clip)
        else:
            _autodiff_epoch(x, order, theta, beta, vel, cfg.n, batch_size, rate, momentum, clip)
        record()
    return DirectionTrajectory(np.array(dirs), np.array(kurts), np.array(betas))


def _autodiff_epoch(x, order, theta, beta, vel, n, batch_size, lr, momentum, clip):
    d = theta.size
    start = 0
    while start + 2 * n <= order.size:
        th = ad.Tensor(theta[:, None], requires_grad=True)
        be = ad.Tensor(beta, requires_grad=True)
        rho = ad.matmul(x[order[start:start + 2 * n]], th)
        loss = ad.mean(vcl_unit_loss(ad.rows(rho, 0, n), ad.rows(rho, n, 2 * n), be))
        ad.backward(loss)
        grad = np.concatenate([th.grad[:, 0], be.grad])
        gn = np.sqrt(grad @ grad)
        if clip > 0.0 and gn > clip:
            grad *= clip / gn
        vel *= momentum
        vel += grad
        theta -= lr * vel[:d]
        beta[0] -= lr * vel[d]
        start += batch_size


def circular_variance(directions) -> float:
    """Circular variance of axial 2-D directions (angles doubled); 0 = concentrated, 1 = uniform."""
    u = np.asarray(directions, dtype=np.float64)
    ang = 2.0 * np.arctan2(u[:, 1], u[:, 0])
    r = np.hypot(np.cos(ang).mean(), np.sin(ang).mean())
    return float(1.0 - r)

"""Variance constancy loss: two consecutive subsets, learnable per-unit beta.

For one unit with pre-activations split into subsets ``s1`` and ``s2`` the
loss is ``(1 - var(s1) / (var(s2) + beta))**2`` with unbiased variances.
Unit losses are averaged within a layer, summed across layers and scaled
by ``gamma``.
"""

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .moments import population_vcl  # noqa: F401  (re-exported)

DENOM_FLOOR = 1e-8


class VclConfigError(ValueError):
    pass


class VclDiagnostic(FloatingPointError):
    """``var(s2) + beta`` fell to or below the diagnostic floor."""


@dataclass(frozen=True)
class VclConfig:
    n: int = 2
    gamma: float = 0.01
    beta_init: float = 1.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise VclConfigError(f"subset size n must be an integer >= 2, got {self.n!r}")
        if not self.gamma >= 0:
            raise VclConfigError("gamma must be non-negative")
        if not self.beta_init > 0:
            raise VclConfigError("beta_init must be positive")

    def check_batch(self, batch_size: int) -> None:
        if 2 * self.n > batch_size:
            raise VclConfigError(f"2n = {2 * self.n} exceeds the minibatch size {batch_size}")


class VclUnitState:
    """One learnable beta per unit of a layer."""

    def __init__(self, units: int, beta_init: float = 1.0):
        self.beta = Tensor(np.full(units, float(beta_init)), requires_grad=True, name="vcl_beta")

    def parameters(self):
        return [self.beta]


def split_minibatch(pre_act: Tensor, n: int):
    """First two consecutive row blocks of size ``n``; rows past ``2n`` are unused."""
    pre_act = ad.as_tensor(pre_act)
    if pre_act.shape[0] < 2 * n:
        raise VclConfigError(f"batch of {pre_act.shape[0]} rows cannot supply two subsets of {n}")
    return ad.rows(pre_act, 0, n), ad.rows(pre_act, n, 2 * n)


def vcl_unit_loss(s1, s2, beta, check: bool = False) -> Tensor:
    """Per-unit ``(1 - var(s1) / (var(s2) + beta))**2``."""
    v1 = ad.batch_variance(s1, unbiased=True)
    denom = ad.batch_variance(s2, unbiased=True) + beta
    if check and np.any(denom.data <= DENOM_FLOOR):
        bad = np.flatnonzero(denom.data <= DENOM_FLOOR)
        raise VclDiagnostic(f"var(s2) + beta <= {DENOM_FLOOR} for units {bad.tolist()}")
    return ad.square(1.0 - v1 / denom)


def vcl_layer_loss(pre_act, state: VclUnitState, cfg: VclConfig, check: bool = False) -> Tensor:
    s1, s2 = split_minibatch(pre_act, cfg.n)
    return ad.mean(vcl_unit_loss(s1, s2, state.beta, check=check))


def vcl_total_loss(layer_losses: Sequence[Tensor], gamma: float) -> Tensor:
    if not layer_losses:
        raise ValueError("need at least one layer loss")
    total = layer_losses[0]
    for loss in layer_losses[1:]:
        total = total + loss
    return total * gamma

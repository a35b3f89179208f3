"""Deterministic minibatch SGD for the MLP, with optional variance constancy loss."""

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .layers import MLP, NORMALIZERS
from .moments import column_kurtosis
from .vcl import VclConfig, VclUnitState, vcl_layer_loss, vcl_total_loss

HISTORY_COLUMNS = ("epoch", "train_loss", "train_err", "val_err", "mean_kurtosis", "seconds",
                   "lr", "vcl_loss", "clip_events")


class ConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, message, history, epoch, batch):
        super().__init__(message)
        self.history = history
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    batch_size: int = 20
    epochs: int = 500
    lr_schedule: List[Tuple[int, float]] = field(default_factory=lambda: [(0, 0.01), (200, 0.001)])
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: Optional[float] = 1.0
    seed: int = 0
    vcl: Optional[VclConfig] = None
    normalizer: str = "none"

    def __post_init__(self):
        self.lr_schedule = [(int(e), float(r)) for e, r in self.lr_schedule]
        if self.normalizer not in NORMALIZERS:
            raise ConfigError(f"normalizer must be one of {NORMALIZERS}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be >= 2")
        if not self.lr_schedule or self.lr_schedule[0][0] != 0:
            raise ConfigError("lr schedule must start with a breakpoint at epoch 0")
        epochs = [e for e, _ in self.lr_schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError("lr schedule breakpoints must be strictly increasing")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if self.normalizer == "vcl" and self.vcl is None:
            self.vcl = VclConfig()
        if self.vcl is not None:
            try:
                self.vcl.check_batch(self.batch_size)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None

    @property
    def vcl_enabled(self) -> bool:
        return self.normalizer == "vcl"

    def lr_at(self, epoch: int) -> float:
        rate = self.lr_schedule[0][1]
        for e, r in self.lr_schedule:
            if e <= epoch:
                rate = r
            else:
                break
        return rate

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_schedule"] = [list(bp) for bp in self.lr_schedule]
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_err: float
    val_err: float
    mean_kurtosis: float
    seconds: float = field(compare=False)
    lr: float = 0.0
    vcl_loss: float = 0.0
    clip_events: int = 0


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def total_clip_events(self) -> int:
        return int(sum(r.clip_events for r in self.records))

    def write(self, path, delimiter="\t") -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, delimiter=delimiter)
            w.writerow(HISTORY_COLUMNS)
            for r in self.records:
                w.writerow([repr(getattr(r, c)) if isinstance(getattr(r, c), float) else getattr(r, c)
                            for c in HISTORY_COLUMNS])

    @classmethod
    def read(cls, path, delimiter="\t") -> "TrainHistory":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh, delimiter=delimiter))
        recs = []
        for row in rows:
            recs.append(EpochRecord(
                epoch=int(row["epoch"]), train_loss=float(row["train_loss"]), train_err=float(row["train_err"]),
                val_err=float(row["val_err"]), mean_kurtosis=float(row["mean_kurtosis"]),
                seconds=float(row["seconds"]), lr=float(row["lr"]), vcl_loss=float(row["vcl_loss"]),
                clip_events=int(row["clip_events"])))
        return cls(recs)


def clip_gradients_per_layer(groups: Sequence[Sequence], max_norm: float) -> List[bool]:
    """Rescale each layer's gradients so their joint L2 norm is at most ``max_norm``.

    ``groups`` holds one list of tensors per layer.  Returns a flag per
    layer telling whether it was clipped.
    """
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    clipped = []
    for group in groups:
        sq = sum(float(np.dot(p.grad.ravel(), p.grad.ravel())) for p in group if p.grad is not None)
        norm = math.sqrt(sq)
        if norm > max_norm:
            scale = max_norm / norm
            for p in group:
                if p.grad is not None:
                    p.grad = p.grad * scale
            clipped.append(True)
        else:
            clipped.append(False)
    return clipped


def sgd_step(params, grads, buffers, lr: float, momentum: float, weight_decay: float) -> None:
    """Classical momentum with L2 decay folded into the gradient, in place.

    ``v <- momentum * v + (grad + weight_decay * param)``; ``param <- param - lr * v``.
    ``params`` may hold Tensors or arrays; a ``None`` gradient counts as zero.
    """
    if not len(params) == len(grads) == len(buffers):
        raise ValueError("params, grads and buffers must align")
    for p, g, v in zip(params, grads, buffers):
        data = p.data if isinstance(p, ad.Tensor) else p
        if v.shape != data.shape or (g is not None and np.shape(g) != data.shape):
            raise ValueError(f"shape mismatch: param {data.shape}, buffer {v.shape}")
        v *= momentum
        if g is not None:
            v += g
        if weight_decay:
            v += weight_decay * data
        data -= lr * v


def smoothed_validation_selection(val_errors: Sequence[float], mask: int = 10) -> Tuple[int, float]:
    """Trailing moving average (window shrinks at the start); earliest argmin wins ties.

    Window sums use ``math.fsum`` and values within 1e-12 (relative) of the
    minimum count as tied, so rounding noise cannot skip an earlier epoch.
    """
    v = [float(x) for x in val_errors]
    if not v:
        raise ValueError("empty validation series")
    if mask < 1:
        raise ValueError("mask must be >= 1")
    smooth = np.array([math.fsum(v[max(0, i + 1 - mask):i + 1]) / min(i + 1, mask) for i in range(len(v))])
    low = smooth.min()
    best = int(np.flatnonzero(smooth <= low + 1e-12 * max(1.0, abs(low)))[0])
    return best, float(smooth[best])


class TrainState:
    """Optimizer-side state for one model: per-layer groups, momentum buffers, betas."""

    def __init__(self, model: MLP, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.vcl_states: List[VclUnitState] = []
        groups = [list(g) for g in model.layer_groups()]
        if cfg.vcl_enabled:
            for i, dense in enumerate(model.hidden):
                st = VclUnitState(dense.n_out, cfg.vcl.beta_init)
                self.vcl_states.append(st)
                groups[i] = groups[i] + st.parameters()
        self.groups = groups
        self.params = [p for g in groups for p in g]
        self.buffers = [np.zeros_like(p.data) for p in self.params]
        rng_root = np.random.SeedSequence(cfg.seed)
        shuffle_seq, dropout_seq = rng_root.spawn(2)
        self.shuffle_rng = np.random.default_rng(shuffle_seq)
        self.dropout_rng = np.random.default_rng(dropout_seq)


def train_step(state: TrainState, xb: np.ndarray, yb: np.ndarray, lr: float):
    """One forward/backward/clip/update on a minibatch.

    Returns ``(task_loss, vcl_loss, clipped_layer_count)``.
    """
    cfg, model = state.cfg, state.model
    model.train()
    logits = model(xb, rng=state.dropout_rng)
    loss = ad.cross_entropy(logits, yb)
    task = loss.item()
    reg = 0.0
    if cfg.vcl_enabled:
        layer_losses = [vcl_layer_loss(z, st, cfg.vcl, check=True)
                        for z, st in zip(model.pre_activations(), state.vcl_states)]
        total = vcl_total_loss(layer_losses, cfg.vcl.gamma)
        reg = total.item()
        loss = loss + total
    for p in state.params:
        p.grad = None
    ad.backward(loss)
    n_clipped = 0
    if cfg.clip_norm is not None:
        n_clipped = sum(clip_gradients_per_layer(state.groups, cfg.clip_norm))
    sgd_step(state.params, [p.grad for p in state.params], state.buffers, lr, cfg.momentum, cfg.weight_decay)
    return task, reg, n_clipped


def evaluate(model: MLP, ds: Dataset):
    """Return ``(error rate, mean hidden pre-activation kurtosis)`` in eval mode."""
    if len(ds) == 0:
        return math.nan, math.nan
    prev = model.mode
    model.eval()
    pre, _ = model.forward_collect(ds.features)
    with ad.no_grad():
        logits = model(ds.features).data
    model._set_mode(prev)
    err = float(np.mean(np.argmax(logits, axis=1) != ds.labels))
    return err, mean_layer_kurtosis(pre)


def mean_layer_kurtosis(pre_acts: Sequence[np.ndarray]) -> float:
    """Per-layer mean unit kurtosis, averaged over layers; constant units are skipped."""
    per_layer = []
    for z in pre_acts:
        k = column_kurtosis(z)
        k = k[np.isfinite(k)]
        if k.size:
            per_layer.append(float(k.mean()))
    return float(np.mean(per_layer)) if per_layer else math.nan


def train(model: MLP, train_set: Dataset, val_set: Optional[Dataset], cfg: TrainConfig,
          state: Optional[TrainState] = None, log=None) -> TrainHistory:
    """Train ``model`` in place and return the per-epoch history.

    Raises :class:`TrainingAborted` (carrying the partial history) when a
    minibatch loss is not finite.
    """
    if len(train_set) == 0:
        raise ConfigError("empty training set")
    state = state or TrainState(model, cfg)
    hist = TrainHistory()
    count = len(train_set)
    min_rows = 2 * cfg.vcl.n if cfg.vcl_enabled else (2 if model.spec.normalizer == "batchnorm" else 1)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        order = state.shuffle_rng.permutation(count)
        task_sum = reg_sum = 0.0
        batches = clips = 0
        for b, start in enumerate(range(0, count, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            if idx.size < min_rows:
                continue
            task, reg, n_clipped = train_step(state, train_set.features[idx], train_set.labels[idx], lr)
            if not (math.isfinite(task) and math.isfinite(reg)):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b} (task={task}, vcl={reg})",
                                      hist, epoch, b)
            task_sum += task + reg
            reg_sum += reg
            batches += 1
            clips += n_clipped
        train_err, kurt = evaluate(model, train_set)
        val_err, _ = evaluate(model, val_set) if val_set is not None else (math.nan, None)
        rec = EpochRecord(epoch=epoch, train_loss=task_sum / max(batches, 1), train_err=train_err, val_err=val_err,
                          mean_kurtosis=kurt, seconds=time.perf_counter() - t0, lr=lr,
                          vcl_loss=reg_sum / max(batches, 1), clip_events=clips)
        hist.records.append(rec)
        if log is not None:
            log(rec)
    return hist

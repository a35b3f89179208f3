"""Fully-connected layers, normalisation baselines, dropout and the MLP container."""

import struct
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODEL_MAGIC = b"VCLM"
MODEL_VERSION = 1

NORMALIZERS = ("none", "batchnorm", "layernorm", "vcl")


def init_std(fan_in: int, activation: str) -> float:
    gain = 2.0 if activation in ("relu", "leaky_relu") else 1.0
    return float(np.sqrt(gain / fan_in))


class DenseLayer:
    """Affine map ``x @ W + b`` followed by an elementwise activation.

    The pre-activation of the most recent forward pass is kept in
    ``pre_activation_cache`` as a live tape node, so losses computed from
    it backpropagate into ``weight`` and ``bias``.
    """

    def __init__(self, n_in: int, n_out: int, activation: str = "relu", rng=None, weight=None, bias=None):
        if activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.activation = activation
        if weight is None:
            rng = np.random.default_rng() if rng is None else rng
            weight = rng.normal(0.0, init_std(n_in, activation), (n_in, n_out))
        self.weight = Tensor(weight, requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(n_out) if bias is None else bias, requires_grad=True, name="bias")
        if self.weight.shape != (n_in, n_out) or self.bias.shape != (n_out,):
            raise ValueError("weight/bias shapes do not match layer size")
        self.pre_activation_cache: Optional[Tensor] = None

    @property
    def n_in(self):
        return self.weight.shape[0]

    @property
    def n_out(self):
        return self.weight.shape[1]

    def parameters(self):
        return [self.weight, self.bias]

    def affine(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ValueError(f"expected input with {self.n_in} columns, got shape {x.shape}")
        z = ad.matmul(x, self.weight) + self.bias
        self.pre_activation_cache = z
        return z

    def __call__(self, x) -> Tensor:
        return ad.ACTIVATIONS[self.activation](self.affine(x))


def dense_forward(layer: DenseLayer, x) -> Tensor:
    return layer(x)


class BatchNormLayer:
    def __init__(self, units: int, momentum: float = 0.1, eps: float = 1e-5):
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.gamma = Tensor(np.ones(units), requires_grad=True, name="bn_gamma")
        self.beta_shift = Tensor(np.zeros(units), requires_grad=True, name="bn_shift")
        self.running_mean = np.zeros(units)
        self.running_var = np.ones(units)
        self.momentum = momentum
        self.eps = eps
        self.mode = "train"

    def parameters(self):
        return [self.gamma, self.beta_shift]

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if self.mode == "train":
            n = x.shape[0]
            if n < 2:
                raise ValueError("batchnorm in train mode needs a batch of at least 2")
            batch_mean = x.data.mean(axis=0)
            xhat, var = ad.standardize(x, axis=0, eps=self.eps)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * batch_mean
            self.running_var = (1 - m) * self.running_var + m * var * n / (n - 1)
        else:
            xhat = (x - self.running_mean) * (1.0 / np.sqrt(self.running_var + self.eps))
        return xhat * self.gamma + self.beta_shift


def batchnorm_forward(layer: BatchNormLayer, x) -> Tensor:
    return layer(x)


def layernorm_forward(x, gamma, shift, eps=1e-5) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ValueError("layernorm needs a 2-D input with at least 2 features")
    xhat, _ = ad.standardize(x, axis=1, eps=eps)
    return xhat * gamma + shift


class LayerNormLayer:
    def __init__(self, units: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(units), requires_grad=True, name="ln_gamma")
        self.beta_shift = Tensor(np.zeros(units), requires_grad=True, name="ln_shift")
        self.eps = eps
        self.mode = "train"

    def parameters(self):
        return [self.gamma, self.beta_shift]

    def __call__(self, x) -> Tensor:
        return layernorm_forward(x, self.gamma, self.beta_shift, self.eps)


def dropout(x, rate: float, mode: str = "train", kind: str = "standard", rng=None) -> Tensor:
    """Inverted dropout, or SELU-compatible alpha dropout.

    ``rng`` may be a ``numpy.random.Generator`` or an integer seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    x = ad.as_tensor(x)
    if mode != "train" or rate == 0.0:
        return x
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    keep = rng.random(x.shape) >= rate
    if kind == "standard":
        return x * (keep / (1.0 - rate))
    if kind == "alpha":
        a_prime = -ad.SELU_LAMBDA * ad.SELU_ALPHA
        q = 1.0 - rate
        a = (q + a_prime * a_prime * q * rate) ** -0.5
        b = -a * a_prime * rate
        return x * (keep * a) + ((~keep) * (a * a_prime) + b)
    raise ValueError(f"unknown dropout kind {kind!r}")


@dataclass
class MLPSpec:
    n_in: int
    n_out: int
    hidden: List[int]
    activation: str = "relu"
    normalizer: str = "none"
    dropout_rate: float = 0.0
    dropout_kind: str = "standard"
    dropout_placement: str = "last"  # "last" hidden layer or "all" hidden layers
    bn_momentum: float = 0.1
    norm_eps: float = 1e-5


class MLP:
    """Stack of hidden ``DenseLayer`` blocks and a linear output layer.

    A hidden block is ``act(norm(x @ W + b))``; the pre-activation read by
    the variance-constancy loss is the dense output before any norm.
    """

    def __init__(self, spec: MLPSpec, rng=None):
        if spec.normalizer not in NORMALIZERS:
            raise ValueError(f"unknown normalizer {spec.normalizer!r}")
        if spec.dropout_placement not in ("last", "all"):
            raise ValueError("dropout_placement must be 'last' or 'all'")
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.spec = spec
        self.hidden: List[DenseLayer] = []
        self.norms: list = []
        width = spec.n_in
        for h in spec.hidden:
            self.hidden.append(DenseLayer(width, h, spec.activation, rng=rng))
            if spec.normalizer == "batchnorm":
                self.norms.append(BatchNormLayer(h, spec.bn_momentum, spec.norm_eps))
            elif spec.normalizer == "layernorm":
                self.norms.append(LayerNormLayer(h, spec.norm_eps))
            else:
                self.norms.append(None)
            width = h
        self.output = DenseLayer(width, spec.n_out, "linear", rng=rng)
        self.mode = "train"

    def train(self):
        self._set_mode("train")

    def eval(self):
        self._set_mode("eval")

    def _set_mode(self, mode):
        self.mode = mode
        for nrm in self.norms:
            if nrm is not None:
                nrm.mode = mode

    def layer_groups(self):
        """Parameters grouped per layer (hidden blocks then output)."""
        groups = []
        for dense, nrm in zip(self.hidden, self.norms):
            g = dense.parameters()
            if nrm is not None:
                g = g + nrm.parameters()
            groups.append(g)
        groups.append(self.output.parameters())
        return groups

    def parameters(self):
        return [p for g in self.layer_groups() for p in g]

    def _dropout_here(self, i):
        if self.spec.dropout_rate <= 0:
            return False
        return self.spec.dropout_placement == "all" or i == len(self.hidden) - 1

    def __call__(self, x, rng=None) -> Tensor:
        h = ad.as_tensor(x)
        act = ad.ACTIVATIONS[self.spec.activation]
        for i, (dense, nrm) in enumerate(zip(self.hidden, self.norms)):
            z = dense.affine(h)
            if nrm is not None:
                z = nrm(z)
            h = act(z)
            if self._dropout_here(i):
                h = dropout(h, self.spec.dropout_rate, self.mode, self.spec.dropout_kind, rng)
        return self.output.affine(h)

    def pre_activations(self) -> List[Tensor]:
        return [d.pre_activation_cache for d in self.hidden]

    def forward_collect(self, x):
        """Eval-style pass returning per-hidden-layer (pre, post) activation arrays."""
        pre, post = [], []
        with ad.no_grad():
            h = ad.as_tensor(x)
            act = ad.ACTIVATIONS[self.spec.activation]
            for dense, nrm in zip(self.hidden, self.norms):
                z = dense.affine(h)
                pre.append(z.data)
                if nrm is not None:
                    z = nrm(z)
                h = act(z)
                post.append(h.data)
        return pre, post

    def predict(self, x) -> np.ndarray:
        prev = self.mode
        self.eval()
        with ad.no_grad():
            logits = self(x).data
        self._set_mode(prev)
        return logits


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

_NORM_TAGS = {"none": 0, "batchnorm": 1, "layernorm": 2, "vcl": 3}
_ACT_TAGS = {"relu": 0, "leaky_relu": 1, "elu": 2, "selu": 3, "linear": 4}


def _write_arrays(fh, *arrays):
    for a in arrays:
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_array(buf, offset, shape):
    count = int(np.prod(shape))
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
    return arr, offset + 8 * count


def save_model(model: MLP, path) -> None:
    """Write ``model`` to a little-endian binary container.

    Layout: magic ``VCLM``, u32 version, u32 layer count, u8 normalizer tag,
    u8 activation tag, f8 bn momentum, f8 norm eps, then per layer the
    u32 (in, out) shape; then per layer the row-major weight, bias and,
    for normalised hidden layers, gamma, shift (and batchnorm running
    mean, running var).
    """
    spec = model.spec
    layers = model.hidden + [model.output]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(layers)))
        fh.write(struct.pack("<BBdd", _NORM_TAGS[spec.normalizer], _ACT_TAGS[spec.activation],
                             spec.bn_momentum, spec.norm_eps))
        for layer in layers:
            fh.write(struct.pack("<II", layer.n_in, layer.n_out))
        for i, layer in enumerate(layers):
            _write_arrays(fh, layer.weight.data, layer.bias.data)
            nrm = model.norms[i] if i < len(model.hidden) else None
            if nrm is not None:
                _write_arrays(fh, nrm.gamma.data, nrm.beta_shift.data)
                if isinstance(nrm, BatchNormLayer):
                    _write_arrays(fh, nrm.running_mean, nrm.running_var)


def load_model(path) -> MLP:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    norm_tag, act_tag, momentum, eps = struct.unpack_from("<BBdd", buf, 12)
    offset = 12 + struct.calcsize("<BBdd")
    shapes = []
    for _ in range(count):
        shapes.append(struct.unpack_from("<II", buf, offset))
        offset += 8
    normalizer = {v: k for k, v in _NORM_TAGS.items()}[norm_tag]
    activation = {v: k for k, v in _ACT_TAGS.items()}[act_tag]
    spec = MLPSpec(n_in=shapes[0][0], n_out=shapes[-1][1], hidden=[s[1] for s in shapes[:-1]],
                   activation=activation, normalizer=normalizer, bn_momentum=momentum, norm_eps=eps)
    model = MLP(spec, rng=0)
    layers = model.hidden + [model.output]
    for i, (layer, (n_in, n_out)) in enumerate(zip(layers, shapes)):
        w, offset = _read_array(buf, offset, (n_in, n_out))
        b, offset = _read_array(buf, offset, (n_out,))
        layer.weight.data[...] = w
        layer.bias.data[...] = b
        nrm = model.norms[i] if i < len(model.hidden) else None
        if nrm is not None:
            g, offset = _read_array(buf, offset, (n_out,))
            s, offset = _read_array(buf, offset, (n_out,))
            nrm.gamma.data[...] = g
            nrm.beta_shift.data[...] = s
            if isinstance(nrm, BatchNormLayer):
                nrm.running_mean, offset = _read_array(buf, offset, (n_out,))
                nrm.running_var, offset = _read_array(buf, offset, (n_out,))
    if offset != len(buf):
        raise ValueError(f"{path}: {len(buf) - offset} trailing bytes")
    return model

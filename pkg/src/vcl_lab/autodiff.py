"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

Every op builds its output eagerly and, when any input requires a
gradient, records a closure mapping the output gradient to input
gradients.  :func:`backward` walks the recorded graph once in reverse
topological order and frees it afterwards.
"""

import contextlib
import math

import numpy as np

SELU_LAMBDA = 1.0507009873554804934193349852946
SELU_ALPHA = 1.6732632423543772848170429916717

_grad_enabled = True
_debug = False


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> None:
    """In debug mode, division by zero raises instead of producing inf/nan."""
    global _debug
    _debug = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{rg})"

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if _debug and np.any(b.data == 0):
        raise ZeroDivisionError("division by zero in Tensor div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = g / b.data
            gb = -g * out / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0  # subgradient 0 at exactly 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def elu(a, alpha=1.0):
    a = as_tensor(a)
    mask = a.data > 0
    em1 = alpha * np.expm1(np.minimum(a.data, 0.0))
    out = np.where(mask, a.data, em1)
    d = np.where(mask, 1.0, em1 + alpha)
    return _make(out, (a,), lambda g: (g * d,))


def selu(a):
    a = as_tensor(a)
    mask = a.data > 0
    em1 = SELU_ALPHA * np.expm1(np.minimum(a.data, 0.0))
    out = SELU_LAMBDA * np.where(mask, a.data, em1)
    d = SELU_LAMBDA * np.where(mask, 1.0, em1 + SELU_ALPHA)
    return _make(out, (a,), lambda g: (g * d,))


def identity(a):
    return as_tensor(a)


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "elu": elu,
    "selu": selu,
    "linear": identity,
}


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None):
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(out, (a,), bw)


def getitem(a, idx):
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw)


def rows(a, start, stop):
    """Contiguous row slice ``a[start:stop]``; cheaper backward than :func:`getitem`."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,))


def concat(tensors, axis=0):
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


# ---------------------------------------------------------------------------
# linear algebra and statistics
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def batch_variance(x, unbiased=True):
    """Per-column variance along axis 0 of an ``n x u`` tensor."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ValueError("batch_variance expects a 2-D tensor")
    n = x.shape[0]
    if n < 2:
        raise ValueError("batch_variance needs at least 2 rows")
    denom = n - 1 if unbiased else n
    dev = x.data - x.data.mean(axis=0)
    out = (dev * dev).sum(axis=0) / denom

    def bw(g):
        return (2.0 * dev * (g / denom),)

    return _make(out, (x,), bw)


def standardize(x, axis, eps=0.0):
    """``(x - mean) / sqrt(var + eps)`` along ``axis`` with the divisor-n variance.

    Returns the normalised tensor and the (detached) biased variance.
    """
    x = as_tensor(x)
    m = x.shape[axis]
    dev = x.data - x.data.mean(axis=axis, keepdims=True)
    var = (dev * dev).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = dev * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (x,), bw), var.squeeze(axis)


def log_softmax(z):
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make(out, (z,), bw)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy of integer ``labels``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(n), labels]))

    def bw(g):
        p = np.exp(shifted - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.requires_grad = False


def numerical_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        fp = f(x)
        x.flat[i] = old - h
        fm = f(x)
        x.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


def grad_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Max elementwise relative error, falling back to absolute error below ``floor``."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    err = np.abs(a - b) / scale
    return math.inf if np.isnan(err).any() else float(err.max())


def probe_rel_error(fn, inputs, rng, h: float = 1e-5, floor: float = 1e-8) -> float:
    """Directional gradient check of a scalar ``fn`` along one random direction.

    Draws a unit Gaussian direction ``v`` over all ``inputs`` jointly and
    compares ``sum(grad . v)`` from the tape with the central difference
    ``(f(x + h v) - f(x - h v)) / (2h)``.
    """
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    vs = [rng.standard_normal(x.shape) for x in xs]
    norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
    vs = [v / norm for v in vs]
    ts = [Tensor(x, requires_grad=True) for x in xs]
    backward(fn(*ts))
    analytic = sum(float(np.sum((t.grad if t.grad is not None else 0.0) * v)) for t, v in zip(ts, vs))
    fp = fn(*[Tensor(x + h * v) for x, v in zip(xs, vs)]).item()
    fm = fn(*[Tensor(x - h * v) for x, v in zip(xs, vs)]).item()
    numeric = (fp - fm) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)

"""Dense-tensor reverse-mode automatic differentiation with an Adam optimizer.

Everything is float64. A :class:`Tape` records operations executed while it is
active (``with Tape():``); :func:`backward` replays the record once in reverse
and accumulates gradients into ``Tensor.grad``. Broadcasting is restricted to
scalar-vs-tensor; anything fancier goes through explicit ``reshape`` /
``expand`` ops so shape bugs fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeMismatch

LEAKY_RELU_SLOPE = 0.01

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed operations; one backward pass per traversal.

    A tape and the tensors recorded on it are a single-threaded unit.
    """

    def __init__(self):
        self._nodes = []  # (output tensor, backward closure)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor):
        if loss.data.size != 1:
            raise NumericError(f"backward: loss must be scalar, got shape {loss.shape}")
        _accum(loss, np.ones_like(loss.data))
        for out, fn in reversed(self._nodes):
            if out.grad is not None:
                fn(out.grad)


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _accum(t: Tensor, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _record(out: Tensor, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append((out, backward_fn))
    return out


def _check_finite(op, *tensors):
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise NumericError(f"{op}: non-finite input")


def _binary_shapes(op, a, b):
    """Equal shapes, or one side a scalar (size-1). Returns (a_scalar, b_scalar)."""
    if a.data.shape == b.data.shape:
        return False, False
    if a.data.size == 1:
        return True, False
    if b.data.size == 1:
        return False, True
    raise ShapeMismatch(op, a.shape, b.shape)


def _reduce_to(g, t):
    """Reduce a full-shape gradient back to a scalar operand's shape."""
    if t.data.size == 1:
        return np.sum(g).reshape(t.data.shape)
    return g


# ---------------------------------------------------------------------------
# Forward operations
# ---------------------------------------------------------------------------

def add(a, b):
    _check_finite("add", a, b)
    _binary_shapes("add", a, b)
    out = Tensor(a.data + b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a))
        if b.requires_grad:
            _accum(b, _reduce_to(g, b))

    return _record(out, (a, b), bw)


def sub(a, b):
    _check_finite("sub", a, b)
    _binary_shapes("sub", a, b)
    out = Tensor(a.data - b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g, a))
        if b.requires_grad:
            _accum(b, _reduce_to(-g, b))

    return _record(out, (a, b), bw)


def hadamard(a, b):
    _check_finite("hadamard", a, b)
    _binary_shapes("hadamard", a, b)
    out = Tensor(a.data * b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, _reduce_to(g * b.data, a))
        if b.requires_grad:
            _accum(b, _reduce_to(g * a.data, b))

    return _record(out, (a, b), bw)


def scale(a, c: float):
    _check_finite("scale", a)
    c = float(c)
    if not np.isfinite(c):
        raise NumericError("scale: non-finite scalar")
    out = Tensor(a.data * c)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * c)

    return _record(out, (a,), bw)


def matmul(a, b):
    _check_finite("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _record(out, (a, b), bw)


def concat(tensors, axis=-1):
    tensors = tuple(tensors)
    _check_finite("concat", *tensors)
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        raise ShapeMismatch("concat", *[t.shape for t in tensors])
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _record(out, tensors, bw)


def slice_axis(a, start, stop, axis=-1):
    _check_finite("slice", a)
    axis = axis % a.data.ndim
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(a.data[idx])

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _record(out, (a,), bw)


def reshape(a, shape):
    _check_finite("reshape", a)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _record(out, (a,), bw)


def expand(a, shape):
    """Explicit broadcast to `shape`; the backward pass sums the extra axes."""
    _check_finite("expand", a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch("expand", a.shape, shape)
    out = Tensor(np.array(data))

    def bw(g):
        if a.requires_grad:
            extra = g.ndim - a.data.ndim
            red = g.sum(axis=tuple(range(extra))) if extra else g
            axes = tuple(i for i, n in enumerate(a.data.shape) if n == 1 and red.shape[i] != 1)
            if axes:
                red = red.sum(axis=axes, keepdims=True)
            _accum(a, red)

    return _record(out, (a,), bw)


def tsum(a, axis=None):
    _check_finite("sum", a)
    out = Tensor(np.sum(a.data, axis=axis))

    def bw(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.broadcast_to(g, a.data.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _record(out, (a,), bw)


def tmean(a, axis=None):
    _check_finite("mean", a)
    n = a.data.size if axis is None else a.data.shape[axis]
    out = Tensor(np.mean(a.data, axis=axis))

    def bw(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.broadcast_to(g / n, a.data.shape))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis) / n, a.data.shape))

    return _record(out, (a,), bw)


def tanh(a):
    _check_finite("tanh", a)
    y = np.tanh(a.data)
    out = Tensor(y)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), bw)


def sigmoid(a):
    _check_finite("sigmoid", a)
    x = a.data
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(y)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * y * (1.0 - y))

    return _record(out, (a,), bw)


def leaky_relu(a):
    _check_finite("leaky_relu", a)
    mask = a.data >= 0
    out = Tensor(np.where(mask, a.data, LEAKY_RELU_SLOPE * a.data))

    def bw(g):
        if a.requires_grad:
            _accum(a, g * np.where(mask, 1.0, LEAKY_RELU_SLOPE))

    return _record(out, (a,), bw)


def square(a):
    _check_finite("square", a)
    out = Tensor(a.data * a.data)

    def bw(g):
        if a.requires_grad:
            _accum(a, g * 2.0 * a.data)

    return _record(out, (a,), bw)


ACTIVATIONS = {"tanh": tanh, "sigmoid": sigmoid, "leakyrelu": leaky_relu}

_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "scale": scale,
    "concat": concat,
    "slice": slice_axis,
    "sum": tsum,
    "mean": tmean,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "leaky_relu": leaky_relu,
    "square": square,
    "reshape": reshape,
    "expand": expand,
}


def forward_op(kind, *args, **kwargs):
    """Dispatch a forward operation by name."""
    if kind not in _OPS:
        raise ValueError(f"unknown op kind {kind!r}")
    return _OPS[kind](*args, **kwargs)


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from `loss`."""
    if loss._tape is None:
        raise NumericError("backward: loss tensor is not attached to a tape")
    loss._tape.backward(loss)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients of f and central differences.

    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    x.zero_grad()
    prev = x.requires_grad
    x.requires_grad = True
    with Tape() as tape:
        loss = f(x)
        if loss.data.size != 1:
            raise NumericError("grad_check: f must return a scalar")
        tape.backward(loss)
    x.requires_grad = prev
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("grad_check: non-finite function evaluation")
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on `params` (numpy arrays)."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("adam_step", (len(params),), (len(grads),))
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch("adam_step", p.shape, g.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    """Stateful wrapper around :func:`adam_step` for a list of Tensors."""

    def __init__(self, tensors, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = list(tensors)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for t in self.tensors:
            t.zero_grad()

    def step(self, max_grad_norm=None):
        grads = [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.tensors]
        if max_grad_norm is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > max_grad_norm:
                grads = [g * (max_grad_norm / norm) for g in grads]
        adam_step([t.data for t in self.tensors], grads, self.state)


# ---------------------------------------------------------------------------
# Checkpoint I/O  (format_version 1; values with >= 17 significant digits)
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.17g}"


def save_checkpoint(path, named_tensors, metadata=None):
    """Write named tensors as JSON; decimal values keep 17 significant digits."""
    parts = ['{"format_version": 1']
    if metadata is not None:
        parts.append(', "metadata": ' + json.dumps(metadata, sort_keys=True))
    entries = []
    for name, tensor in named_tensors:
        data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
        values = ", ".join(_fmt(v) for v in data.reshape(-1))
        entries.append(
            '{"name": %s, "shape": %s, "values": [%s]}'
            % (json.dumps(name), json.dumps(list(data.shape)), values)
        )
    parts.append(', "tensors": [' + ", ".join(entries) + "]}")
    with open(path, "w") as fh:
        fh.write("".join(parts))


def load_checkpoint(path):
    """Returns (ordered dict name -> np.ndarray, metadata or None)."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    tensors = {}
    for entry in doc["tensors"]:
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        tensors[entry["name"]] = arr
    return tensors, doc.get("metadata")

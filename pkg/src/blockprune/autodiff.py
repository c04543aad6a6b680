"""Dense tensors with tape-based reverse-mode differentiation.

Only what a small post-LN encoder needs is here.  Operations record
themselves on the innermost active :class:`Tape`; outside a tape they run
as plain numpy.  Broadcasting is limited to a right operand whose shape is
a trailing suffix of the left operand's shape.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "AdamState", "Adam", "adam_step", "make_rng",
    "tensor", "matmul", "linear", "add", "mul", "scale", "relu", "gelu",
    "sigmoid", "softmax", "log_softmax", "layer_norm", "embedding_lookup",
    "cross_entropy", "kl_distill", "reshape", "transpose", "take_first",
    "dropout", "sum_all", "mean_all", "elementwise", "backward",
    "check_mode", "get_default_dtype",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class _Mode:
    dtype = np.float32
    checked = False


_mode = _Mode()
_tapes: list["Tape"] = []


def get_default_dtype():
    return _mode.dtype


@contextlib.contextmanager
def check_mode(dtype=np.float64, checked=True):
    """Switch float precision and finite-value checking for the block."""
    saved = (_mode.dtype, _mode.checked)
    _mode.dtype, _mode.checked = np.dtype(dtype).type, checked
    try:
        yield
    finally:
        _mode.dtype, _mode.checked = saved


def make_rng(seed, *stream):
    """Counter-based (Philox) generator; identical draws on every platform."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind == "f" or arr.dtype.kind == "b":
            arr = arr.astype(_mode.dtype, copy=False)
        elif arr.dtype.kind in "iu" and arr.dtype not in (np.int8, np.int32, np.int64):
            arr = arr.astype(np.int64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self):
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape")
        return self._tape.backward(self)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: object


class Tape:
    """Records operations for one forward pass; supports one backward."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.used = False

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def record(self, out, inputs, backward_fn):
        if self.used:
            raise ContractError("tape already consumed by backward; run a new forward")
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward_fn))

    def backward(self, loss):
        """Propagate d(loss) to every tensor with ``requires_grad``.

        Leaf gradients are accumulated into ``.grad`` and also returned as a
        ``{tensor: ndarray}`` map.
        """
        if self.used:
            raise ContractError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        self.used = True
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    prev = grads.get(id(t))
                    grads[id(t)] = gi if prev is None else prev + gi
                else:
                    prev = leaves.get(id(t))
                    leaves[id(t)] = (t, gi if prev is None else prev[1] + gi)
        out = {}
        for t, g in leaves.values():
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g if t.grad is None else t.grad + g
            out[t] = g
        self.nodes = []
        return out


def backward(tape, loss):
    return tape.backward(loss)


def _result(data, inputs, backward_fn):
    if _mode.checked and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced in checked mode")
    out = Tensor(data, dtype=data.dtype)
    if _tapes and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].record(out, inputs, backward_fn)
    return out


def _check_broadcast(a, b, opname):
    if a.shape == b.shape:
        return False
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _reduce_to(g, shape):
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    bc = _check_broadcast(a, b, "add")

    def bw(g):
        return g, (_reduce_to(g, b.shape) if bc else g)

    return _result(a.data + b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    bc = _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, (_reduce_to(gb, bd.shape) if bc else gb)

    return _result(ad * bd, (a, b), bw)


def scale(a, c):
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(a):
    pos = a.data > 0
    return _result(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _result(out.astype(x.dtype, copy=False), (a,), bw)


def _sigmoid_np(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)


def sigmoid(a):
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


_ELEMENTWISE = {"add": add, "mul": mul, "scale": scale, "relu": relu, "gelu": gelu, "sigmoid": sigmoid}


def elementwise(op, *args):
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def matmul(a, b):
    """2-D product, or batched product over identical leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, (a, b), bw)


def linear(x, w, b=None):
    """``x @ w.T + b`` for ``x[..., in]``, ``w[out, in]``."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise DimensionError(f"linear: bias {b.shape} for weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        gb = g2.sum(axis=0) if b is not None else None
        return g @ wd, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _result(out, inputs, bw)


def reshape(a, shape):
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take_first(a):
    """``a[:, 0, :]`` for a ``[B, L, d]`` tensor."""
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, 0, :] = g
        return (full,)

    return _result(a.data[:, 0, :].copy(), (a,), bw)


def softmax(a, axis=-1):
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (a,), bw)


def _log_softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax(a):
    ls = _log_softmax_np(a.data)
    s = np.exp(ls)
    return _result(ls, (a,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, gain, bias, eps=1e-5):
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out.astype(xd.dtype), (x, gain, bias), bw)


def embedding_lookup(table, ids):
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding ids must be integers")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding id out of range [0, {V})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[ids], (table,), bw)


def dropout(a, p, rng, training=True):
    if not training or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,))


def sum_all(a):
    shape = a.shape
    return _result(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean_all(a):
    n = a.data.size
    shape = a.shape
    return _result(np.asarray(a.data.mean(), dtype=a.dtype), (a,),
                   lambda g: (np.broadcast_to(g / n, shape).astype(g.dtype),))


def cross_entropy(logits, labels):
    """Batch-mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    B, C = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    ls = _log_softmax_np(logits.data)
    rows = np.arange(B)
    loss = -ls[rows, labels].mean()

    def bw(g):
        d = np.exp(ls)
        d[rows, labels] -= 1.0
        return (d * (g / B),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def kl_distill(student_logits, teacher_logits, temperature=2.0):
    """``T^2 * KL(p_teacher || p_student)`` at temperature ``T``, batch mean.

    The teacher side is treated as a constant.
    """
    T = float(temperature)
    if T <= 0:
        raise ContractError("temperature must be positive")
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if student_logits.shape != t_data.shape:
        raise DimensionError("kl_distill: student/teacher shapes differ")
    B = student_logits.shape[0]
    ls_s = _log_softmax_np(student_logits.data / T)
    ls_t = _log_softmax_np(t_data.astype(student_logits.dtype) / T)
    p_t = np.exp(ls_t)
    kl = (p_t * (ls_t - ls_s)).sum(axis=-1).mean()
    val = max(T * T * kl, 0.0)

    def bw(g):
        return ((np.exp(ls_s) - p_t) * (g * T / B),)

    return _result(np.asarray(val, dtype=student_logits.dtype), (student_logits,), bw)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param, grad, state, lr, beta1=0.9, beta2=0.98, eps=1e-8, weight_decay=0.0):
    """Bias-corrected Adam with decoupled weight decay, in place on ``param``."""
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise DimensionError("adam_step: parameter/gradient/state shapes differ")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grad
    state.v *= beta2
    state.v += (1 - beta2) * grad * grad
    m_hat = state.m / (1 - beta1**state.t)
    v_hat = state.v / (1 - beta2**state.t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    if weight_decay:
        update = update + lr * weight_decay * param.data
    param.data -= update.astype(param.data.dtype)
    return param, state


@dataclass
class ParamGroup:
    params: list
    lr: float
    weight_decay: float = 0.0


@dataclass
class Adam:
    groups: list
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    state: dict = field(default_factory=dict)

    def step(self, group_index=None):
        groups = self.groups if group_index is None else [self.groups[group_index]]
        for grp in groups:
            for p in grp.params:
                if p.grad is None:
                    continue
                st = self.state.get(id(p))
                if st is None:
                    st = self.state[id(p)] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
                adam_step(p, p.grad, st, grp.lr, self.beta1, self.beta2, self.eps, grp.weight_decay)

    def zero_grad(self):
        for grp in self.groups:
            for p in grp.params:
                p.grad = None

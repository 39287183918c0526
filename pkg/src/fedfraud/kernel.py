"""Minimal reverse-mode differentiation kernel.

Dense layers, activations, recurrent cells, losses and Adam, enough to
express every architecture used elsewhere in the package.  Values are
64-bit numpy arrays wrapped in a ``Tensor`` that records a tape for one
backward pass.  No general graph optimisation, no GPU, no mixed precision.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "KernelError",
    "ShapeError",
    "TapeError",
    "Tensor",
    "constant",
    "concat",
    "take_rows",
    "dense_affine",
    "activation",
    "dropout",
    "rnn_cell",
    "lstm_cell",
    "LstmParams",
    "mse_loss",
    "bce_loss",
    "softmax_ce_loss",
    "softmax_ce_batch",
    "loss_eval",
    "ParameterBundle",
    "AdamState",
    "adam_step",
    "sgd_step",
    "finite_difference_grad",
    "glorot",
]

BCE_FLOOR = 1e-12


class KernelError(Exception):
    """Base error for kernel misuse."""


class ShapeError(KernelError):
    """Operand shapes are incompatible."""


class TapeError(KernelError):
    """A tape was driven backward more than once."""


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise KernelError(f"non-finite values produced by {op}")


class Tensor:
    """A numpy array plus the tape needed to backpropagate through it."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, _parents=(), _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.grad = None
        self._parents = _parents
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    # -- graph construction helpers ------------------------------------

    @staticmethod
    def _lift(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    def _child(self, data, parents, backward, op):
        out = Tensor(data, _parents=parents, _op=op)
        out._backward = backward
        return out

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)

        def backward(g, a=self, b=other):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))

        return self._child(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        def backward(g, a=self):
            a._accumulate(-g)

        return self._child(-self.data, (self,), backward, "neg")

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __rsub__(self, other):
        return self._lift(other) + (-self)

    def __mul__(self, other):
        other = self._lift(other)

        def backward(g, a=self, b=other):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
            b._accumulate(_unbroadcast(g * a.data, b.shape))

        return self._child(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)

        def backward(g, a=self, b=other):
            a._accumulate(_unbroadcast(g / b.data, a.shape))
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        return self._child(self.data / other.data, (self, other), backward, "div")

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes incompatible: {a.shape} @ {b.shape}")

        def backward(g, ta=self, tb=other):
            if tb.data.ndim == 1:
                ta._accumulate(np.outer(g, tb.data))
                tb._accumulate(ta.data.T @ g)
            else:
                ta._accumulate(g @ tb.data.T)
                tb._accumulate(ta.data.T @ g)

        return self._child(a @ b, (self, other), backward, "matmul")

    # -- reductions and shaping ----------------------------------------

    def sum(self, axis=None, keepdims=False):
        def backward(g, a=self, ax=axis, kd=keepdims):
            if ax is not None and not kd:
                g = np.expand_dims(g, ax)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

        return self._child(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        def backward(g, a=self):
            a._accumulate(g.reshape(a.shape))

        return self._child(self.data.reshape(*shape), (self,), backward, "reshape")

    def transpose(self):
        def backward(g, a=self):
            a._accumulate(g.T)

        return self._child(self.data.T, (self,), backward, "transpose")

    # -- elementwise nonlinearities ------------------------------------

    def tanh(self):
        y = np.tanh(self.data)

        def backward(g, a=self, y=y):
            a._accumulate(g * (1.0 - y * y))

        return self._child(y, (self,), backward, "tanh")

    def sigmoid(self):
        y = _sigmoid(self.data)

        def backward(g, a=self, y=y):
            a._accumulate(g * y * (1.0 - y))

        return self._child(y, (self,), backward, "sigmoid")

    def relu(self):
        mask = self.data > 0

        def backward(g, a=self, mask=mask):
            a._accumulate(g * mask)

        return self._child(np.where(mask, self.data, 0.0), (self,), backward, "relu")

    def exp(self):
        y = np.exp(self.data)

        def backward(g, a=self, y=y):
            a._accumulate(g * y)

        return self._child(y, (self,), backward, "exp")

    def log(self):
        def backward(g, a=self):
            a._accumulate(g / a.data)

        return self._child(np.log(self.data), (self,), backward, "log")

    def abs(self):
        sign = np.sign(self.data)

        def backward(g, a=self, sign=sign):
            a._accumulate(g * sign)

        return self._child(np.abs(self.data), (self,), backward, "abs")

    def maximum(self, const):
        mask = self.data > const

        def backward(g, a=self, mask=mask):
            a._accumulate(g * mask)

        return self._child(np.maximum(self.data, const), (self,), backward, "maximum")

    def minimum(self, const):
        mask = self.data < const

        def backward(g, a=self, mask=mask):
            a._accumulate(g * mask)

        return self._child(np.minimum(self.data, const), (self,), backward, "minimum")

    # -- backward pass -------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, upstream=None):
        """Run the tape backward from this node.

        ``upstream`` defaults to ones (so a scalar loss just calls
        ``loss.backward()``).  Gradients accumulate into ``.grad`` of every
        reachable node, including parameter leaves, so several roots may be
        driven backward into the same parameters within one optimizer step.
        Driving the same root backward twice is an error.
        """
        if self._consumed:
            raise TapeError("backward already invoked on this tape")
        self._consumed = True
        if upstream is None:
            upstream = np.ones_like(self.data)
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != self.data.shape:
            raise ShapeError(
                f"upstream shape {upstream.shape} does not match output shape {self.data.shape}"
            )
        order = []
        seen = set()
        stack = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(upstream)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


def constant(x):
    """Leaf tensor for values we never differentiate (still gets a grad slot)."""
    return Tensor(x)


def take_rows(t, indices):
    """Row gather; gradients scatter-add back to the source rows."""
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g, a=t, idx=idx):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    out = Tensor(t.data[idx], _parents=(t,), _op="take_rows")
    out._backward = backward
    return out


def concat(tensors, axis=1):
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g, ts=tensors, offs=offsets, ax=axis):
        for t, lo, hi in zip(ts, offs[:-1], offs[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    out = Tensor(np.concatenate(datas, axis=axis), _parents=tuple(tensors), _op="concat")
    out._backward = backward
    return out


# ----------------------------------------------------------------------
# Layer-level operations
# ----------------------------------------------------------------------


def dense_affine(x, W, b):
    """W x + b for a single vector x, or x W^T + b for a batch.

    W has shape (out, in) and b shape (out,), matching the usual column
    convention for a single input vector.
    """
    x, W, b = Tensor._lift(x), Tensor._lift(W), Tensor._lift(b)
    if W.ndim != 2 or b.ndim != 1 or W.shape[0] != b.shape[0]:
        raise ShapeError(f"weight shape {W.shape} incompatible with bias shape {b.shape}")
    if x.ndim == 1:
        if W.shape[1] != x.shape[0]:
            raise ShapeError(f"weight shape {W.shape} incompatible with input shape {x.shape}")
        return W @ x + b
    if W.shape[1] != x.shape[1]:
        raise ShapeError(f"weight shape {W.shape} incompatible with input shape {x.shape}")
    return x @ W.transpose() + b


_ACTIVATIONS = {
    "relu": Tensor.relu,
    "tanh": Tensor.tanh,
    "sigmoid": Tensor.sigmoid,
    "identity": lambda t: t,
}


def activation(kind, x):
    x = Tensor._lift(x)
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise KernelError(f"unknown activation {kind!r}") from None
    return fn(x)


def dropout(x, rate, rng, active):
    """Inverted dropout; the identity when inactive or rate is zero."""
    if not active or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * constant(mask)


def rnn_cell(x, z_prev, W, U, b, act="tanh"):
    """One step of the simple recurrent cell: act(W x + U z_prev + b).

    ``z_prev`` may be None for the first event, in which case the recurrent
    term is omitted.
    """
    x, W, b = Tensor._lift(x), Tensor._lift(W), Tensor._lift(b)
    pre = dense_affine(x, W, b)
    if z_prev is not None:
        z_prev, U = Tensor._lift(z_prev), Tensor._lift(U)
        if x.ndim == 1:
            pre = pre + U @ z_prev
        else:
            pre = pre + z_prev @ U.transpose()
    return activation(act, pre)


@dataclass
class LstmParams:
    """Gate weights of a vanilla LSTM cell.

    Each W_* maps the input (shape (hidden, in)), each U_* the previous
    hidden state (shape (hidden, hidden)); biases have shape (hidden,).
    Gate order: input i, forget f, candidate g, output o.
    """

    W_i: Tensor
    U_i: Tensor
    b_i: Tensor
    W_f: Tensor
    U_f: Tensor
    b_f: Tensor
    W_g: Tensor
    U_g: Tensor
    b_g: Tensor
    W_o: Tensor
    U_o: Tensor
    b_o: Tensor


def lstm_cell(x, h_prev, c_prev, params):
    """One step of a vanilla LSTM; returns (h, c)."""
    p = params
    i = activation("sigmoid", rnn_cell(x, h_prev, p.W_i, p.U_i, p.b_i, act="identity"))
    f = activation("sigmoid", rnn_cell(x, h_prev, p.W_f, p.U_f, p.b_f, act="identity"))
    g = activation("tanh", rnn_cell(x, h_prev, p.W_g, p.U_g, p.b_g, act="identity"))
    o = activation("sigmoid", rnn_cell(x, h_prev, p.W_o, p.U_o, p.b_o, act="identity"))
    if c_prev is None:
        c = i * g
    else:
        c = f * Tensor._lift(c_prev) + i * g
    h = o * c.tanh()
    return h, c


# ----------------------------------------------------------------------
# Losses
# ----------------------------------------------------------------------


def mse_loss(pred, target):
    pred = Tensor._lift(pred)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - constant(target)
    return (diff * diff).mean()


def bce_loss(pred, target, floor=BCE_FLOOR, reduction="mean"):
    """Binary cross-entropy; predictions clamped away from {0, 1}."""
    pred = Tensor._lift(pred)
    target = np.asarray(target, dtype=np.float64)
    p = pred.maximum(floor).minimum(1.0 - floor)
    t = constant(target)
    per_entry = -(t * p.log() + (1.0 - t) * (1.0 - p).log())
    if reduction == "sum":
        return per_entry.sum()
    return per_entry.mean()


def softmax_ce_loss(logits, class_index):
    """Cross-entropy of a softmax over one logit vector against a class index."""
    logits = Tensor._lift(logits)
    n = logits.shape[0]
    if not 0 <= class_index < n:
        raise KernelError(f"class index {class_index} out of range for {n} logits")
    m = float(np.max(logits.data))
    z = logits - m
    lse = z.exp().sum().log()
    onehot = np.zeros(n)
    onehot[class_index] = 1.0
    picked = (z * constant(onehot)).sum()
    return lse - picked


def softmax_ce_batch(logits, class_indices):
    """Mean softmax cross-entropy over a batch of logit rows."""
    logits = Tensor._lift(logits)
    n, c = logits.shape
    idx = np.asarray(class_indices, dtype=np.int64)
    rowmax = logits.data.max(axis=1, keepdims=True)
    z = logits - constant(rowmax)
    lse = z.exp().sum(axis=1).log()
    onehot = np.zeros((n, c))
    onehot[np.arange(n), idx] = 1.0
    picked = (z * constant(onehot)).sum(axis=1)
    return (lse - picked).mean()


def loss_eval(kind, prediction, target):
    """Evaluate a loss and its gradient w.r.t. the prediction in one call."""
    pred = Tensor(prediction)
    if kind == "mse":
        loss = mse_loss(pred, target)
    elif kind == "binary_cross_entropy":
        loss = bce_loss(pred, target)
    elif kind == "softmax_cross_entropy":
        loss = softmax_ce_loss(pred, int(target))
    else:
        raise KernelError(f"unknown loss kind {kind!r}")
    loss.backward()
    grad = pred.grad if pred.grad is not None else np.zeros_like(pred.data)
    return float(loss.data), grad


# ----------------------------------------------------------------------
# Parameters, optimizer, oracle
# ----------------------------------------------------------------------

_BUNDLE_FORMAT = "fedfraud-params/1"


class ParameterBundle:
    """Named, ordered collection of parameter tensors.

    The name set is frozen once a model finishes construction; a flat
    float64 view supports the optimizer, the finite-difference oracle and
    on-disk serialization.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen = False

    def add(self, name, array):
        if self._frozen:
            raise KernelError("parameter bundle is frozen; cannot add new names")
        if name in self._params:
            raise KernelError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(array, dtype=np.float64))
        self._params[name] = t
        return t

    def freeze(self):
        self._frozen = True
        return self

    def names(self):
        return list(self._params)

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self):
        """Gradient per parameter after one or more backward passes."""
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self._params.items()
        }

    def flatten(self):
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def load_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        offset = 0
        for t in self._params.values():
            n = t.data.size
            t.data = vec[offset : offset + n].reshape(t.data.shape).copy()
            offset += n
        if offset != vec.size:
            raise ShapeError(f"flat vector of size {vec.size} does not match bundle size {offset}")

    def copy_values(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def set_values(self, values):
        for name, arr in values.items():
            self._params[name].data = np.array(arr, dtype=np.float64)

    # -- serialization: JSON header line + little-endian float64 payload --

    def to_bytes(self):
        header = {
            "format": _BUNDLE_FORMAT,
            "entries": [[name, list(t.data.shape)] for name, t in self._params.items()],
        }
        payload = b"".join(t.data.astype("<f8").tobytes() for t in self._params.values())
        return json.dumps(header).encode() + b"\n" + payload

    def load_bytes(self, blob):
        nl = blob.index(b"\n")
        header = json.loads(blob[:nl].decode())
        if header.get("format") != _BUNDLE_FORMAT:
            raise KernelError(f"unsupported parameter format {header.get('format')!r}")
        entries = header["entries"]
        names = [e[0] for e in entries]
        if names != self.names():
            raise KernelError("parameter names in file do not match this bundle")
        payload = blob[nl + 1 :]
        offset = 0
        for name, shape in entries:
            n = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset * 8)
            self._params[name].data = arr.astype(np.float64).reshape(shape).copy()
            offset += n

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def load(self, path):
        with open(path, "rb") as fh:
            self.load_bytes(fh.read())


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators, one pair per parameter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(bundle, grads, state, lr):
    """One Adam update in place; increments the step counter by one."""
    if lr <= 0:
        raise KernelError("learning rate must be positive")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, tensor in bundle:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1 ** state.t)
        vhat = state.v[name] / (1 - b2 ** state.t)
        tensor.data = tensor.data - lr * mhat / (np.sqrt(vhat) + state.eps)


def sgd_step(bundle, grads, lr):
    for name, tensor in bundle:
        tensor.data = tensor.data - lr * grads[name]


def finite_difference_grad(f, bundle, h=1e-5):
    """Central-difference gradient of a scalar function of a bundle.

    Independent oracle for the tape: perturbs each flat coordinate by +-h
    and never touches the backward machinery.
    """
    if h <= 0:
        raise KernelError("finite difference step must be positive")
    base = bundle.flatten()
    grad = np.zeros_like(base)
    for i in range(base.size):
        up = base.copy()
        up[i] += h
        bundle.load_flat(up)
        fu = f(bundle)
        down = base.copy()
        down[i] -= h
        bundle.load_flat(down)
        fd = f(bundle)
        grad[i] = (fu - fd) / (2 * h)
    bundle.load_flat(base)
    return grad


def glorot(rng, shape):
    """Glorot-uniform initial weights."""
    if len(shape) == 1:
        return np.zeros(shape)
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)

"""
Minimal reverse-mode differentiation
====================================

A tape records every primitive operation applied to :class:`Var` objects.
:func:`backward` replays the tape in reverse and returns the gradient of a
scalar with respect to every *named* leaf (parameter blocks and any inputs
registered with a name). Values are float64 numpy arrays; every operation
works on batched arrays so the same code serves single vectors and
mini-batches.

Only the operations the forecasting pipeline needs are provided.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, SequenceTooShortError, WindEnsembleError

__all__ = [
    "Var", "Tape", "ParamSet", "OptimConfig", "OptimState", "Optimizer",
    "backward", "optimizer_step",
    "add", "sub", "mul", "neg", "square", "absolute", "tanh", "sigmoid",
    "sum", "mean", "linear", "conv1d_dilated", "receptive_field", "softmax",
    "log_softmax", "cross_entropy", "concat", "reshape", "aggregate",
    "init_linear", "init_conv", "init_mlp", "mlp", "save_params", "load_params",
    "numeric_gradient", "relative_error",
]


class Var:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index", "name")
    __array_priority__ = 100.0

    def __init__(self, value, tape, index, name=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)


@dataclass
class _Node:
    value: np.ndarray
    parents: tuple
    name: str | None = None


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, so the list index is already a
    topological order. The tape is never modified by :func:`backward` and
    can be differentiated repeatedly.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name=None):
        """Register an input. Named leaves receive gradients from :func:`backward`."""
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise WindEnsembleError(f"non-finite value entered the tape (leaf {name!r})")
        self.nodes.append(_Node(arr, (), name))
        return Var(arr, self, len(self.nodes) - 1, name)

    def constant(self, value):
        return self.leaf(value, None)

    def params(self, params: "ParamSet", prefix=""):
        """Register every block of ``params`` as a named leaf; returns name -> Var."""
        return {k: self.leaf(v, prefix + k) for k, v in params.items()}

    def record(self, value, parents):
        """Append an operation result. ``parents`` is a sequence of (Var, vjp)."""
        if not np.all(np.isfinite(value)):
            raise WindEnsembleError("non-finite value produced during forward pass")
        links = tuple((p.index, fn) for p, fn in parents)
        self.nodes.append(_Node(value, links))
        return Var(value, self, len(self.nodes) - 1)


def _lift(x, tape):
    if isinstance(x, Var):
        if x.tape is not tape:
            raise WindEnsembleError("operands belong to different tapes")
        return x
    return tape.constant(x)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise WindEnsembleError("at least one operand must be a Var")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(tape: Tape, loss: Var):
    """Gradients of scalar ``loss`` with respect to every named leaf of ``tape``.

    Returns a dict keyed by leaf name. Leaves the loss does not depend on get
    zero arrays, so the result is always keyed like the registered params.
    """
    if loss.tape is not tape:
        raise WindEnsembleError("loss was not recorded on this tape")
    if loss.value.size != 1:
        raise WindEnsembleError(f"loss must be scalar, got shape {loss.value.shape}")
    nodes = tape.nodes
    grads: list = [None] * len(nodes)
    grads[loss.index] = np.ones_like(nodes[loss.index].value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        for parent, vjp in nodes[i].parents:
            contrib = vjp(g)
            if grads[parent] is None:
                grads[parent] = contrib
            else:
                grads[parent] = grads[parent] + contrib
    out = {}
    for i, node in enumerate(nodes):
        if node.name is not None:
            g = grads[i] if grads[i] is not None else np.zeros_like(node.value)
            out[node.name] = np.asarray(g, dtype=np.float64).reshape(node.value.shape)
    return out


# ---------------------------------------------------------------- elementwise

def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value + b.value,
                       [(a, lambda g: _unbroadcast(g, sa)),
                        (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value - b.value,
                       [(a, lambda g: _unbroadcast(g, sa)),
                        (b, lambda g: -_unbroadcast(g, sb))])


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    av, bv = a.value, b.value
    return tape.record(av * bv,
                       [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                        (b, lambda g: _unbroadcast(g * av, bv.shape))])


def neg(a):
    return a.tape.record(-a.value, [(a, lambda g: -g)])


def square(a):
    v = a.value
    return a.tape.record(v * v, [(a, lambda g: 2.0 * v * g)])


def absolute(a):
    v = a.value
    return a.tape.record(np.abs(v), [(a, lambda g: np.sign(v) * g)])


def tanh(a):
    y = np.tanh(a.value)
    return a.tape.record(y, [(a, lambda g: g * (1.0 - y * y))])


def sigmoid(a):
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return a.tape.record(y, [(a, lambda g: g * y * (1.0 - y))])


# ---------------------------------------------------------------- reductions

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    shape = a.value.shape
    y = np.sum(a.value, axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), shape).copy()

    return a.tape.record(np.asarray(y, dtype=np.float64), [(a, vjp)])


def mean(a, axis=None):
    shape = a.value.shape
    n = a.value.size if axis is None else shape[axis]
    y = np.mean(a.value, axis=axis)

    def vjp(g):
        if axis is None:
            return np.full(shape, float(g) / n)
        return np.broadcast_to(np.expand_dims(g, axis) / n, shape).copy()

    return a.tape.record(np.asarray(y, dtype=np.float64), [(a, vjp)])


# ---------------------------------------------------------------- structure

def concat(xs: Sequence, axis=-1):
    """Concatenate Vars (or constants) along ``axis``."""
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    y = np.concatenate([x.value for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.value.shape[axis] for x in xs])
    parents = []
    for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
        parents.append((x, lambda g, lo=lo, hi=hi: np.take(g, np.arange(lo, hi), axis=axis)))
    return tape.record(y, parents)


def reshape(a, shape):
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def aggregate(x, weights):
    """Mix the leading (node) axis: ``y[u] = sum_v weights[u, v] * x[v]``.

    ``weights`` is a constant matrix; with row-normalized neighbor weights
    this is mean aggregation over each node's neighborhood.
    """
    A = np.asarray(weights, dtype=np.float64)
    if A.shape[1] != x.value.shape[0]:
        raise DimensionError("aggregate node axis", A.shape[1], x.value.shape[0])
    y = np.tensordot(A, x.value, axes=(1, 0))
    return x.tape.record(y, [(x, lambda g: np.tensordot(A.T, g, axes=(1, 0)))])


# ---------------------------------------------------------------- layers

def linear(x, W, b=None):
    """Affine map ``W @ x + b`` applied along the last axis of ``x``.

    ``W`` has shape (out, in). ``x`` may carry any number of leading batch axes.
    """
    tape = _tape_of(x, W)
    x, W = _lift(x, tape), _lift(W, tape)
    xv, Wv = x.value, W.value
    if Wv.ndim != 2:
        raise DimensionError("linear weight rank", 2, Wv.ndim)
    if xv.shape[-1] != Wv.shape[1]:
        raise DimensionError("linear input", Wv.shape[1], xv.shape[-1])
    y = xv @ Wv.T
    parents = [
        (x, lambda g: g @ Wv),
        (W, lambda g: g.reshape(-1, Wv.shape[0]).T @ xv.reshape(-1, Wv.shape[1])),
    ]
    if b is not None:
        b = _lift(b, tape)
        if b.value.shape != (Wv.shape[0],):
            raise DimensionError("linear bias", Wv.shape[0], b.value.shape[0] if b.value.ndim else 0)
        y = y + b.value
        parents.append((b, lambda g: g.reshape(-1, Wv.shape[0]).sum(axis=0)))
    return tape.record(y, parents)


def receptive_field(kernel_sizes: Iterable[int], dilations: Iterable[int]) -> int:
    """Input span seen by one output of stacked valid dilated convolutions."""
    return 1 + int(np.sum([(k - 1) * d for k, d in zip(kernel_sizes, dilations)]))


def conv1d_dilated(x, kernel, dilation=1, bias=None):
    """Valid (unpadded) dilated convolution.

    Shapes: either ``x`` (L,) with ``kernel`` (K,), or ``x`` (..., C_in, L) with
    ``kernel`` (C_out, C_in, K) and optional ``bias`` (C_out,). The kernel is
    flipped as in the mathematical definition, so ``dilation=1`` with a 1-D
    kernel equals ``numpy.convolve(x, kernel, "valid")``. Output length is
    ``L - (K - 1) * dilation``.
    """
    if int(dilation) != dilation or dilation < 1:
        raise WindEnsembleError(f"dilation must be a positive integer, got {dilation}")
    dilation = int(dilation)
    tape = _tape_of(x, kernel)
    x, kernel = _lift(x, tape), _lift(kernel, tape)
    xv, kv = x.value, kernel.value
    vector_mode = kv.ndim == 1
    if vector_mode:
        if xv.ndim != 1:
            raise DimensionError("conv1d signal rank", 1, xv.ndim)
        xv3, kv3 = xv[None, :], kv[None, None, :]
    else:
        if kv.ndim != 3:
            raise DimensionError("conv1d kernel rank", 3, kv.ndim)
        if xv.ndim < 2 or xv.shape[-2] != kv.shape[1]:
            raise DimensionError("conv1d input channels", kv.shape[1],
                                 xv.shape[-2] if xv.ndim >= 2 else 0)
        xv3, kv3 = xv, kv
    K = kv3.shape[-1]
    L = xv3.shape[-1]
    need = (K - 1) * dilation + 1
    if L < need:
        raise SequenceTooShortError("conv1d signal", need, L)
    L_out = L - (K - 1) * dilation
    offsets = [(K - 1 - j) * dilation for j in range(K)]
    y = 0.0
    for j, off in enumerate(offsets):
        y = y + np.einsum("oc,...ct->...ot", kv3[:, :, j], xv3[..., :, off:off + L_out])
    if bias is not None:
        bias = _lift(bias, tape)
        y = y + bias.value[:, None]

    def vjp_x(g):
        g3 = g[None, :] if vector_mode else g
        gx = np.zeros_like(xv3)
        for j, off in enumerate(offsets):
            gx[..., :, off:off + L_out] += np.einsum("oc,...ot->...ct", kv3[:, :, j], g3)
        return gx[0] if vector_mode else gx

    def vjp_k(g):
        g3 = g[None, :] if vector_mode else g
        gk = np.empty_like(kv3)
        for j, off in enumerate(offsets):
            xs = xv3[..., :, off:off + L_out].reshape(-1, kv3.shape[1], L_out)
            gk[:, :, j] = np.einsum("not,nct->oc", g3.reshape(-1, kv3.shape[0], L_out), xs)
        return gk[0, 0] if vector_mode else gk

    y = y[0] if vector_mode else y
    parents = [(x, vjp_x), (kernel, vjp_k)]
    if bias is not None:
        parents.append((bias, lambda g: g.reshape(-1, g.shape[-2], g.shape[-1]).sum(axis=(0, 2))))
    return tape.record(np.asarray(y, dtype=np.float64), parents)


def softmax(z, axis=-1):
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    zv = z.value
    if zv.size == 0 or zv.shape[axis] == 0:
        raise WindEnsembleError("softmax of an empty vector")
    e = np.exp(zv - np.max(zv, axis=axis, keepdims=True))
    s = e / np.sum(e, axis=axis, keepdims=True)
    return z.tape.record(s, [(z, lambda g: s * (g - np.sum(g * s, axis=axis, keepdims=True)))])


def log_softmax(z, axis=-1):
    zv = z.value
    if zv.size == 0 or zv.shape[axis] == 0:
        raise WindEnsembleError("log_softmax of an empty vector")
    shifted = zv - np.max(zv, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)
    return z.tape.record(y, [(z, lambda g: g - s * np.sum(g, axis=axis, keepdims=True))])


def cross_entropy(logits, target):
    """Mean over the batch of ``-sum(target * log_softmax(logits))``."""
    t = np.asarray(target, dtype=np.float64)
    lp = log_softmax(logits)
    per = neg(sum(mul(lp, t), axis=-1))
    return mean(per)


# ---------------------------------------------------------------- parameters

class ParamSet(Mapping):
    """Named float64 parameter blocks with fixed shapes.

    Blocks are stored read-only; updates produce a new ParamSet through
    :meth:`replace`, which refuses any change of shape.
    """

    def __init__(self, blocks: Mapping[str, np.ndarray]):
        self._blocks = {}
        for k in sorted(blocks):
            arr = np.array(blocks[k], dtype=np.float64)
            arr.setflags(write=False)
            self._blocks[k] = arr

    def __getitem__(self, key):
        return self._blocks[key]

    def __iter__(self):
        return iter(self._blocks)

    def __len__(self):
        return len(self._blocks)

    def __repr__(self):
        inner = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._blocks.items())
        return f"ParamSet({inner})"

    @property
    def shapes(self):
        return {k: v.shape for k, v in self._blocks.items()}

    @property
    def size(self):
        return int(np.sum([v.size for v in self._blocks.values()]))

    def replace(self, updates: Mapping[str, np.ndarray]):
        new = dict(self._blocks)
        for k, v in updates.items():
            if k not in new:
                raise KeyError(f"unknown parameter block {k!r}")
            v = np.asarray(v, dtype=np.float64)
            if v.shape != new[k].shape:
                raise DimensionError(f"block {k!r} shape", new[k].shape, v.shape)
            new[k] = v
        return ParamSet(new)

    def merged(self, other: "ParamSet", prefix=""):
        out = dict(self._blocks)
        for k, v in other.items():
            out[prefix + k] = v
        return ParamSet(out)

    def subset(self, prefix, strip=True):
        return ParamSet({(k[len(prefix):] if strip else k): v
                         for k, v in self._blocks.items() if k.startswith(prefix)})

    def zeros_like(self):
        return ParamSet({k: np.zeros_like(v) for k, v in self._blocks.items()})

    def equals(self, other: "ParamSet") -> bool:
        """Bit-exact equality of names, shapes and values."""
        if list(self) != list(other):
            return False
        return all(self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
                   for k in self)


def init_linear(rng: np.random.Generator, in_dim, out_dim, prefix):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and bias."""
    bound = 1.0 / math.sqrt(in_dim)
    return {
        prefix + "W": rng.uniform(-bound, bound, size=(out_dim, in_dim)),
        prefix + "b": rng.uniform(-bound, bound, size=(out_dim,)),
    }


def init_conv(rng: np.random.Generator, in_ch, out_ch, kernel_size, prefix):
    bound = 1.0 / math.sqrt(in_ch * kernel_size)
    return {
        prefix + "K": rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel_size)),
        prefix + "b": rng.uniform(-bound, bound, size=(out_ch,)),
    }


def init_mlp(rng: np.random.Generator, sizes: Sequence[int], prefix=""):
    """Blocks ``{prefix}{i}.W`` / ``{prefix}{i}.b`` for consecutive layer sizes."""
    blocks = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        blocks.update(init_linear(rng, n_in, n_out, f"{prefix}{i}."))
    return blocks


def mlp(p: Mapping[str, Var], x, n_layers, prefix="", out_activation=None):
    """Stack of linear layers with tanh between them.

    ``p`` maps block names (as produced by :func:`init_mlp`) to tape Vars.
    """
    h = x
    for i in range(n_layers):
        h = linear(h, p[f"{prefix}{i}.W"], p[f"{prefix}{i}.b"])
        if i < n_layers - 1:
            h = tanh(h)
    if out_activation is not None:
        h = out_activation(h)
    return h


# ---------------------------------------------------------------- optimizers

@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    kind: str = "adam"  # "adam" or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise WindEnsembleError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.kind not in ("adam", "sgd"):
            raise WindEnsembleError(f"unknown optimizer kind {self.kind!r}")


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: ParamSet, grads: Mapping[str, np.ndarray], cfg: OptimConfig,
                   state: OptimState | None = None, maximize=False) -> ParamSet:
    """One gradient step; descent by default, ascent with ``maximize=True``.

    For ``kind="adam"`` the moment estimates live in ``state`` and are advanced
    in place. Every parameter block must have a gradient.
    """
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"missing gradient for parameter blocks {missing}")
    sign = 1.0 if maximize else -1.0
    lr = cfg.learning_rate
    updates = {}
    if cfg.kind == "sgd":
        for k, p in params.items():
            updates[k] = p + sign * lr * np.asarray(grads[k])
        return params.replace(updates)
    if state is None:
        state = OptimState()
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for k, p in params.items():
        g = np.asarray(grads[k])
        m = state.m.get(k)
        v = state.v.get(k)
        m = g * (1 - cfg.beta1) if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = g * g * (1 - cfg.beta2) if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        state.m[k], state.v[k] = m, v
        updates[k] = p + sign * lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params.replace(updates)


class Optimizer:
    """Holds an :class:`OptimConfig` together with its running state."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.state = OptimState()

    def step(self, params, grads, maximize=False):
        return optimizer_step(params, grads, self.cfg, self.state, maximize=maximize)


# ---------------------------------------------------------------- serialization

_MAGIC = b"WEPS"
_VERSION = 1


def save_params(path, params: ParamSet, meta: dict | None = None):
    """Write ``params`` to ``path`` in a versioned binary key->array format.

    Layout: magic, uint32 version, uint32 header length, UTF-8 JSON header
    (block names, shapes, optional metadata), then each block's little-endian
    float64 bytes in header order. Round trips are bit-exact and the output
    is a pure function of the inputs.
    """
    names = list(params)
    header = {
        "blocks": [{"name": k, "shape": list(params[k].shape)} for k in names],
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(hbytes)))
        fh.write(hbytes)
        for k in names:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(ParamSet, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise WindEnsembleError(f"{path}: not a parameter file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise WindEnsembleError(f"{path}: unsupported format version {version}")
    header = json.loads(data[12:12 + hlen].decode())
    pos = 12 + hlen
    blocks = {}
    for entry in header["blocks"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        blocks[entry["name"]] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
    if pos != len(data):
        raise WindEnsembleError(f"{path}: trailing bytes after parameter blocks")
    return ParamSet(blocks), header["meta"]


# ---------------------------------------------------------------- checking

def numeric_gradient(f: Callable[[dict], float], inputs: Mapping[str, np.ndarray], eps=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``inputs``."""
    base = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    out = {}
    for k, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(base)
            flat[i] = orig - eps
            fm = f(base)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * eps)
        out[k] = g
    return out


def relative_error(a, b, floor=1e-10):
    """``||a - b|| / max(||a||, ||b||, floor)`` over flattened arrays."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)

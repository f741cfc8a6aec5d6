"""Minimal reverse-mode autodiff on numpy arrays.

Exactly the primitives the keyword model and its losses need: dense /
conv2d / relu / pooling, row normalization, the two classification
losses, stop_gradient, and a finite-difference harness to check every
gradient rule. Recording is explicit: ops are taped only while a
``Tape`` context is active, so plain calls double as inference mode.
"""
from __future__ import annotations

import os
import threading
import warnings

import numpy as np

from .errors import ContractError, NumericError, ShapeError

# Mutation-testing hook: name an op here (e.g. "conv2d") and its weight
# gradient is scaled by 1.01, which the verification suite must detect.
SABOTAGE_ENV = "COSMIX_SABOTAGE_GRAD"


def _sabotage(op, g):
    if os.environ.get(SABOTAGE_ENV, "") == op:
        return g * 1.05
    return g


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse mode.

    Leaves are created directly (``requires_grad=True`` for trainables);
    interior nodes are created by ops and carry a vjp closure. A tensor
    that never landed on a tape (``tape_id is None``) never receives a
    gradient.
    """

    __slots__ = ("values", "requires_grad", "grad", "tape", "tape_id",
                 "op", "_parents", "_vjp")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite values in tensor literal")
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.tape = None
        self.tape_id = None
        self.op = "leaf"
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.values.shape}, grad={self.grad is not None})"


class Tape:
    """Append-only op recording; node inputs always precede the node."""

    _local = threading.local()

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._local.stack.pop()
        return False

    @staticmethod
    def current():
        stack = getattr(Tape._local, "stack", None)
        return stack[-1] if stack else None

    def _append(self, t):
        t.tape = self
        t.tape_id = len(self.nodes)
        self.nodes.append(t)

    def dump(self):
        """Text DAG of the recorded graph, one node per line."""
        lines = []
        for n in self.nodes:
            ps = ",".join(str(p.tape_id) for p in n._parents)
            lines.append(f"{n.tape_id}: {n.op} shape={n.values.shape} <- [{ps}]")
        return "\n".join(lines)


class _PauseRecording:
    def __enter__(self):
        stack = getattr(Tape._local, "stack", None)
        if stack is None:
            stack = Tape._local.stack = []
        stack.append(None)
        return self

    def __exit__(self, *exc):
        Tape._local.stack.pop()
        return False


def pause_recording():
    """Context manager: ops inside run as plain forwards, nothing is taped."""
    return _PauseRecording()


def _tracked_on(t, tape):
    return t.tape is tape and t.tape_id is not None


def _record(op, values, parents, vjp):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite forward values in op '{op}'")
    out = Tensor(values)
    out.op = op
    tape = Tape.current()
    if tape is None:
        return out
    live = False
    for p in parents:
        if _tracked_on(p, tape):
            live = True
        elif p.requires_grad and p._vjp is None:
            # leaf joining this tape (possibly left over from an older one)
            tape._append(p)
            live = True
    if live:
        out._parents = tuple(parents)
        out._vjp = vjp
        tape._append(out)
    return out


def _accum(t, g):
    if t.tape_id is None:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.values.dtype, copy=True)
    else:
        t.grad += g


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _want(t, shape, op, role):
    if t.values.shape != tuple(shape):
        raise ShapeError(f"{op}: {role} has shape {t.values.shape}, expected {tuple(shape)}")


def _want_rank(t, rank, op, role):
    if t.values.ndim != rank:
        raise ShapeError(f"{op}: {role} has shape {t.values.shape}, expected rank {rank}")


# ---------------------------------------------------------------------------
# elementwise and reduction primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"add: {a.values.shape} vs {b.values.shape}")

    def vjp(g):
        _accum(a, g)
        _accum(b, g)
    return _record("add", a.values + b.values, (a, b), vjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"sub: {a.values.shape} vs {b.values.shape}")

    def vjp(g):
        _accum(a, g)
        _accum(b, -g)
    return _record("sub", a.values - b.values, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"mul: {a.values.shape} vs {b.values.shape}")
    av, bv = a.values, b.values

    def vjp(g):
        _accum(a, g * bv)
        _accum(b, g * av)
    return _record("mul", av * bv, (a, b), vjp)


def scale(a, s):
    a = as_tensor(a)
    s = float(s)

    def vjp(g):
        _accum(a, g * s)
    return _record("scale", a.values * s, (a,), vjp)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.values.size:
        raise ShapeError(f"reshape: {a.values.shape} to {shape}")
    in_shape = a.values.shape

    def vjp(g):
        _accum(a, g.reshape(in_shape))
    return _record("reshape", a.values.reshape(shape), (a,), vjp)


def rowsum(a):
    """Sum over the last axis of a [B, D] tensor -> [B]."""
    a = as_tensor(a)
    _want_rank(a, 2, "rowsum", "input")
    d = a.values.shape[1]

    def vjp(g):
        _accum(a, np.repeat(g[:, None], d, axis=1))
    return _record("rowsum", a.values.sum(axis=1), (a,), vjp)


def sum_all(a):
    a = as_tensor(a)
    shape = a.values.shape

    def vjp(g):
        _accum(a, np.full(shape, g, dtype=a.values.dtype))
    return _record("sum_all", np.asarray(a.values.sum()), (a,), vjp)


def mean_all(a):
    a = as_tensor(a)
    shape = a.values.shape
    n = a.values.size

    def vjp(g):
        _accum(a, np.full(shape, g / n, dtype=a.values.dtype))
    return _record("mean_all", np.asarray(a.values.mean()), (a,), vjp)


def relu(a):
    a = as_tensor(a)
    mask = a.values > 0  # subgradient 0 at 0

    def vjp(g):
        _accum(a, g * mask)
    return _record("relu", np.maximum(a.values, 0), (a,), vjp)


def stop_gradient(a):
    """Identity forward; contributes nothing to any ancestor in backward.

    Recorded as a sink node so a graph downstream of it stays on the tape.
    """
    a = as_tensor(a)

    def vjp(g):
        pass
    return _record("stop_gradient", a.values, (a,), vjp)


# ---------------------------------------------------------------------------
# linear / convolutional primitives

def _wants_grad(t):
    return t.tape_id is not None


def dense(x, w, b):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _want_rank(x, 2, "dense", "x")
    _want_rank(w, 2, "dense", "w")
    if x.values.shape[1] != w.values.shape[0]:
        raise ShapeError(f"dense: x {x.values.shape} vs w {w.values.shape}")
    _want(b, (w.values.shape[1],), "dense", "b")
    xv, wv = x.values, w.values

    def vjp(g):
        g = _sabotage("dense", g)
        if _wants_grad(x):
            _accum(x, g @ wv.T)
        if _wants_grad(w):
            _accum(w, xv.T @ g)
        if _wants_grad(b):
            _accum(b, g.sum(axis=0))
    return _record("dense", xv @ wv + b.values, (x, w, b), vjp)


def conv2d(x, k, stride=1, padding=0):
    """Cross-correlation of [B, C, H, W] with [O, C, kh, kw] kernels."""
    x, k = as_tensor(x), as_tensor(k)
    _want_rank(x, 4, "conv2d", "x")
    _want_rank(k, 4, "conv2d", "k")
    if x.values.shape[1] != k.values.shape[1]:
        raise ShapeError(f"conv2d: x {x.values.shape} vs k {k.values.shape}")
    stride, padding = int(stride), int(padding)
    bsz, cin, h, w = x.values.shape
    cout, _, kh, kw = k.values.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {(hp, wp)} smaller than kernel {(kh, kw)}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if padding:
        xp = np.zeros((bsz, cin, hp, wp), dtype=x.values.dtype)
        xp[:, :, padding:padding + h, padding:padding + w] = x.values
    else:
        xp = x.values
    kv = k.values

    # accumulate one strided slice per kernel offset; avoids a full im2col
    out = np.zeros((cout, bsz, ho, wo), dtype=x.values.dtype)
    for i in range(kh):
        for j in range(kw):
            xv = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
            out += np.tensordot(kv[:, :, i, j], xv, axes=([1], [1]))
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def vjp(g):
        g = _sabotage("conv2d", g)
        if _wants_grad(k):
            dk = np.empty_like(kv)
            for i in range(kh):
                for j in range(kw):
                    xv = xp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
                    dk[:, :, i, j] = np.tensordot(g, xv, axes=([0, 2, 3], [0, 2, 3]))
            _accum(k, dk)
        if _wants_grad(x):
            # one GEMM for all kernel offsets, then scatter the slices
            dcols = np.tensordot(g, kv, axes=([1], [0]))  # [B, Ho, Wo, C, kh, kw]
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if padding:
                _accum(x, dxp[:, :, padding:padding + h, padding:padding + w])
            else:
                _accum(x, dxp)
    return _record("conv2d", out, (x, k), vjp)


def channel_bias_add(x, b):
    """Add a per-channel bias [C] to a [B, C, H, W] map."""
    x, b = as_tensor(x), as_tensor(b)
    _want_rank(x, 4, "channel_bias_add", "x")
    _want(b, (x.values.shape[1],), "channel_bias_add", "b")

    def vjp(g):
        _accum(x, g)
        _accum(b, g.sum(axis=(0, 2, 3)))
    return _record("channel_bias_add", x.values + b.values[None, :, None, None], (x, b), vjp)


def global_avg_pool(x):
    """Mean over the spatial axes of [B, C, H, W] -> [B, C]."""
    x = as_tensor(x)
    _want_rank(x, 4, "global_avg_pool", "x")
    _, _, h, w = x.values.shape

    def vjp(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.values.shape))
    return _record("global_avg_pool", x.values.mean(axis=(2, 3)), (x,), vjp)


# ---------------------------------------------------------------------------
# normalization and similarity

NORM_EPS = 1e-12


def l2_normalize(x, eps=NORM_EPS, debug=False):
    """Divide each row of [B, D] by its Euclidean norm (eps-floored)."""
    x = as_tensor(x)
    _want_rank(x, 2, "l2_normalize", "x")
    norms = np.linalg.norm(x.values, axis=1)
    floored = norms < eps
    if debug and floored.any():
        warnings.warn(f"l2_normalize: {int(floored.sum())} degenerate rows eps-floored")
    n = np.maximum(norms, eps)
    y = x.values / n[:, None]

    def vjp(g):
        # rows at the eps floor behave as plain division by eps
        dx = (g - y * (g * y).sum(axis=1, keepdims=True)) / n[:, None]
        if floored.any():
            dx[floored] = g[floored] / eps
        _accum(x, dx)
    return _record("l2_normalize", y, (x,), vjp)


def cosine_similarity(a, b):
    """Per-row cosine of two [B, D] tensors -> [B], each value in [-1, 1]."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.shape != b.values.shape:
        raise ShapeError(f"cosine_similarity: {a.values.shape} vs {b.values.shape}")
    return rowsum(mul(l2_normalize(a), l2_normalize(b)))


# ---------------------------------------------------------------------------
# classification losses

def _check_simplex(target, op):
    t = target.values
    if t.ndim != 2:
        raise ShapeError(f"{op}: target has shape {t.shape}, expected rank 2")
    if (t < -1e-9).any() or np.abs(t.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError(f"{op}: target rows must be probability vectors")


def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax_cross_entropy_rowwise(logits, target):
    """Per-row cross entropy of softmax(logits) against soft targets -> [B]."""
    logits, target = as_tensor(logits), as_tensor(target)
    if logits.values.shape != target.values.shape:
        raise ShapeError(f"softmax_cross_entropy: {logits.values.shape} vs {target.values.shape}")
    _check_simplex(target, "softmax_cross_entropy")
    logp = _log_softmax(logits.values)
    rows = -(target.values * logp).sum(axis=1)
    sm = np.exp(logp)
    tv = target.values

    def vjp(g):
        _accum(logits, g[:, None] * (sm - tv))
        _accum(target, g[:, None] * (-logp))
    return _record("softmax_cross_entropy_rowwise", rows, (logits, target), vjp)


def softmax_cross_entropy(logits, target):
    """Batch-mean softmax cross entropy against soft targets -> scalar."""
    return mean_all(softmax_cross_entropy_rowwise(logits, target))


def sigmoid_bce_rowwise(logits, target):
    """Per-row mean of elementwise binary cross entropy on logits -> [B]."""
    logits, target = as_tensor(logits), as_tensor(target)
    if logits.values.shape != target.values.shape:
        raise ShapeError(f"sigmoid_bce: {logits.values.shape} vs {target.values.shape}")
    t = target.values
    if (t < -1e-9).any() or (t > 1 + 1e-9).any():
        raise ValueError("sigmoid_bce: target entries must lie in [0, 1]")
    z = logits.values
    k = z.shape[1]
    elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    sig = 1.0 / (1.0 + np.exp(-z))

    def vjp(g):
        _accum(logits, g[:, None] * (sig - t) / k)
        _accum(target, g[:, None] * (-z) / k)
    return _record("sigmoid_bce_rowwise", elem.mean(axis=1), (logits, target), vjp)


def sigmoid_bce(logits, target):
    """Mean over all B*K elements of stable binary cross entropy -> scalar."""
    return mean_all(sigmoid_bce_rowwise(logits, target))


# ---------------------------------------------------------------------------
# backward sweep

def backward(loss):
    """Reverse sweep from a scalar tensor; grads land on tape-tracked leaves."""
    if not isinstance(loss, Tensor) or loss.values.shape != ():
        got = getattr(loss, "values", np.asarray(loss)).shape
        raise ContractError(f"backward: loss must be a scalar tensor, got shape {got}")
    if loss.tape is None:
        raise ContractError("backward: loss is not on a live tape")
    loss.grad = np.ones((), dtype=loss.values.dtype)
    for node in reversed(loss.tape.nodes[:loss.tape_id + 1]):
        if node.grad is None or node._vjp is None:
            continue
        if not np.all(np.isfinite(node.grad)):
            raise NumericError(f"non-finite gradient at op '{node.op}'")
        node._vjp(node.grad)


# ---------------------------------------------------------------------------
# trainable parameter collections

class ParameterSet:
    """Named trainable tensors with deterministic (insertion) order."""

    def __init__(self):
        self._params = {}

    def add(self, name, values, dtype=None):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def n_values(self):
        return sum(t.values.size for t in self._params.values())

    def astype(self, dtype):
        out = ParameterSet()
        for name, t in self._params.items():
            out.add(name, t.values.astype(dtype))
        return out

    def copy_values(self):
        return {name: t.values.copy() for name, t in self._params.items()}

    def load_values(self, values):
        for name, t in self._params.items():
            v = np.asarray(values[name], dtype=t.values.dtype)
            if v.shape != t.values.shape:
                raise ShapeError(f"parameter {name}: {v.shape} vs {t.values.shape}")
            t.values = v.copy()


# ---------------------------------------------------------------------------
# finite-difference harness

def finite_difference_check(f, params, h=1e-5, max_coords=200, seed=0):
    """Max relative error between backward() grads and central differences.

    ``f`` rebuilds the scalar loss from the current parameter values on
    every call; all coordinates are probed unless the model is large, in
    which case a seeded random subset of ``max_coords`` (>= 200) is used.
    """
    v1 = float(f().values)
    v2 = float(f().values)
    if v1 != v2:
        raise ContractError("finite_difference_check: f is not deterministic")

    params.zero_grad()
    with Tape():
        loss = f()
        backward(loss)
    analytic = {}
    for name, t in params.items():
        analytic[name] = np.zeros_like(t.values) if t.grad is None else t.grad.copy()

    coords = [(name, i) for name, t in params.items() for i in range(t.values.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=max(200, max_coords), replace=False)
        coords = [coords[i] for i in picks]

    max_rel = 0.0
    for name, i in coords:
        flat = params[name].values.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f().values)
        flat[i] = orig - h
        fm = float(f().values)
        flat[i] = orig
        numeric = (fp - fm) / (2 * h)
        ana = float(analytic[name].reshape(-1)[i])
        rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel

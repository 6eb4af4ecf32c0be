"""Dense float64 tensors with reverse-mode differentiation.

Everything downstream (embedders, transformer blocks, losses) is built from
the primitives in this module.  The design goals are verifiability and
determinism, not speed: all values are double precision, every op has a
hand-written backward that must survive :func:`grad_check` against central
finite differences, and a single-threaded forward+backward is bitwise
reproducible.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "concat",
    "gather",
    "select_positions",
    "relu",
    "sqrt",
    "transpose",
    "masked_softmax_attention",
    "layer_norm",
    "cross_entropy",
    "mae",
    "dropout",
    "Adam",
    "AdamState",
    "adam_update",
    "grad_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
]

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction; ops return plain constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 ndarray plus an optional gradient and backward closure.

    Gradient arrays are treated as immutable once stored: backward closures
    always allocate fresh arrays and accumulation rebinds ``grad`` instead of
    mutating it, so aliasing between a node's grad and a parent's is safe.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self):
        return float(self.data)

    # -- graph machinery ----------------------------------------------------

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode sweep from this node.

        Without an explicit seed the node must be a scalar.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.data.shape:
                raise ValueError("seed gradient shape mismatch")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar -----------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    """Wrap an op result, attaching the graph only when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise and structural primitives ----------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b):
    """Stacked matrix product with numpy broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul requires tensors with at least 2 dimensions")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(data, (a, b), backward)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(old))

    return _make(data, (x,), backward)


def transpose(x, axes):
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)

    def backward(g):
        x._accumulate(g.transpose(inv))

    return _make(data, (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)].copy())

    return _make(data, tuple(tensors), backward)


def _getitem(x, key):
    x = as_tensor(x)
    data = x.data[key]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, key, g)
        x._accumulate(dx)

    return _make(data, (x,), backward)


def gather(x, indices):
    """Select rows of ``x`` along axis 0; output shape = indices.shape + x.shape[1:]."""
    x = as_tensor(x)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather indices must be integers")
    data = x.data[idx]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        x._accumulate(dx)

    return _make(data, (x,), backward)


def select_positions(x, positions):
    """Pick one position per row: out[b] = x[b, positions[b]]."""
    x = as_tensor(x)
    pos = np.asarray(positions)
    if x.data.ndim < 2 or pos.shape != (x.data.shape[0],):
        raise ValueError("select_positions expects x of shape (B, L, ...) and positions of shape (B,)")
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, pos]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, pos), g)
        x._accumulate(dx)

    return _make(data, (x,), backward)


def tensor_sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _make(data, (x,), backward)


def tensor_mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(data.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.data.shape) / count)

    return _make(data, (x,), backward)


def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        x._accumulate(g * (x.data > 0.0))

    return _make(data, (x,), backward)


def sqrt(x):
    """Elementwise square root; the subgradient at 0 is taken as 0."""
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        with np.errstate(divide="ignore"):
            d = np.where(data > 0.0, 0.5 / np.where(data > 0.0, data, 1.0), 0.0)
        x._accumulate(g * d)

    return _make(data, (x,), backward)


def dropout(x, rate, rng):
    """Inverted dropout as a mask multiply; identity when rate == 0."""
    if rate <= 0.0:
        return x
    x = as_tensor(x)
    keep = (rng.random(x.data.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


# -- fused operations --------------------------------------------------------


def masked_softmax_attention(q, k, v, mask, empty_rows_ok=None):
    """Scaled dot-product attention with a boolean allow-mask.

    ``q``, ``k``, ``v`` share leading dims and have shapes (..., L, dk) /
    (..., L, dk) / (..., L, dv); ``mask`` broadcasts against (..., L, L) with
    True meaning "row may attend column".  Disallowed positions get weight
    exactly 0.0: logits are restricted to allowed entries before
    normalization rather than patched with large negative surrogates.  Rows
    with no allowed position produce a zero output vector; such rows raise
    unless flagged in ``empty_rows_ok`` (broadcastable to (..., L)).
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    mask = np.asarray(mask, dtype=bool)
    if q.data.shape[-1] != k.data.shape[-1] or q.data.shape[:-1] != k.data.shape[:-1]:
        raise ValueError("q/k shape mismatch")
    if k.data.shape[:-1] != v.data.shape[:-1]:
        raise ValueError("k/v shape mismatch")
    scale = 1.0 / math.sqrt(q.data.shape[-1])

    scores = q.data @ k.data.swapaxes(-1, -2)
    scores *= scale
    # exp(-inf) = 0 exactly, so restricting logits before the exp both keeps
    # disallowed weights at hard zero and avoids overflow from unshifted rows
    np.copyto(scores, -np.inf, where=np.broadcast_to(~mask, scores.shape))
    row_max = scores.max(axis=-1, keepdims=True)
    scores -= np.where(np.isfinite(row_max), row_max, 0.0)
    probs = np.exp(scores, out=scores)
    denom = probs.sum(axis=-1, keepdims=True)
    empty = denom[..., 0] == 0.0
    if empty.any():
        ok = np.zeros(empty.shape, dtype=bool) if empty_rows_ok is None else np.broadcast_to(
            np.asarray(empty_rows_ok, dtype=bool), empty.shape
        )
        if (empty & ~ok).any():
            raise ValueError("attention row with no allowed positions")
        probs /= np.where(denom == 0.0, 1.0, denom)
    else:
        probs /= denom
    data = probs @ v.data

    def backward(g):
        if v.requires_grad:
            v._accumulate(probs.swapaxes(-1, -2) @ g)
        if q.requires_grad or k.requires_grad:
            ds = g @ v.data.swapaxes(-1, -2)
            ds -= (ds * probs).sum(axis=-1, keepdims=True)
            ds *= probs
            if q.requires_grad:
                q._accumulate((ds @ k.data) * scale)
            if k.requires_grad:
                k._accumulate((ds.swapaxes(-1, -2) @ q.data) * scale)

    return _make(data, (q, k, v), backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last dimension to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = gain.data * xhat + bias.data

    def backward(g):
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((dxhat - m1 - xhat * m2) * inv)

    return _make(data, (x, gain, bias), backward)


def cross_entropy(logits, targets, valid_mask=None):
    """Mean negative log-likelihood over valid positions.

    ``logits`` has shape (..., C); ``targets`` and ``valid_mask`` have the
    leading shape.  Raises when no position is valid.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    lead = logits.data.shape[:-1]
    valid = np.ones(lead, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    if valid.shape != lead or targets.shape != lead:
        raise ValueError("targets / valid_mask must match the logits' leading shape")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("cross_entropy: no valid positions")
    tgt = np.where(valid, targets, 0)
    if (tgt < 0).any() or (tgt >= logits.data.shape[-1]).any():
        raise ValueError("cross_entropy: target class out of range")

    m = logits.data.max(axis=-1, keepdims=True)
    stable = logits.data - m
    lse = np.log(np.exp(stable).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(logits.data, tgt[..., None], axis=-1)[..., 0]
    data = np.array(((lse - picked) * valid).sum() / n_valid)

    def backward(g):
        if logits.requires_grad:
            soft = np.exp(stable)
            soft /= soft.sum(axis=-1, keepdims=True)
            np.subtract.at(soft, (*np.nonzero(valid), tgt[valid]), 1.0)
            logits._accumulate(soft * (valid[..., None] * (float(g) / n_valid)))

    return _make(data, (logits,), backward)


def mae(pred, target, valid_mask=None):
    """Mean absolute error over valid positions; subgradient 0 at exact ties."""
    pred = as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.data.shape:
        raise ValueError("mae: shape mismatch")
    valid = np.ones(pred.data.shape, dtype=bool) if valid_mask is None else np.asarray(valid_mask, dtype=bool)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("mae: no valid positions")
    diff = pred.data - target
    data = np.array((np.abs(diff) * valid).sum() / n_valid)

    def backward(g):
        if pred.requires_grad:
            pred._accumulate(np.sign(diff) * valid * (float(g) / n_valid))

    return _make(data, (pred,), backward)


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(value, grad, m, v, step, lr, beta1, beta2, eps):
    """One bias-corrected Adam update; returns (new_value, new_m, new_v)."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    return value - lr * mhat / (np.sqrt(vhat) + eps), m, v


class Adam:
    """Adam over a name -> Tensor parameter mapping.

    Parameters without a gradient are left untouched.  A non-finite gradient
    aborts with the offending parameter's name.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self):
        s = self.state
        s.step += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            p.data, s.m[name], s.v[name] = adam_update(
                p.data, p.grad, s.m[name], s.v[name], s.step, s.lr, s.beta1, s.beta2, s.eps
            )

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- gradient checking --------------------------------------------------------


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    failures: list

    def __bool__(self):
        return self.passed


def grad_check(op, inputs, tol=1e-4, step=1e-4, rng=None):
    """Compare reverse-mode gradients of ``op`` against central differences.

    ``op`` maps the input tensors to one output tensor; the output is reduced
    to a scalar with a fixed random projection so non-scalar ops are covered.
    Failures are collected in the report, never raised.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    inputs = [as_tensor(x) for x in inputs]
    out = op(*inputs)
    proj = rng.standard_normal(out.data.shape)

    for x in inputs:
        x.zero_grad()
    loss = tensor_sum(mul(out, Tensor(proj)))
    loss.backward()

    max_rel = 0.0
    failures = []
    for pos, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        flat = x.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = float((op(*inputs).data * proj).sum())
            flat[i] = orig - step
            with no_grad():
                lo = float((op(*inputs).data * proj).sum())
            flat[i] = orig
            fd = (hi - lo) / (2.0 * step)
            an = analytic.reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-3)
            max_rel = max(max_rel, rel)
            if rel >= tol:
                failures.append((pos, i, an, fd, rel))
    return GradCheckReport(passed=not failures, max_rel_err=max_rel, failures=failures)


# -- checkpoints ---------------------------------------------------------------
#
# Format: one JSON header line {"format": "htckpt", "version": 1,
# "tensors": [{"name", "shape"}, ...], "meta": {...}} followed by the raw
# values of each tensor in header order, C-contiguous little-endian float64.


def save_checkpoint(path, tensors, meta=None):
    """Write named float64 arrays (Tensor or ndarray values) to ``path``."""
    items = sorted(tensors.items())
    header = {
        "format": "htckpt",
        "version": 1,
        "tensors": [
            {"name": name, "shape": list(np.shape(t.data if isinstance(t, Tensor) else t))}
            for name, t in items
        ],
    }
    if meta is not None:
        header["meta"] = meta
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for _, t in items:
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (dict name -> ndarray, meta dict or None)."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format") != "htckpt":
            raise ValueError(f"{path}: not a checkpoint file")
        out = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint")
            out[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return out, header.get("meta")

"""Dense float tensors with a taped reverse-mode gradient engine.

Ops run eagerly on numpy arrays. While a Tape is active (see `recording`),
each op appends one entry holding its inputs and a closure that maps the
output gradient to input gradients; `backward` replays the tape once in
reverse order. With no active tape, ops are plain numpy with no overhead
beyond the Tensor wrapper, which is how evaluation rollouts run.

Default precision is float32; building the same graph from float64 tensors
runs everything in float64, which is what the finite-difference checks use.
"""

from __future__ import annotations

import itertools
import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy import special

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

LOG_2PI = math.log(2.0 * math.pi)


class ContractViolation(ValueError):
    """An operation was called outside its declared contract."""


_node_ids = itertools.count()


class Tensor:
    """A dense real-valued array plus gradient-tracking metadata."""

    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def param(data, name=None, dtype=np.float32):
    """A trainable tensor."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


class Tape:
    """Ordered record of one forward pass.

    Entries are (output node id, input tensors, backward closure) in the
    order the ops ran, so a single reverse scan visits every node exactly
    once and respects data dependencies.
    """

    __slots__ = ("entries",)

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)


_ACTIVE = threading.local()


def active_tape():
    return getattr(_ACTIVE, "tape", None)


@contextmanager
def recording(tape=None):
    """Activate a tape on this thread for the duration of the block."""
    tape = Tape() if tape is None else tape
    prev = active_tape()
    _ACTIVE.tape = tape
    try:
        yield tape
    finally:
        _ACTIVE.tape = prev


@contextmanager
def paused():
    """Suspend any active tape (for forward passes that must not be recorded)."""
    prev = active_tape()
    _ACTIVE.tape = None
    try:
        yield
    finally:
        _ACTIVE.tape = prev


def _emit(out_data, inputs, backward_fn):
    """Wrap an op result, recording it if a tape is active and grads flow."""
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(out_data, requires_grad=True)
        tape.entries.append((out.node_id, tuple(inputs), backward_fn))
        return out
    return Tensor(out_data)


class GradStore:
    """Gradients produced by one backward pass, queried by tensor."""

    def __init__(self, grads_by_id):
        self._by_id = grads_by_id

    def of(self, tensor):
        """Gradient of the loss w.r.t. `tensor`; zeros if it never joined the graph."""
        g = self._by_id.get(tensor.node_id)
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def has(self, tensor):
        return tensor.node_id in self._by_id


def backward(tape, loss, params=()):
    """Reverse-replay `tape` from scalar `loss`; returns a GradStore.

    Every tensor in `params` is answerable afterwards; parameters that did
    not participate in the forward pass report zero gradient.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads = {loss.node_id: np.ones_like(loss.data)}
    keep = {p.node_id for p in params}
    keep.add(loss.node_id)
    for out_id, inputs, backward_fn in reversed(tape.entries):
        g = grads.get(out_id)
        if g is None:
            continue
        if out_id not in keep:
            del grads[out_id]
        in_grads = backward_fn(g)
        for tensor, gi in zip(inputs, in_grads):
            if gi is None or not tensor.requires_grad:
                continue
            acc = grads.get(tensor.node_id)
            grads[tensor.node_id] = gi if acc is None else acc + gi
    return GradStore(grads)


def _unbroadcast(g, shape):
    """Sum `g` down to `shape` (undo numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _emit(a.data + b.data, (a, b), bwd)


def sub(a, b):
    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _emit(a.data - b.data, (a, b), bwd)


def mul(a, b):
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), bwd)


def div(a, b):
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        ga = _unbroadcast(g / bd, ad.shape)
        gb = _unbroadcast(-g * ad / (bd * bd), bd.shape)
        return ga, gb

    return _emit(out, (a, b), bwd)


def scale(a, s):
    """Multiply by a python scalar."""
    s = float(s)

    def bwd(g):
        return (g * s,)

    return _emit(a.data * s, (a,), bwd)


def shift(a, s):
    """Add a python scalar."""

    def bwd(g):
        return (g,)

    return _emit(a.data + float(s), (a,), bwd)


def neg(a):
    def bwd(g):
        return (-g,)

    return _emit(-a.data, (a,), bwd)


def square(a):
    ad = a.data

    def bwd(g):
        return (2.0 * ad * g,)

    return _emit(ad * ad, (a,), bwd)


def log(a):
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return _emit(np.log(ad), (a,), bwd)


def exp(a):
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _emit(out, (a,), bwd)


# ------------------------------------------------------------------- matmul


def matmul(a, b):
    """a @ b with 2-D `b`; `a` may carry leading batch dims."""
    ad, bd = a.data, b.data
    if bd.ndim != 2 or ad.shape[-1] != bd.shape[0]:
        raise ContractViolation(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ bd.T
        g2 = g.reshape(-1, g.shape[-1])
        a2 = ad.reshape(-1, ad.shape[-1])
        gb = a2.T @ g2
        return ga, gb

    return _emit(out, (a, b), bwd)


def bmm(a, b):
    """Batched matmul: (B, m, n) @ (B, n, p) -> (B, m, p)."""
    ad, bd = a.data, b.data
    if ad.ndim != 3 or bd.ndim != 3 or ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
        raise ContractViolation(f"bmm shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def bwd(g):
        ga = g @ bd.transpose(0, 2, 1)
        gb = ad.transpose(0, 2, 1) @ g
        return ga, gb

    return _emit(out, (a, b), bwd)


def mix_stack(coeffs, parts):
    """Per-sample linear mix of a stack: (B, k) x k tensors of shape S -> (B, *S).

    Used to form per-sample mixed expert factors; gradients reach both the
    coefficients and any trainable part.
    """
    k = len(parts)
    if coeffs.data.ndim != 2 or coeffs.data.shape[1] != k:
        raise ContractViolation(f"mix_stack: coeffs {coeffs.data.shape} vs {k} parts")
    stack = np.stack([p.data for p in parts])  # (k, *S)
    cd = coeffs.data
    out = np.tensordot(cd, stack, axes=(1, 0))

    def bwd(g):
        flat_stack = stack.reshape(k, -1)
        flat_g = g.reshape(g.shape[0], -1)
        gc = flat_g @ flat_stack.T
        grads = [gc]
        need = [p.requires_grad for p in parts]
        if any(need):
            gp = np.tensordot(cd.T, flat_g, axes=(1, 0)).reshape(stack.shape)
            grads.extend(gp[j] if need[j] else None for j in range(k))
        else:
            grads.extend([None] * k)
        return grads

    return _emit(out, (coeffs, *parts), bwd)


# -------------------------------------------------------------- activations


def gelu(a):
    ad = a.data
    phi = special.ndtr(ad)  # standard normal CDF
    out = ad * phi

    def bwd(g):
        pdf = np.exp(-0.5 * ad * ad) * (1.0 / math.sqrt(2.0 * math.pi))
        return (g * (phi + ad * pdf),)

    return _emit(out, (a,), bwd)


def sigmoid(a):
    out = special.expit(a.data)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (a,), bwd)


def softplus(a):
    ad = a.data
    out = np.logaddexp(0.0, ad)

    def bwd(g):
        return (g * special.expit(ad),)

    return _emit(out, (a,), bwd)


def softmax(a, axis=-1):
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), bwd)


def logsumexp(a, axis=-1, keepdims=False):
    ad = a.data
    m = ad.max(axis=axis, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        gg = np.expand_dims(g, axis) if not keepdims else g
        return (gg * (e / s),)

    return _emit(out, (a,), bwd)


# --------------------------------------------------------------- reductions


def tensor_sum(a, axis=None, keepdims=False):
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, ad.shape).astype(ad.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, ad.shape).astype(ad.dtype, copy=True),)

    return _emit(out, (a,), bwd)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def mean_pool(a, axis):
    """Mean over one axis. Callers exclude padding by slicing it off first."""
    return mean(a, axis=axis)


# ------------------------------------------------------------ shape plumbing


def reshape(a, shape):
    ad = a.data
    out = ad.reshape(shape)

    def bwd(g):
        return (g.reshape(ad.shape),)

    return _emit(out, (a,), bwd)


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inv),)

    return _emit(a.data.transpose(axes), (a,), bwd)


def concat(tensors, axis=-1):
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(datas))
        )

    return _emit(out, tuple(tensors), bwd)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along `axis`."""
    ad = a.data
    size = ad.shape[axis]
    if start < 0 or length < 0 or start + length > size:
        raise ContractViolation(
            f"narrow [{start}, {start + length}) out of bounds for axis "
            f"{axis} of size {size}")
    idx = [slice(None)] * ad.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = ad[idx]

    def bwd(g):
        full = np.zeros_like(ad)
        full[idx] = g
        return (full,)

    return _emit(out, (a,), bwd)


def gather_rows(table, ids):
    """Row lookup into a (vocab, d) table; `ids` is an integer ndarray."""
    ids = np.asarray(ids)
    td = table.data
    if ids.size and (ids.min() < 0 or ids.max() >= td.shape[0]):
        raise ContractViolation(
            f"token id out of range [0, {td.shape[0]}): {int(ids.min())}..{int(ids.max())}"
        )
    out = td[ids]

    def bwd(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit(out, (table,), bwd)


# ------------------------------------------------------- stochastic / fused


def dropout(a, p, rng, training):
    """Zero entries w.p. `p`, scale survivors by 1/(1-p). Identity in eval.

    The mask is drawn once in the forward pass and reused by the backward
    closure, so gradients see exactly the realized mask.
    """
    if not 0.0 <= p < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    factor = 1.0 / (1.0 - p)
    mask = keep * factor

    def bwd(g):
        return (g * mask,)

    return _emit(a.data * mask, (a,), bwd)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply a learned affine."""
    ad = a.data
    mu = ad.mean(axis=-1, keepdims=True)
    var = ad.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (ad - mu) * inv
    out = xhat * gamma.data + beta.data
    n = ad.shape[-1]

    def bwd(g):
        gg = g * gamma.data
        gmean = gg.mean(axis=-1, keepdims=True)
        gxhat = (gg * xhat).mean(axis=-1, keepdims=True)
        ga = (gg - gmean - xhat * gxhat) * inv
        ggamma = (g * xhat).reshape(-1, n).sum(axis=0)
        gbeta = g.reshape(-1, n).sum(axis=0)
        return ga, ggamma, gbeta

    return _emit(out, (a, gamma, beta), bwd)


def causal_attention(q, k, v):
    """Scaled dot-product attention with a causal mask, fused backward.

    Shapes (B, H, L, Dh); position i attends to positions j <= i only.
    """
    qd, kd, vd = q.data, k.data, v.data
    if qd.shape != kd.shape or qd.shape != vd.shape or qd.ndim != 4:
        raise ContractViolation(f"attention shapes must match: {qd.shape}, {kd.shape}, {vd.shape}")
    L = qd.shape[2]
    sc = 1.0 / math.sqrt(qd.shape[-1])
    scores = (qd @ kd.transpose(0, 1, 3, 2)) * sc
    mask = np.triu(np.ones((L, L), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ vd

    def bwd(g):
        gv = p.transpose(0, 1, 3, 2) @ g
        gp = g @ vd.transpose(0, 1, 3, 2)
        ds = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (ds @ kd) * sc
        gk = (ds.transpose(0, 1, 3, 2) @ qd) * sc
        return gq, gk, gv

    return _emit(out, (q, k, v), bwd)


# ------------------------------------------------------------- verification


def grad_check(func, point, step_size=1e-4):
    """Max relative error between taped and central-difference gradients.

    `func` maps the tensors in `point` to a scalar Tensor and must be
    deterministic across calls (stochastic ops must be re-seeded inside).
    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    point = list(point)
    for t in point:
        t.requires_grad = True
    tape = Tape()
    with recording(tape):
        loss = func(point)
    store = backward(tape, loss, params=point)
    worst = 0.0
    for t in point:
        analytic = store.of(t)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step_size
            up = float(func(point).data)
            flat[i] = orig - step_size
            down = float(func(point).data)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step_size)
            a = analytic.reshape(-1)[i]
            if not (np.isfinite(a) and np.isfinite(numeric)):
                raise ContractViolation(
                    f"non-finite gradient at {t.name or 'tensor'}[{i}]: "
                    f"analytic={a}, numeric={numeric}"
                )
            err = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst

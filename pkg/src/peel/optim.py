"""AdamW with decoupled weight decay, global-norm clipping, cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import ContractViolation


def adamw_update(value, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """One bias-corrected AdamW step on raw arrays; mutates m and v in place.

    Decay is decoupled: the parameter shrinks by lr * weight_decay * value
    independently of the gradient term. Returns the updated value.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    return value - lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * value)


def clip_grad_norm(grads, max_norm):
    """Scale a list of gradient arrays so their joint L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ContractViolation(f"max_norm must be positive, got {max_norm}")
    total = 0.0
    for g in grads:
        total += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm


def cosine_lr(step, total_steps, base_lr):
    """Cosine decay from base_lr to 0 over total_steps optimizer steps."""
    if total_steps <= 0:
        raise ContractViolation(f"total_steps must be positive, got {total_steps}")
    step = min(max(step, 0), total_steps)
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


class AdamW:
    """Tracks first/second moments per parameter and applies adamw_update.

    Weight decay is applied only to matrices (ndim >= 2); biases, gains and
    other vectors are exempt so decay never drags normalization scales to 0.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.1,
                 grad_clip=None):
        self.params = list(params)
        seen = set()
        for p in self.params:
            if id(p) in seen:
                raise ContractViolation(f"parameter {p.name!r} registered twice")
            seen.add(id(p))
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grad_store, lr=None):
        """Apply one update from a GradStore; returns the pre-clip grad norm."""
        lr = self.lr if lr is None else lr
        grads = []
        for p in self.params:
            g = grad_store.of(p)
            if not np.all(np.isfinite(g)):
                raise ContractViolation(f"non-finite gradient for parameter {p.name!r}")
            grads.append(g)
        if self.grad_clip is not None:
            grads, norm = clip_grad_norm(grads, self.grad_clip)
        else:
            grads, norm = clip_grad_norm(grads, math.inf)
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            wd = self.weight_decay if p.data.ndim >= 2 else 0.0
            p.data = adamw_update(p.data, g, m, v, self.t, lr, self.beta1, self.beta2,
                                  self.eps, wd).astype(p.data.dtype)
        return norm

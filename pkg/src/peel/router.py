"""Context-conditioned routing over the expert library.

The router maps a pooled context embedding to one coefficient vector per
policy submodule (vision, text, state, fusion, transformer, head). Outputs
pass through a scaled sigmoid into (0, 2); per submodule only the top-delta
coefficients survive sparsification. Growing the library appends one
zero-initialized output column per submodule, so a brand-new expert starts
at coefficient exactly 1.0 while every existing routing is preserved
bit for bit.
"""

from __future__ import annotations

import numpy as np

from .autodiff import (ContractViolation, Tensor, add, concat, constant, dropout, gelu,
                       matmul, mul, param, reshape, scale, sigmoid)
from .experts import NUM_SUBMODULES
from .rng import stream


def build_context(visual_embeddings, instruction_embedding, proprio_window):
    """Pool a window into one context vector [mean f_v ; f_l ; mean proprio].

    visual_embeddings: (L, d_v), proprio_window: (L, d_p), L >= 1. Callers
    pass only real steps, never padding.
    """
    visual_embeddings = np.asarray(visual_embeddings)
    proprio_window = np.asarray(proprio_window)
    if visual_embeddings.ndim != 2 or visual_embeddings.shape[0] == 0:
        raise ContractViolation("context window must contain at least one step")
    if proprio_window.shape[0] != visual_embeddings.shape[0]:
        raise ContractViolation(
            f"window length mismatch: {visual_embeddings.shape[0]} visual steps "
            f"vs {proprio_window.shape[0]} proprio steps")
    return np.concatenate([
        visual_embeddings.mean(axis=0),
        np.asarray(instruction_embedding),
        proprio_window.mean(axis=0),
    ]).astype(np.float32)


def sparsify_mask(raw, delta):
    """0/1 mask keeping the top-delta entries of each submodule row.

    raw: (..., 6, k). Ties keep the lower expert index (stable sort on the
    negated values), and delta >= k keeps everything.
    """
    if delta < 1:
        raise ContractViolation(f"delta must be >= 1, got {delta}")
    k = raw.shape[-1]
    mask = np.zeros_like(raw)
    if k <= delta:
        mask[...] = 1.0
        return mask
    order = np.argsort(-raw, axis=-1, kind="stable")
    np.put_along_axis(mask, order[..., :delta], 1.0, axis=-1)
    return mask


def sparsify_topk(raw, delta):
    """Zero everything but the top-delta entries per submodule row."""
    raw = np.asarray(raw)
    return raw * sparsify_mask(raw, delta)


def coefficient_dropout(coeffs, p, rng, training):
    """Training: zero each coefficient w.p. p, scale survivors by 1/(1-p)."""
    if isinstance(coeffs, Tensor):
        return dropout(coeffs, p, rng, training)
    if not training or p == 0.0:
        return np.asarray(coeffs)
    keep = (rng.random(coeffs.shape) >= p).astype(coeffs.dtype)
    return coeffs * keep / (1.0 - p)


class Router:
    """Two-hidden-layer GELU network producing 6 x k coefficients in (0, 2).

    The output layer is stored as one (hidden, 6) weight block plus bias per
    expert; growth appends a zero block, which both preserves existing
    outputs bitwise (each block's matmul is untouched) and pins the new
    expert's coefficient at 2*sigmoid(0) = 1.0 for every context.
    """

    def __init__(self, d_context, hidden=128, seed=0):
        self.d_context = d_context
        self.hidden = hidden
        rng = stream(seed, "router", "init")
        s1 = 1.0 / np.sqrt(d_context)
        s2 = 1.0 / np.sqrt(hidden)
        self.w1 = param(rng.standard_normal((d_context, hidden)) * s1, "router.fc1.w")
        self.b1 = param(np.zeros(hidden), "router.fc1.b")
        self.w2 = param(rng.standard_normal((hidden, hidden)) * s2, "router.fc2.w")
        self.b2 = param(np.zeros(hidden), "router.fc2.b")
        self.out_w = []
        self.out_b = []

    @property
    def k(self):
        return len(self.out_w)

    def grow(self):
        """Add one zero-initialized output block for a new expert."""
        j = self.k
        self.out_w.append(param(np.zeros((self.hidden, NUM_SUBMODULES)), f"router.out{j}.w"))
        self.out_b.append(param(np.zeros(NUM_SUBMODULES), f"router.out{j}.b"))

    def params(self):
        return [self.w1, self.b1, self.w2, self.b2, *self.out_w, *self.out_b]

    def forward_raw(self, context):
        """Pre-sparsification coefficients for a (B, d_context) Tensor -> (B, 6, k)."""
        if self.k == 0:
            raise ContractViolation("routing requested before any expert exists")
        if context.data.shape[-1] != self.d_context:
            raise ContractViolation(
                f"context dim {context.data.shape[-1]} != router input {self.d_context}")
        h = gelu(add(matmul(context, self.w1), self.b1))
        h = gelu(add(matmul(h, self.w2), self.b2))
        b = context.data.shape[0]
        blocks = [reshape(add(matmul(h, w), bias), (b, NUM_SUBMODULES, 1))
                  for w, bias in zip(self.out_w, self.out_b)]
        z = blocks[0] if len(blocks) == 1 else concat(blocks, axis=2)
        return scale(sigmoid(z), 2.0)

    def route(self, context):
        """Raw coefficients for one numpy context vector -> (6, k) array."""
        out = self.forward_raw(constant(np.asarray(context, np.float32)[None]))
        return out.data[0]

    def route_sparse(self, context, delta):
        """Evaluation-time routing: raw then top-delta, no dropout."""
        raw = self.route(context)
        return sparsify_topk(raw, delta)

    def forward_coefficients(self, context, delta, p, rng, training):
        """Training-time routing on a Tensor batch: sparsify then dropout.

        The top-delta mask is computed from the forward values and applied
        as a constant, so gradients flow only into surviving entries.
        """
        raw = self.forward_raw(context)
        mask = sparsify_mask(raw.data, delta)
        coeffs = mul(raw, constant(mask))
        coeffs = coefficient_dropout(coeffs, p, rng, training)
        return raw, coeffs

"""Per-layer libraries of low-rank experts over frozen base weights.

Each adapted linear layer holds a base weight W0/b0 plus a growing list of
rank-r experts (A, B, optional bias). A coefficient vector c mixes experts
as W = W0 + (sum_j c_j A_j)(sum_j c_j B_j), so the delta is quadratic in c.
New experts start with orthonormal A columns (orthogonal to every prior
expert's columns in the same layer) and zero B, which leaves the layer's
output unchanged at the moment of growth.
"""

from __future__ import annotations

import hashlib
import logging

import numpy as np

from .autodiff import ContractViolation, Tensor, add, bmm, constant, matmul, mix_stack, param, reshape

log = logging.getLogger("peel")

SUBMODULES = ("vision", "text", "state", "fusion", "transformer", "head")
NUM_SUBMODULES = len(SUBMODULES)


def orthonormal_columns(d, r, prior, rng, tol=1e-6, max_redraws=16):
    """Draw r unit-norm columns of length d orthogonal to `prior` and each other.

    Gram-Schmidt runs twice per candidate for numerical headroom. When the
    remaining span is exhausted, a candidate is redrawn up to `max_redraws`
    times; after that a plain random unit vector is accepted and a warning
    is logged. Returns (columns (d, r), fallback_count).
    """
    if prior is not None and prior.size:
        basis = [prior[:, i].astype(np.float64) for i in range(prior.shape[1])]
    else:
        basis = []
    cols = []
    fallbacks = 0
    for _ in range(r):
        accepted = None
        for _ in range(max_redraws):
            cand = rng.standard_normal(d)
            cand /= np.linalg.norm(cand)
            v = cand.copy()
            for _pass in range(2):
                for b in basis:
                    v -= np.dot(b, v) * b
            n = np.linalg.norm(v)
            if n > tol:
                accepted = v / n
                break
        if accepted is None:
            accepted = rng.standard_normal(d)
            accepted /= np.linalg.norm(accepted)
            fallbacks += 1
            log.warning("expert init: span exhausted at d=%d with %d prior columns; "
                        "using a non-orthogonal random unit vector", d, len(basis))
        basis.append(accepted)
        cols.append(accepted)
    return np.stack(cols, axis=1), fallbacks


class LowRankExpert:
    """One task's adapter for one layer: A (d_in, r), B (r, d_out), optional b."""

    __slots__ = ("A", "B", "b", "task_id", "frozen")

    def __init__(self, A, B, b, task_id):
        self.A = A
        self.B = B
        self.b = b
        self.task_id = task_id
        self.frozen = False

    def params(self):
        out = [self.A, self.B]
        if self.b is not None:
            out.append(self.b)
        return out

    def freeze(self):
        self.frozen = True
        for p in self.params():
            p.requires_grad = False

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.A.data).tobytes())
        h.update(np.ascontiguousarray(self.B.data).tobytes())
        if self.b is not None:
            h.update(np.ascontiguousarray(self.b.data).tobytes())
        return h.hexdigest()


class AdaptedLinear:
    """Linear layer with a base weight and a library of low-rank experts."""

    def __init__(self, name, submodule, d_in, d_out, rank, rng, bias_experts=False,
                 dtype=np.float32):
        if submodule not in SUBMODULES:
            raise ContractViolation(f"unknown submodule {submodule!r}")
        if rank < 1 or rank > min(d_in, d_out):
            raise ContractViolation(
                f"rank {rank} outside [1, min({d_in}, {d_out})] for layer {name!r}")
        self.name = name
        self.submodule = submodule
        self.d_in = d_in
        self.d_out = d_out
        self.rank = rank
        self.bias_experts = bias_experts
        scale = 1.0 / np.sqrt(d_in)
        self.w0 = param(rng.standard_normal((d_in, d_out)) * scale, name=f"{name}.w0", dtype=dtype)
        self.b0 = param(np.zeros(d_out), name=f"{name}.b0", dtype=dtype)
        self.experts = []
        self._cache = None  # (coeff bytes, W tensor, b tensor)

    # ------------------------------------------------------------- library

    @property
    def k(self):
        return len(self.experts)

    def prior_columns(self):
        if not self.experts:
            return None
        return np.concatenate([e.A.data for e in self.experts], axis=1)

    def add_expert(self, rng, task_id):
        """Append a fresh expert: orthonormal A, zero B (and zero bias if enabled)."""
        cols, fallbacks = orthonormal_columns(self.d_in, self.rank, self.prior_columns(), rng)
        dtype = self.w0.data.dtype
        j = self.k
        A = param(cols, name=f"{self.name}.expert{j}.A", dtype=dtype)
        B = param(np.zeros((self.rank, self.d_out)), name=f"{self.name}.expert{j}.B", dtype=dtype)
        b = None
        if self.bias_experts:
            b = param(np.zeros(self.d_out), name=f"{self.name}.expert{j}.b", dtype=dtype)
        self.experts.append(LowRankExpert(A, B, b, task_id))
        self._cache = None
        return fallbacks

    # ------------------------------------------------------------- forward

    def _check_coeffs(self, coeffs):
        if len(coeffs) != self.k:
            raise ContractViolation(
                f"layer {self.name!r}: {len(coeffs)} coefficients for {self.k} experts")

    def synthesize(self, coeffs):
        """Materialize (W, b) for a coefficient vector, mixing nonzeros only.

        Iterating nonzero coefficients in ascending expert order keeps the
        result bit-stable as the library grows: a one-hot vector always
        reproduces exactly W0 + A_j B_j no matter how many other experts
        exist. All-zero coefficients return the base arrays themselves.
        """
        coeffs = np.asarray(coeffs, dtype=self.w0.data.dtype)
        self._check_coeffs(coeffs)
        nz = np.flatnonzero(coeffs)
        if nz.size == 0:
            return self.w0.data, self.b0.data
        abar = coeffs[nz[0]] * self.experts[nz[0]].A.data
        bbar = coeffs[nz[0]] * self.experts[nz[0]].B.data
        for j in nz[1:]:
            abar = abar + coeffs[j] * self.experts[j].A.data
            bbar = bbar + coeffs[j] * self.experts[j].B.data
        w = self.w0.data + abar @ bbar
        b = self.b0.data
        if self.bias_experts:
            bd = coeffs[nz[0]] * self.experts[nz[0]].b.data
            for j in nz[1:]:
                bd = bd + coeffs[j] * self.experts[j].b.data
            b = b + bd
        return w, b

    def materialized(self, coeffs, cache=None):
        """Cached (W, b) Tensors for a coefficient vector.

        With `cache` (a dict owned by one rollout) lookups are keyed by layer
        name, which keeps concurrent episodes from sharing mutable state;
        otherwise the layer's own single-slot cache is used. A key mismatch
        triggers resynthesis, so stale weights are never served.
        """
        key = np.asarray(coeffs, dtype=np.float32).tobytes()
        entry = self._cache if cache is None else cache.get(self.name)
        if entry is None or entry[0] != key:
            w, b = self.synthesize(coeffs)
            entry = (key, constant(w), constant(b))
            if cache is None:
                self._cache = entry
            else:
                cache[self.name] = entry
        return entry[1], entry[2]

    def forward(self, x, coeffs=None, cache=None):
        """Apply the layer inside the autodiff graph.

        coeffs may be None (bare base weights), a numpy vector (evaluation:
        materialized weights via the cache), or a (batch, k) Tensor
        (training: per-sample factored mixture, differentiable in both the
        coefficients and any unfrozen expert).
        """
        if coeffs is None:
            return add(matmul(x, self.w0), self.b0)
        if isinstance(coeffs, Tensor):
            return self._forward_factored(x, coeffs)
        w, b = self.materialized(coeffs, cache=cache)
        return add(matmul(x, w), b)

    def _forward_factored(self, x, coeffs):
        if coeffs.data.ndim != 2:
            raise ContractViolation(
                f"layer {self.name!r}: factored coefficients must be (batch, k)")
        self._check_coeffs(coeffs.data[0])
        base = add(matmul(x, self.w0), self.b0)
        squeeze = x.data.ndim == 2
        x3 = reshape(x, (x.data.shape[0], 1, self.d_in)) if squeeze else x
        abar = mix_stack(coeffs, [e.A for e in self.experts])
        bbar = mix_stack(coeffs, [e.B for e in self.experts])
        delta = bmm(bmm(x3, abar), bbar)
        if squeeze:
            delta = reshape(delta, (x.data.shape[0], self.d_out))
        y = add(base, delta)
        if self.bias_experts:
            bial = mix_stack(coeffs, [e.b for e in self.experts])
            if not squeeze:
                bial = reshape(bial, (coeffs.data.shape[0], 1, self.d_out))
            y = add(y, bial)
        return y

    def forward_single(self, x, coeffs, mode="materialized"):
        """Plain-numpy forward for one coefficient vector (no tape).

        Both modes implement the same mixture; `materialized` goes through
        the synthesized weight, `factored` keeps the low-rank factors apart.
        """
        x = np.asarray(x)
        if mode == "materialized":
            w, b = self.synthesize(coeffs)
            return x @ w + b
        if mode != "factored":
            raise ContractViolation(f"unknown forward mode {mode!r}")
        coeffs = np.asarray(coeffs, dtype=self.w0.data.dtype)
        self._check_coeffs(coeffs)
        y = x @ self.w0.data + self.b0.data
        nz = np.flatnonzero(coeffs)
        if nz.size == 0:
            return y
        abar = sum(coeffs[j] * self.experts[j].A.data for j in nz)
        bbar = sum(coeffs[j] * self.experts[j].B.data for j in nz)
        y = y + (x @ abar) @ bbar
        if self.bias_experts:
            y = y + sum(coeffs[j] * self.experts[j].b.data for j in nz)
        return y

    # -------------------------------------------------------------- params

    def base_params(self):
        return [self.w0, self.b0]

    def flops_estimate(self, delta, mode="materialized"):
        """(synthesis_flops, per_token_forward_flops) for a top-delta mixture.

        Synthesis counts the coefficient mixing of the selected experts'
        factors; the materialized forward then costs the same as the base
        layer, while the factored forward pays the low-rank path per token.
        """
        synth = 2 * delta * self.rank * (self.d_in + self.d_out)
        fwd = 2 * self.d_in * self.d_out
        if mode == "factored":
            fwd += 2 * self.rank * (self.d_in + self.d_out)
        elif mode != "materialized":
            raise ContractViolation(f"unknown flops mode {mode!r}")
        return synth, fwd


class ExpertLibrary:
    """All adapted layers of a policy, grown and frozen in lockstep."""

    def __init__(self):
        self.layers = {}

    def register(self, layer):
        if layer.name in self.layers:
            raise ContractViolation(f"duplicate adapted layer {layer.name!r}")
        if self.layers and layer.k != self.k:
            raise ContractViolation("layers must hold the same number of experts")
        self.layers[layer.name] = layer
        return layer

    @property
    def k(self):
        if not self.layers:
            return 0
        return next(iter(self.layers.values())).k

    def add_task_expert(self, root_seed, task_id):
        """Grow every layer by one expert; returns total span-exhaustion fallbacks."""
        from .rng import stream

        fallbacks = 0
        for name, layer in self.layers.items():
            fallbacks += layer.add_expert(stream(root_seed, "expert", task_id, name), task_id)
        return fallbacks

    def freeze_task(self, task_id):
        for layer in self.layers.values():
            for e in layer.experts:
                if e.task_id == task_id:
                    e.freeze()

    def expert_params(self, task_id):
        out = []
        for layer in self.layers.values():
            for e in layer.experts:
                if e.task_id == task_id:
                    out.extend(e.params())
        return out

    def frozen_checksums(self):
        out = {}
        for name, layer in self.layers.items():
            for idx, e in enumerate(layer.experts):
                if e.frozen:
                    out[f"{name}[{idx}]"] = e.checksum()
        return out

    def total_flops(self, delta, mode="materialized"):
        synth = fwd = 0
        for layer in self.layers.values():
            s, f = layer.flops_estimate(delta, mode)
            synth += s
            fwd += f
        return synth, fwd

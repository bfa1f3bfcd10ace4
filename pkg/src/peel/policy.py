"""Behavior-cloned manipulation policy with six adaptable submodules.

Observation pipeline per timestep: a two-layer perceptron embeds the
flattened global+ego grids, a token table embeds the instruction, a linear
projection embeds proprioception. The instruction FiLM-modulates the
concatenated visual/state features, which are projected into one token per
timestep; a small pre-norm causal transformer reads the token window, and a
Gaussian-mixture head emits the action distribution at each position.

Experts attach to all linear layers of the state encoder, fusion stage and
action head, and to the query/value projections of the transformer. The
desk-scale vision and text encoders contain no attention, so their linear
layers carry the experts instead. Every adapted layer keeps an input width
of at least 40 so that ten tasks of rank-4 experts fit orthogonally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor, constant, param
from .experts import SUBMODULES, AdaptedLinear, ExpertLibrary
from .rng import stream
from .router import build_context


@dataclass
class PolicyConfig:
    """Architecture knobs for the desk-scale policy."""

    context_len: int = 6
    d_model: int = 64
    layers: int = 2
    heads: int = 4
    modes: int = 5
    min_std: float = 1e-4
    action_dim: int = 3
    dropout: float = 0.15
    grid: int = 12
    vocab: int = 48
    max_tokens: int = 12
    vision_hidden: int = 128
    d_visual: int = 64
    d_text: int = 48
    state_hidden: int = 48
    d_state: int = 16
    film_hidden: int = 64
    head_hidden: int = 64
    mode_selection: str = "weighted"  # or "max_weight"
    placement: str = "standard"

    def validate(self):
        if self.d_model % self.heads != 0:
            raise ContractViolation(
                f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.mode_selection not in ("weighted", "max_weight"):
            raise ContractViolation(f"unknown mode_selection {self.mode_selection!r}")
        if self.placement != "standard":
            raise ContractViolation(f"unknown expert placement {self.placement!r}")
        for name in ("context_len", "layers", "heads", "modes", "action_dim", "grid",
                     "vocab", "max_tokens"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"policy.{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation(f"policy.dropout must be in [0, 1)")
        if self.min_std <= 0:
            raise ContractViolation("policy.min_std must be positive")
        return self

    @property
    def vis_dim(self):
        return 2 * self.grid * self.grid

    @property
    def proprio_dim(self):
        return 6

    @property
    def obs_dim(self):
        return self.vis_dim + self.proprio_dim

    @property
    def d_context(self):
        return self.d_visual + self.d_text + self.proprio_dim


class Linear:
    """Plain dense layer (part of the frozen base, never adapted)."""

    def __init__(self, name, d_in, d_out, rng, dtype=np.float32):
        self.name = name
        self.w = param(rng.standard_normal((d_in, d_out)) / np.sqrt(d_in),
                       name=f"{name}.w", dtype=dtype)
        self.b = param(np.zeros(d_out), name=f"{name}.b", dtype=dtype)

    def forward(self, x):
        return ad.add(ad.matmul(x, self.w), self.b)

    def params(self):
        return [self.w, self.b]


class GMM:
    """Mixture parameters; tensors during training, numpy after .numpy()."""

    __slots__ = ("logits", "means", "stds")

    def __init__(self, logits, means, stds):
        self.logits = logits
        self.means = means
        self.stds = stds

    def numpy(self):
        return GMM(self.logits.data, self.means.data, self.stds.data)


class Policy:
    """Frozen-base policy plus the expert library over its adapted layers."""

    def __init__(self, config, rank=4, bias_experts=False, seed=0, dtype=np.float32):
        config.validate()
        self.config = config
        self.rank = rank
        self.bias_experts = bias_experts
        self.dtype = dtype
        c = config
        self.library = ExpertLibrary()

        def adapted(name, submodule, d_in, d_out):
            layer = AdaptedLinear(name, submodule, d_in, d_out, rank,
                                  stream(seed, "init", name), bias_experts=bias_experts,
                                  dtype=dtype)
            return self.library.register(layer)

        def linear(name, d_in, d_out):
            return Linear(name, d_in, d_out, stream(seed, "init", name), dtype=dtype)

        fused = c.d_visual + c.d_state
        self.vis_fc1 = adapted("vision.fc1", "vision", c.vis_dim, c.vision_hidden)
        self.vis_fc2 = adapted("vision.fc2", "vision", c.vision_hidden, c.d_visual)
        # token embeddings feed the fusion network without an intervening
        # norm, so they start at unit-ish scale rather than transformer-tiny
        self.token_table = param(
            stream(seed, "init", "text.table").standard_normal((c.vocab, c.d_text)) * 0.5,
            name="text.table", dtype=dtype)
        self.text_proj = adapted("text.proj", "text", c.d_text, c.d_text)
        self.state_lift = linear("state.lift", c.proprio_dim, c.state_hidden)
        self.state_proj = adapted("state.proj", "state", c.state_hidden, c.d_state)
        self.film1 = adapted("fusion.film1", "fusion", c.d_text, c.film_hidden)
        self.film2 = adapted("fusion.film2", "fusion", c.film_hidden, 2 * fused)
        self.token_proj = adapted("fusion.token", "fusion", fused, c.d_model)
        self.pos = param(
            stream(seed, "init", "pos").standard_normal((c.context_len, c.d_model)) * 0.02,
            name="pos", dtype=dtype)
        self.blocks = []
        for i in range(c.layers):
            blk = {
                "q": adapted(f"tf{i}.q", "transformer", c.d_model, c.d_model),
                "v": adapted(f"tf{i}.v", "transformer", c.d_model, c.d_model),
                "k": linear(f"tf{i}.k", c.d_model, c.d_model),
                "o": linear(f"tf{i}.o", c.d_model, c.d_model),
                "mlp1": linear(f"tf{i}.mlp1", c.d_model, 2 * c.d_model),
                "mlp2": linear(f"tf{i}.mlp2", 2 * c.d_model, c.d_model),
                "ln1g": param(np.ones(c.d_model), name=f"tf{i}.ln1.g", dtype=dtype),
                "ln1b": param(np.zeros(c.d_model), name=f"tf{i}.ln1.b", dtype=dtype),
                "ln2g": param(np.ones(c.d_model), name=f"tf{i}.ln2.g", dtype=dtype),
                "ln2b": param(np.zeros(c.d_model), name=f"tf{i}.ln2.b", dtype=dtype),
            }
            self.blocks.append(blk)
        self.lnf_g = param(np.ones(c.d_model), name="tf.lnf.g", dtype=dtype)
        self.lnf_b = param(np.zeros(c.d_model), name="tf.lnf.b", dtype=dtype)
        out_dim = c.modes * (1 + 2 * c.action_dim)
        self.head_fc1 = adapted("head.fc1", "head", c.d_model, c.head_hidden)
        self.head_fc2 = adapted("head.fc2", "head", c.head_hidden, c.head_hidden)
        self.head_out = adapted("head.out", "head", c.head_hidden, out_dim)

    # ------------------------------------------------------------- params

    def base_params(self):
        out = [self.token_table, self.pos, self.lnf_g, self.lnf_b]
        out.extend(self.state_lift.params())
        for blk in self.blocks:
            for key in ("k", "o", "mlp1", "mlp2"):
                out.extend(blk[key].params())
            for key in ("ln1g", "ln1b", "ln2g", "ln2b"):
                out.append(blk[key])
        for layer in self.library.layers.values():
            out.extend(layer.base_params())
        return out

    def named_params(self):
        """All parameters (base + every expert), keyed by their names."""
        out = {p.name: p for p in self.base_params()}
        for layer in self.library.layers.values():
            for e in layer.experts:
                for p in e.params():
                    out[p.name] = p
        return out

    def set_base_trainable(self, flag):
        for p in self.base_params():
            p.requires_grad = bool(flag)

    # ------------------------------------------------------------ encoders

    def _coeff_for(self, coeffs, submodule):
        if coeffs is None:
            return None
        return coeffs.get(submodule)

    def encode_observation(self, vis, prop, tok_ids, tok_w, coeffs=None, cache=None):
        """Per-step embeddings (f_v, f_l, f_s) for batched windows.

        vis: (B, L, 2*G*G) Tensor, prop: (B, L, 6) Tensor, tok_ids: (B, M) int
        array, tok_w: (B, M) pooling weights (rows sum to 1 over real tokens).
        """
        cv = self._coeff_for(coeffs, "vision")
        h = ad.gelu(self.vis_fc1.forward(vis, cv, cache=cache))
        f_v = self.vis_fc2.forward(h, cv, cache=cache)

        b, m = tok_ids.shape
        emb = ad.gather_rows(self.token_table, tok_ids.reshape(-1))
        emb = ad.reshape(emb, (b, m, self.config.d_text))
        pooled = ad.bmm(constant(tok_w[:, None, :].astype(emb.data.dtype)), emb)
        pooled = ad.reshape(pooled, (b, self.config.d_text))
        f_l = self.text_proj.forward(pooled, self._coeff_for(coeffs, "text"), cache=cache)

        s = ad.gelu(self.state_lift.forward(prop))
        f_s = self.state_proj.forward(s, self._coeff_for(coeffs, "state"), cache=cache)
        return f_v, f_l, f_s

    def fuse(self, f_v, f_l, f_s, coeffs=None, cache=None):
        """FiLM-modulate [f_v ; f_s] by the instruction and project to tokens."""
        cf = self._coeff_for(coeffs, "fusion")
        fused = self.config.d_visual + self.config.d_state
        b = f_l.data.shape[0]
        h = ad.gelu(self.film1.forward(f_l, cf, cache=cache))
        gb = self.film2.forward(h, cf, cache=cache)
        # gamma is centered at one so an untrained modulator passes features
        # through unchanged instead of erasing them
        gamma = ad.shift(ad.reshape(ad.narrow(gb, 1, 0, fused), (b, 1, fused)), 1.0)
        beta = ad.reshape(ad.narrow(gb, 1, fused, fused), (b, 1, fused))
        x = ad.concat([f_v, f_s], axis=-1)
        x = ad.add(ad.mul(x, gamma), beta)
        return self.token_proj.forward(x, cf, cache=cache)

    def transform(self, tokens, coeffs=None, cache=None, training=False, rng=None):
        """Pre-norm causal transformer over the token window."""
        c = self.config
        ct = self._coeff_for(coeffs, "transformer")
        b, L, d = tokens.data.shape
        x = ad.add(tokens, ad.narrow(self.pos, 0, 0, L))
        hd = d // c.heads

        def split(t):
            return ad.transpose(ad.reshape(t, (b, L, c.heads, hd)), (0, 2, 1, 3))

        for blk in self.blocks:
            a = ad.layer_norm(x, blk["ln1g"], blk["ln1b"])
            q = split(blk["q"].forward(a, ct, cache=cache))
            k = split(blk["k"].forward(a))
            v = split(blk["v"].forward(a, ct, cache=cache))
            att = ad.causal_attention(q, k, v)
            att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, L, d))
            o = blk["o"].forward(att)
            o = ad.dropout(o, c.dropout, rng, training)
            x = ad.add(x, o)
            a2 = ad.layer_norm(x, blk["ln2g"], blk["ln2b"])
            mlp = blk["mlp2"].forward(ad.gelu(blk["mlp1"].forward(a2)))
            mlp = ad.dropout(mlp, c.dropout, rng, training)
            x = ad.add(x, mlp)
        return ad.layer_norm(x, self.lnf_g, self.lnf_b)

    def gmm_head(self, latents, coeffs=None, cache=None):
        c = self.config
        ch = self._coeff_for(coeffs, "head")
        h = ad.gelu(self.head_fc1.forward(latents, ch, cache=cache))
        h = ad.gelu(self.head_fc2.forward(h, ch, cache=cache))
        out = self.head_out.forward(h, ch, cache=cache)
        b, L, _ = out.data.shape
        m, da = c.modes, c.action_dim
        logits = ad.narrow(out, 2, 0, m)
        means = ad.reshape(ad.narrow(out, 2, m, m * da), (b, L, m, da))
        raw = ad.reshape(ad.narrow(out, 2, m + m * da, m * da), (b, L, m, da))
        stds = ad.shift(ad.softplus(raw), c.min_std)
        return GMM(logits, means, stds)

    def forward(self, vis, prop, tok_ids, tok_w, coeffs=None, cache=None,
                training=False, rng=None):
        """Full pipeline for batched windows; returns GMM parameter tensors."""
        vis = vis if isinstance(vis, Tensor) else constant(vis)
        prop = prop if isinstance(prop, Tensor) else constant(prop)
        f_v, f_l, f_s = self.encode_observation(vis, prop, tok_ids, tok_w, coeffs, cache)
        tokens = self.fuse(f_v, f_l, f_s, coeffs, cache)
        latents = self.transform(tokens, coeffs, cache, training=training, rng=rng)
        return self.gmm_head(latents, coeffs, cache)

    # ---------------------------------------------------- context pathway

    def context_vectors(self, vis, prop, tok_ids, tok_w):
        """Router inputs for a batch of windows, from the zero-coefficient base
        pathway so the context never depends on the adaptation being trained."""
        with ad.paused():
            f_v, f_l, _ = self.encode_observation(constant(vis), constant(prop),
                                                  tok_ids, tok_w)
        return np.concatenate([
            f_v.data.mean(axis=1),
            f_l.data,
            np.asarray(prop, np.float32).mean(axis=1),
        ], axis=1)

    def context_vector(self, vis_window, prop_window, tok_ids, tok_w):
        """Single-window context (used at rollout synthesis points)."""
        with ad.paused():
            f_v, f_l, _ = self.encode_observation(
                constant(np.asarray(vis_window, np.float32)[None]),
                constant(np.asarray(prop_window, np.float32)[None]),
                tok_ids[None], tok_w[None])
        return build_context(f_v.data[0], f_l.data[0], prop_window)

    # ------------------------------------------------------------ actions

    def act(self, vis_window, prop_window, tok_ids, tok_w, coeffs=None, cache=None):
        """GMM at the last window position, as numpy (no tape)."""
        with ad.paused():
            gmm = self.forward(np.asarray(vis_window, np.float32)[None],
                               np.asarray(prop_window, np.float32)[None],
                               tok_ids[None], tok_w[None], coeffs, cache)
        return GMM(gmm.logits.data[0, -1], gmm.means.data[0, -1], gmm.stds.data[0, -1])


def bc_nll_loss(gmm, actions):
    """Mean negative log-likelihood of actions under the mixture.

    The per-mode log density sums over action dimensions; the mixture
    combines modes through log-sum-exp of log-weights plus log densities.
    """
    actions = np.asarray(actions)
    a = constant(actions[:, :, None, :].astype(gmm.means.data.dtype))
    z = ad.div(ad.sub(a, gmm.means), gmm.stds)
    quad = ad.scale(ad.tensor_sum(ad.square(z), axis=-1), -0.5)
    logdet = ad.neg(ad.tensor_sum(ad.log(gmm.stds), axis=-1))
    comp = ad.add(quad, logdet)
    logw = ad.sub(gmm.logits, ad.logsumexp(gmm.logits, axis=-1, keepdims=True))
    ll = ad.logsumexp(ad.add(logw, comp), axis=-1)
    da = actions.shape[-1]
    return ad.shift(ad.neg(ad.mean(ll)), 0.5 * da * ad.LOG_2PI)


def select_action(gmm, mode="weighted"):
    """Deterministic head: the mean of the strongest mode.

    "weighted" ranks modes by mixture density at their own mean
    (log w_m - sum_i log sigma_mi); "max_weight" ranks by weight alone.
    Ties resolve to the lower mode index.
    """
    logits = np.asarray(gmm.logits, dtype=np.float64)
    logw = logits - logits.max()
    if mode == "weighted":
        score = logw - np.log(np.asarray(gmm.stds, dtype=np.float64)).sum(axis=-1)
    elif mode == "max_weight":
        score = logw
    else:
        raise ContractViolation(f"unknown mode selection {mode!r}")
    return np.asarray(gmm.means)[int(np.argmax(score))]


class RolloutResult:
    __slots__ = ("success", "steps", "synth_events", "observations", "actions",
                 "coeff_sum", "coeff_steps")

    def __init__(self, success, steps, synth_events, observations, actions,
                 coeff_sum, coeff_steps):
        self.success = success
        self.steps = steps
        self.synth_events = synth_events
        self.observations = observations
        self.actions = actions
        self.coeff_sum = coeff_sum
        self.coeff_steps = coeff_steps


def rollout_episode(policy, world, task, controller, episode_rng, synth_interval=1,
                    max_steps=None, record=False):
    """Run one closed-loop episode.

    The controller supplies coefficient vectors; they are recomputed only at
    steps where step % synth_interval == 0 and reused in between, with
    synthesized weights cached per episode. Returns a RolloutResult whose
    synth_events counts exactly the recomputation points.
    """
    if synth_interval < 1:
        raise ContractViolation(f"synth_interval must be >= 1, got {synth_interval}")
    c = policy.config
    max_steps = task.horizon if max_steps is None else max_steps
    tok_ids, tok_w = task.token_arrays(c.vocab, c.max_tokens)
    state = world.reset(task, episode_rng)
    window_vis = []
    window_prop = []
    cache = {}
    coeffs = None
    coeff_sum = None
    coeff_steps = 0
    observations = []
    actions = []
    synth_events = 0
    steps = 0
    success = False
    for t in range(max_steps):
        vis, prop = world.observe(task, state)
        if record:
            observations.append(np.concatenate([vis, prop]).astype(np.float32))
        window_vis.append(vis)
        window_prop.append(prop)
        if len(window_vis) > c.context_len:
            window_vis.pop(0)
            window_prop.pop(0)
        # left-pad short windows by repeating the earliest observation so the
        # policy always sees full-length windows, matching its training data
        pad = c.context_len - len(window_vis)
        vis_arr = np.asarray(window_vis, np.float32)
        prop_arr = np.asarray(window_prop, np.float32)
        if pad:
            vis_arr = np.concatenate([np.repeat(vis_arr[:1], pad, axis=0), vis_arr])
            prop_arr = np.concatenate([np.repeat(prop_arr[:1], pad, axis=0), prop_arr])
        if t % synth_interval == 0:
            coeffs = controller.coefficients(policy, vis_arr, prop_arr, tok_ids, tok_w)
            synth_events += 1
        if coeffs is not None:
            block = np.stack([coeffs[s] for s in SUBMODULES])
            coeff_sum = block.copy() if coeff_sum is None else coeff_sum + block
            coeff_steps += 1
        gmm = policy.act(vis_arr, prop_arr, tok_ids, tok_w, coeffs, cache)
        action = np.clip(select_action(gmm, c.mode_selection), -1.0, 1.0)
        if record:
            actions.append(action.astype(np.float32))
        state = world.step(task, state, action)
        steps += 1
        if world.success(task, state):
            success = True
            break
    if record:
        vis, prop = world.observe(task, state)
        observations.append(np.concatenate([vis, prop]).astype(np.float32))
    return RolloutResult(success, steps, synth_events,
                         np.asarray(observations, np.float32) if record else None,
                         np.asarray(actions, np.float32) if record else None,
                         coeff_sum, coeff_steps)

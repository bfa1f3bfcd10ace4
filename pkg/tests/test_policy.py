"""Policy-level behavior: mixture likelihood, action selection, base identity,
causal structure, and rollout synthesis cadence."""

import math

import numpy as np
import pytest

import peel.autodiff as ad
from peel.autodiff import ContractViolation, constant
from peel.config import PolicyConfig
from peel.policy import (
    GMM,
    Policy,
    bc_nll_loss,
    rollout_episode,
    select_action,
)
from peel.rng import stream
from peel.world import World, generate_suite


def tiny_gmm(logits, means, stds):
    """Wrap plain lists as (1, 1, M[, d_a]) tensors."""
    logits = np.asarray(logits, np.float64).reshape(1, 1, -1)
    means = np.asarray(means, np.float64).reshape(1, 1, logits.shape[-1], -1)
    stds = np.asarray(stds, np.float64).reshape(means.shape)
    return GMM(constant(logits), constant(means), constant(stds))


# ----------------------------------------------------------------- likelihood


def test_single_standard_mode_nll_is_half_log_two_pi():
    gmm = tiny_gmm([0.0], [0.0], [1.0])
    actions = np.zeros((1, 1, 1))
    with ad.paused():
        loss = bc_nll_loss(gmm, actions)
    assert abs(float(loss.data) - 0.5 * math.log(2 * math.pi)) < 1e-9


def test_nll_matches_dense_mixture_computation():
    rng = np.random.default_rng(0)
    m, da = 3, 2
    logits = rng.standard_normal(m)
    means = rng.standard_normal((m, da))
    stds = np.exp(rng.standard_normal((m, da)) * 0.3)
    a = rng.standard_normal(da)
    gmm = tiny_gmm(logits, means, stds)
    with ad.paused():
        loss = float(bc_nll_loss(gmm, a.reshape(1, 1, da)).data)
    w = np.exp(logits) / np.exp(logits).sum()
    dens = sum(
        w[i] * np.prod(np.exp(-0.5 * ((a - means[i]) / stds[i]) ** 2)
                       / (stds[i] * np.sqrt(2 * np.pi)))
        for i in range(m))
    assert abs(loss - (-np.log(dens))) < 1e-9


def test_duplicated_modes_do_not_change_the_likelihood():
    gmm1 = tiny_gmm([0.3], [0.7], [0.5])
    gmm2 = tiny_gmm([0.3, 0.3], [0.7, 0.7], [0.5, 0.5])
    actions = np.full((1, 1, 1), 0.2)
    with ad.paused():
        a = float(bc_nll_loss(gmm1, actions).data)
        b = float(bc_nll_loss(gmm2, actions).data)
    assert abs(a - b) < 1e-9


def test_nll_prefers_the_matching_mean():
    actions = np.full((1, 1, 1), 0.4)
    with ad.paused():
        near = float(bc_nll_loss(tiny_gmm([0.0], [0.4], [1.0]), actions).data)
        far = float(bc_nll_loss(tiny_gmm([0.0], [2.0], [1.0]), actions).data)
    assert near < far


# ------------------------------------------------------------ action selection


def test_weighted_selection_accounts_for_mode_sharpness():
    # mode 1 has slightly lower weight but much smaller stds, so its density
    # at its own mean wins under "weighted" while "max_weight" picks mode 0
    gmm = GMM(np.array([0.1, 0.0]),
              np.array([[1.0, 1.0], [-1.0, -1.0]]),
              np.array([[1.0, 1.0], [0.1, 0.1]]))
    np.testing.assert_array_equal(select_action(gmm, "weighted"), [-1.0, -1.0])
    np.testing.assert_array_equal(select_action(gmm, "max_weight"), [1.0, 1.0])


def test_selection_tie_goes_to_the_lower_mode_index():
    gmm = GMM(np.zeros(3), np.array([[0.5], [0.6], [0.7]]), np.ones((3, 1)))
    np.testing.assert_array_equal(select_action(gmm, "weighted"), [0.5])


def test_unknown_selection_mode_rejected():
    gmm = GMM(np.zeros(1), np.zeros((1, 2)), np.ones((1, 2)))
    with pytest.raises(ContractViolation):
        select_action(gmm, "sample")


# -------------------------------------------------------------- base identity


def small_policy(seed=0, **overrides):
    cfg = PolicyConfig(**overrides).validate()
    return Policy(cfg, rank=2, seed=seed), cfg


def sample_window(cfg, seed=0):
    rng = np.random.default_rng(seed)
    vis = rng.standard_normal((cfg.context_len, cfg.vis_dim)).astype(np.float32)
    prop = rng.standard_normal((cfg.context_len, cfg.proprio_dim)).astype(np.float32)
    task = generate_suite(0, "goal", 1, parity=1)[0]
    tok_ids, tok_w = task.token_arrays(cfg.vocab, cfg.max_tokens)
    return vis, prop, tok_ids, tok_w


def test_zero_coefficients_reproduce_the_base_policy_bitwise():
    policy, cfg = small_policy()
    for t in range(2):
        policy.library.add_task_expert(0, f"task-{t}")
    vis, prop, tok_ids, tok_w = sample_window(cfg)
    base = policy.act(vis, prop, tok_ids, tok_w, coeffs=None)
    zeros = {s: np.zeros(2, np.float32)
             for s in ("vision", "text", "state", "fusion", "transformer", "head")}
    mixed = policy.act(vis, prop, tok_ids, tok_w, coeffs=zeros)
    assert np.array_equal(base.logits, mixed.logits)
    assert np.array_equal(base.means, mixed.means)
    assert np.array_equal(base.stds, mixed.stds)


def test_context_vector_ignores_expert_adaptation():
    policy, cfg = small_policy()
    vis, prop, tok_ids, tok_w = sample_window(cfg)
    before = policy.context_vector(vis, prop, tok_ids, tok_w)
    policy.library.add_task_expert(0, "task-0")
    rng = np.random.default_rng(1)
    for layer in policy.library.layers.values():
        layer.experts[0].B.data = rng.standard_normal(
            layer.experts[0].B.data.shape).astype(np.float32)
    after = policy.context_vector(vis, prop, tok_ids, tok_w)
    np.testing.assert_array_equal(before, after)
    assert after.shape == (cfg.d_context,)


def test_context_vector_concatenates_visual_text_and_proprio_means():
    policy, cfg = small_policy()
    vis, prop, tok_ids, tok_w = sample_window(cfg)
    ctx = policy.context_vector(vis, prop, tok_ids, tok_w)
    np.testing.assert_allclose(ctx[-cfg.proprio_dim:], prop.mean(axis=0), rtol=1e-6)


# ----------------------------------------------------------------- causality


def test_future_observations_do_not_leak_backward():
    policy, cfg = small_policy()
    vis, prop, tok_ids, tok_w = sample_window(cfg)
    with ad.paused():
        full = policy.forward(vis[None], prop[None], tok_ids[None], tok_w[None])
        means_before = full.means.data.copy()
    vis2 = vis.copy()
    vis2[-1] += 10.0
    with ad.paused():
        bumped = policy.forward(vis2[None], prop[None], tok_ids[None], tok_w[None])
    L = cfg.context_len
    assert np.array_equal(means_before[:, : L - 1], bumped.means.data[:, : L - 1])
    assert not np.array_equal(means_before[:, L - 1], bumped.means.data[:, L - 1])


def test_act_returns_the_last_window_position():
    policy, cfg = small_policy()
    vis, prop, tok_ids, tok_w = sample_window(cfg)
    gmm = policy.act(vis, prop, tok_ids, tok_w)
    with ad.paused():
        full = policy.forward(vis[None], prop[None], tok_ids[None], tok_w[None])
    np.testing.assert_array_equal(gmm.means, full.means.data[0, -1])


# ------------------------------------------------------------------- rollouts


class CountingController:
    def __init__(self):
        self.calls = 0

    def coefficients(self, policy, vis_window, prop_window, tok_ids, tok_w):
        self.calls += 1
        return None


def test_rollout_synthesis_cadence_is_ceil_steps_over_interval():
    policy, cfg = small_policy()
    world = World(grid=cfg.grid)
    task = generate_suite(0, "goal", 1, parity=1)[0]
    for interval in (1, 3, 5, 7):
        controller = CountingController()
        result = rollout_episode(policy, world, task, controller,
                                 stream(0, "episode"), synth_interval=interval)
        assert result.synth_events == math.ceil(result.steps / interval)
        assert controller.calls == result.synth_events


def test_rollout_rejects_nonpositive_interval():
    policy, cfg = small_policy()
    world = World(grid=cfg.grid)
    task = generate_suite(0, "goal", 1, parity=1)[0]
    with pytest.raises(ContractViolation):
        rollout_episode(policy, world, task, CountingController(),
                        stream(0, "e"), synth_interval=0)

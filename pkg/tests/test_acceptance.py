"""Acceptance battery: eleven system-level criteria, one test each.

Run with `pytest -v tests/test_acceptance.py` to get a pass/fail line per
criterion. The battery is self-contained but heavy: it pretrains a base
policy on a 30-task mixed-family suite (about ten minutes) and then runs a
3-seed lifelong comparison grid (about twelve minutes). Set

    PEEL_ACCEPTANCE_CACHE=/some/dir

to cache the pretrained base checkpoint between invocations; everything
downstream of the base is recomputed every run.
"""

import math
import os
import time

import numpy as np
import pytest

from peel.cli import load_base_into, main as cli_main
from peel.config import RunConfig
from peel.experts import SUBMODULES, AdaptedLinear
from peel.harness import (RouterController, SuccessMatrix, compute_metrics,
                          pretrain, run_lifelong, select_best_checkpoint,
                          TaskDataset)
from peel.io import save_checkpoint
from peel.policy import Policy, rollout_episode
from peel.world import (World, collect_demonstrations, generate_suite,
                        pretrain_suite, replay_demo, run_scripted_episode)

SUITE_SEED = 11
RUN_SEEDS = (0, 1, 2)


# ---------------------------------------------------------------- fixtures


@pytest.fixture(scope="session")
def base_state(tmp_path_factory):
    """Pretrained base tensors, name -> float32 array."""
    cache_dir = os.environ.get("PEEL_ACCEPTANCE_CACHE")
    cfg = RunConfig()
    path = None
    if cache_dir:
        path = os.path.join(cache_dir, "acceptance-base.ckpt")
        if os.path.exists(path):
            policy = Policy(cfg.policy, rank=cfg.rank, seed=cfg.seed)
            load_base_into(policy, path)
            return {p.name: p.data.copy() for p in policy.base_params()}
    tasks = pretrain_suite(0, 30)
    world = World(grid=cfg.policy.grid)
    demos = {t.task_id: collect_demonstrations(world, t, cfg.demos_per_task, 0)
             for t in tasks}
    policy = Policy(cfg.policy, rank=cfg.rank, seed=cfg.seed)
    datasets = [TaskDataset(t, demos[t.task_id], cfg.policy) for t in tasks]
    pretrain(policy, datasets, cfg)
    state = {p.name: p.data.copy() for p in policy.base_params()}
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        save_checkpoint(path, state, {"kind": "base", "seed": cfg.seed})
    return state


@pytest.fixture(scope="session")
def suite():
    return generate_suite(SUITE_SEED, "object", 5, parity=1)


@pytest.fixture(scope="session")
def demo_sets(suite):
    cfg = RunConfig()
    world = World(grid=cfg.policy.grid)
    return {t.task_id: collect_demonstrations(world, t, cfg.demos_per_task,
                                              SUITE_SEED)
            for t in suite}


def _fresh_policy(base_state, cfg, seed):
    policy = Policy(cfg.policy, rank=cfg.rank, seed=seed)
    for p in policy.base_params():
        p.data = np.array(base_state[p.name], copy=True)
    return policy


def _run(method, ratio, seed, base_state, suite, demo_sets):
    cfg = RunConfig()
    cfg.seed = seed
    if ratio is not None:
        cfg.cr_ratio = ratio
    cfg.validate()
    policy = _fresh_policy(base_state, cfg, seed)
    t0 = time.monotonic()
    result = run_lifelong(method, policy, suite, demo_sets, cfg,
                          world=World(grid=cfg.policy.grid))
    return result, time.monotonic() - t0, policy


@pytest.fixture(scope="session")
def grid(base_state, suite, demo_sets):
    """3 seeds x {full replay, 5% replay, sequential finetuning}."""
    out = {"dmpel@1.0": [], "dmpel@0.05": [], "seqft_lora": []}
    for seed in RUN_SEEDS:
        for key, method, ratio in (("dmpel@1.0", "dmpel", 1.0),
                                   ("dmpel@0.05", "dmpel", 0.05),
                                   ("seqft_lora", "seqft_lora", None)):
            result, dt, policy = _run(method, ratio, seed, base_state, suite,
                                      demo_sets)
            out[key].append({"result": result, "seconds": dt,
                             "policy": policy, "seed": seed})
    return out


@pytest.fixture(scope="session")
def tail_run(base_state, suite, demo_sets):
    result, dt, policy = _run("tail_oracle", None, RUN_SEEDS[0], base_state,
                              suite, demo_sets)
    return {"result": result, "seconds": dt, "policy": policy}


def _mean(runs, key):
    return float(np.mean([r["result"].metrics[key] for r in runs]))


# --------------------------------------------------------------- criteria


def test_criterion_01_gradient_checks_under_two_minutes(capsys):
    t0 = time.monotonic()
    rc = cli_main(["verify"])
    dt = time.monotonic() - t0
    out = capsys.readouterr().out
    assert rc == 0, f"verify failed:\n{out}"
    assert "4/4 passed" in out
    assert dt < 120.0, f"verify took {dt:.1f}s, bound is 120s"


def test_criterion_02_zero_coefficients_reproduce_base_bitwise(base_state):
    cfg = RunConfig()
    policy = _fresh_policy(base_state, cfg, seed=5)
    for t in range(2):
        policy.library.add_task_expert(root_seed=123, task_id=t)
    rng = np.random.default_rng(9)
    # nonzero factors so the identity is about the coefficients, not about
    # freshly zeroed B matrices
    for layer in policy.library.layers.values():
        for e in layer.experts:
            e.B.data = rng.standard_normal(e.B.data.shape).astype(np.float32)
    k = policy.library.k
    zeros = {s: np.zeros(k, dtype=np.float32) for s in SUBMODULES}
    c = cfg.policy
    for trial in range(100):
        vis = rng.random((c.context_len, c.vis_dim), dtype=np.float32)
        prop = rng.standard_normal((c.context_len, 6)).astype(np.float32)
        ids = rng.integers(0, c.vocab, size=c.max_tokens)
        tw = np.ones(c.max_tokens, dtype=np.float32)
        g_base = policy.act(vis, prop, ids, tw, coeffs=None)
        g_zero = policy.act(vis, prop, ids, tw, coeffs=zeros)
        assert np.array_equal(g_base.logits, g_zero.logits), f"trial {trial}"
        assert np.array_equal(g_base.means, g_zero.means), f"trial {trial}"
        assert np.array_equal(g_base.stds, g_zero.stds), f"trial {trial}"


def test_criterion_03_delta_output_scales_quadratically():
    rng = np.random.default_rng(3)
    layer = AdaptedLinear("probe", "head", 64, 48, rank=4, rng=rng,
                          dtype=np.float64)
    layer.add_expert(np.random.default_rng(4), task_id=0)
    layer.experts[0].B.data = rng.standard_normal((4, 48))
    x = rng.standard_normal((32, 64))
    base = layer.forward_single(x, np.zeros(1))
    unit = layer.forward_single(x, np.ones(1)) - base
    for c in (0.25, 0.5, 1.0, 2.0):
        delta = layer.forward_single(x, np.array([c])) - base
        rel = np.linalg.norm(delta - c * c * unit) / np.linalg.norm(c * c * unit)
        assert rel < 1e-6, f"c={c}: relative error {rel:.3e}"


def test_criterion_04_expert_columns_stay_orthogonal_over_ten_tasks():
    cfg = RunConfig()
    policy = Policy(cfg.policy, rank=cfg.rank, seed=2)
    for t in range(10):
        fallbacks = policy.library.add_task_expert(root_seed=77, task_id=t)
        assert fallbacks == 0
    for name, layer in policy.library.layers.items():
        cols = np.concatenate([e.A.data for e in layer.experts],
                              axis=1).astype(np.float64)
        gram = cols.T @ cols
        off = gram - np.diag(np.diag(gram))
        worst = float(np.abs(off).max())
        assert worst < 1e-6, f"layer {name}: off-diagonal dot {worst:.3e}"


def test_criterion_05_routing_is_sparse_and_bounded(grid, suite):
    cfg = RunConfig()
    run = grid["dmpel@1.0"][0]
    captured = []

    class Capturing(RouterController):
        def coefficients(self, policy, vis, prop, ids, tw):
            out = super().coefficients(policy, vis, prop, ids, tw)
            captured.append(out)
            return out

    controller = Capturing(run["result"].router, cfg.delta)
    world = World(grid=cfg.policy.grid)
    for idx, task in enumerate(suite):
        for ep in range(2):
            rollout_episode(run["policy"], world, task, controller,
                            np.random.default_rng([5, idx, ep]))
    assert captured
    for coeffs in captured:
        for s, vec in coeffs.items():
            nnz = int(np.count_nonzero(vec))
            assert nnz <= cfg.delta, f"{s}: {nnz} nonzeros"
            assert vec.min() >= 0.0 and vec.max() <= 2.0, f"{s}: {vec}"
    for runs in grid.values():
        for r in runs:
            for block in r["result"].coefficient_log.values():
                assert block.min() >= 0.0 and block.max() <= 2.0


def test_criterion_06_metric_oracle_and_clamping_examples():
    matrix = SuccessMatrix(2, [5, 10])
    matrix.set_diagonal(1, [0.5, 0.7], 0.7)
    matrix.set_diagonal(2, [0.4, 0.8], 0.8)
    matrix.set_entry(2, 1, 0.6)
    m = compute_metrics(matrix)
    assert abs(m["fwt"] - 0.6) < 1e-12, m
    assert abs(m["nbt"] - 0.1) < 1e-12, m
    assert abs(m["auc"] - 0.6) < 1e-12, m

    idx, best, clamped = select_best_checkpoint([0.5, 0.7])
    assert idx == 1 and abs(best - 0.7) < 1e-12
    assert abs(float(np.mean(clamped)) - 0.6) < 1e-12
    idx, best, clamped = select_best_checkpoint([0.8, 0.6])
    assert idx == 0 and abs(best - 0.8) < 1e-12
    assert clamped == [0.8, 0.8]
    assert abs(float(np.mean(clamped)) - 0.8) < 1e-12


def test_criterion_07_task_labeled_oracle_never_forgets(tail_run):
    result = tail_run["result"]
    assert result.metrics["nbt"] == 0.0, result.metrics
    history = result.checksum_history
    assert len(history) == 5
    for earlier, later in zip(history, history[1:]):
        for name, digest in earlier.items():
            assert later.get(name) == digest, f"{name} changed after freezing"


def test_criterion_08_beats_sequential_finetuning_on_three_seed_means(grid):
    nbt_full = _mean(grid["dmpel@1.0"], "nbt")
    nbt_seq = _mean(grid["seqft_lora"], "nbt")
    auc_full = _mean(grid["dmpel@1.0"], "auc")
    auc_seq = _mean(grid["seqft_lora"], "auc")
    battery = sum(r["seconds"] for key in ("dmpel@1.0", "seqft_lora")
                  for r in grid[key])
    print(f"mean NBT {nbt_full:.3f} (bound {0.5 * nbt_seq:.3f}), "
          f"mean AUC {auc_full:.3f} vs {auc_seq:.3f}, battery {battery:.0f}s")
    assert nbt_full <= 0.5 * nbt_seq, \
        f"mean NBT {nbt_full:.3f} > 0.5 x {nbt_seq:.3f}"
    assert auc_full >= auc_seq, f"mean AUC {auc_full:.3f} < {auc_seq:.3f}"
    assert battery < 45 * 60, f"battery took {battery:.0f}s, bound 2700s"


def test_criterion_09_five_percent_replay_stays_cheap_and_effective(grid):
    nbt_full = _mean(grid["dmpel@1.0"], "nbt")
    nbt_sparse = _mean(grid["dmpel@0.05"], "nbt")
    print(f"mean NBT sparse {nbt_sparse:.3f} vs bound {1.5 * nbt_full:.3f}")
    assert nbt_sparse <= 1.5 * nbt_full, \
        f"mean NBT at 5% replay {nbt_sparse:.3f} > 1.5 x {nbt_full:.3f}"
    for r in grid["dmpel@0.05"]:
        ratio = r["result"].storage["cr_to_demo_ratio"]
        assert ratio < 0.25, f"seed {r['seed']}: storage ratio {ratio:.3f}"


def test_criterion_10_flops_formula_and_synthesis_cadence(grid, suite):
    cfg = RunConfig()
    run = grid["dmpel@1.0"][0]
    policy = run["policy"]
    for layer in policy.library.layers.values():
        synth, fwd = layer.flops_estimate(cfg.delta)
        assert synth == 2 * cfg.delta * layer.rank * (layer.d_in + layer.d_out)
        assert fwd == 2 * layer.d_in * layer.d_out
        _, factored = layer.flops_estimate(cfg.delta, mode="factored")
        assert factored == fwd + 2 * layer.rank * (layer.d_in + layer.d_out)
    controller = RouterController(run["result"].router, cfg.delta)
    world = World(grid=cfg.policy.grid)
    for task in suite[:3]:
        result = rollout_episode(policy, world, task, controller,
                                 np.random.default_rng([8, task.task_id]),
                                 synth_interval=5)
        assert result.synth_events == math.ceil(result.steps / 5), \
            f"{task.task_id}: {result.synth_events} events in {result.steps} steps"


def test_criterion_11_scripted_expert_quality_and_demo_replay(suite, demo_sets):
    cfg = RunConfig()
    world = World(grid=cfg.policy.grid)
    for idx, task in enumerate(suite):
        wins = sum(run_scripted_episode(world, task, 21_000 + idx * 200 + ep).success
                   for ep in range(200))
        rate = wins / 200
        assert rate >= 0.95, f"{task.task_id}: scripted success {rate:.3f}"
    for task in suite:
        for i, demo in enumerate(demo_sets[task.task_id]):
            assert replay_demo(world, task, demo), \
                f"{task.task_id} demo {i} does not replay to success"

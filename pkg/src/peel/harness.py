"""Lifelong training and evaluation over a task sequence.

Implements the full experimental loop: behavior-cloning pretraining of the
base policy, sequential adaptation with a growing expert library and routed
coefficients, the replay baselines, earliest-best checkpoint selection, the
lower-triangular success matrix, and the FWT / NBT / AUC metrics.

Methods
    dmpel        one frozen low-rank expert set per task plus a trained
                 router, with coefficient replay against forgetting
    seqft_lora   a single expert set fine-tuned across the whole sequence
    er           seqft_lora plus mixed batches replaying stored demos
    tail_oracle  per-task expert sets with oracle one-hot routing
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, constant
from .experts import NUM_SUBMODULES, SUBMODULES
from .io import save_checkpoint
from .optim import AdamW, cosine_lr
from .policy import Policy, bc_nll_loss, rollout_episode
from .rng import spawn_seeds, stream
from .router import Router
from .world import World

METHODS = ("dmpel", "seqft_lora", "er", "tail_oracle")


def eval_workers(episodes):
    """Worker count for parallel evaluation, capped by PEEL_THREADS."""
    cap = int(os.environ.get("PEEL_THREADS", "1"))
    return max(1, min(cap, episodes))


# ------------------------------------------------------------------ dataset


class TaskDataset:
    """Training windows for one task's demonstrations.

    Every demonstrated step becomes one window of the trailing context_len
    observations (left-padded by repeating the first observation), with the
    demonstrated action at each window position as the regression target.
    """

    def __init__(self, task, demos, policy_config):
        c = policy_config
        T = c.context_len
        vis_parts, prop_parts, act_parts = [], [], []
        for traj in demos:
            S = traj.steps
            obs = traj.observations
            idx = np.clip(np.arange(S)[:, None] + np.arange(-T + 1, 1)[None, :], 0, None)
            win = obs[idx]                               # (S, T, obs_dim)
            vis_parts.append(win[:, :, :c.vis_dim])
            prop_parts.append(win[:, :, c.vis_dim:])
            act_parts.append(traj.actions[np.minimum(idx, S - 1)])
        self.task = task
        self.vis = np.concatenate(vis_parts).astype(np.float32)
        self.prop = np.concatenate(prop_parts).astype(np.float32)
        self.act = np.concatenate(act_parts).astype(np.float32)
        self.tok_ids, self.tok_w = task.token_arrays(c.vocab, c.max_tokens)
        self.contexts = None
        self.steps = sum(t.steps for t in demos)

    def __len__(self):
        return self.vis.shape[0]

    def attach_contexts(self, policy, batch=512):
        """Precompute router inputs once; they depend only on the frozen base."""
        outs = []
        for lo in range(0, len(self), batch):
            hi = min(lo + batch, len(self))
            n = hi - lo
            outs.append(policy.context_vectors(
                self.vis[lo:hi], self.prop[lo:hi],
                np.tile(self.tok_ids, (n, 1)), np.tile(self.tok_w, (n, 1))))
        self.contexts = np.concatenate(outs).astype(np.float32)

    def rows(self, idx):
        n = len(idx)
        return (self.vis[idx], self.prop[idx],
                np.tile(self.tok_ids, (n, 1)), np.tile(self.tok_w, (n, 1)),
                self.act[idx])


def batch_indices(n, batch, rng):
    order = rng.permutation(n)
    return [order[lo:lo + batch] for lo in range(0, n, batch)]


# -------------------------------------------------------------- controllers


class BaseController:
    """No adaptation: the policy runs on its pretrained weights."""

    def coefficients(self, policy, vis_window, prop_window, tok_ids, tok_w):
        return None


class FixedController:
    """A constant coefficient vector for every submodule (baselines)."""

    def __init__(self, vector):
        self.vector = np.asarray(vector, dtype=np.float32)

    def coefficients(self, policy, vis_window, prop_window, tok_ids, tok_w):
        return {s: self.vector for s in SUBMODULES}


class RouterController:
    """Context-conditioned sparse routing (evaluation path, no dropout)."""

    def __init__(self, router, delta):
        self.router = router
        self.delta = delta

    def coefficients(self, policy, vis_window, prop_window, tok_ids, tok_w):
        ctx = policy.context_vector(vis_window, prop_window, tok_ids, tok_w)
        coeffs = self.router.route_sparse(ctx, self.delta)
        return {s: coeffs[i] for i, s in enumerate(SUBMODULES)}


def one_hot(index, k):
    v = np.zeros(k, dtype=np.float32)
    v[index] = 1.0
    return v


# --------------------------------------------------------------- evaluation


def eval_seeds(root_seed, task_id, episodes):
    """Seed list keyed by the evaluated task only, so every method and every
    checkpoint sees identical evaluation noise on a given task."""
    return spawn_seeds(root_seed, "eval", task_id, count=episodes)


def evaluate_task(policy, world, task, controller, seeds, synth_interval=1):
    """Success rate over seeded episodes, plus mean coefficients if routed."""
    def run(seed):
        return rollout_episode(policy, world, task, controller,
                               stream(seed, "episode"), synth_interval=synth_interval)

    workers = eval_workers(len(seeds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    rate = sum(r.success for r in results) / len(results)
    coeff_sum, coeff_steps = None, 0
    for r in results:
        if r.coeff_sum is not None:
            coeff_sum = r.coeff_sum if coeff_sum is None else coeff_sum + r.coeff_sum
            coeff_steps += r.coeff_steps
    mean_coeff = coeff_sum / coeff_steps if coeff_steps else None
    return rate, mean_coeff


def evaluate_suite(policy, world, tasks, controller, root_seed, episodes,
                   synth_interval=1):
    rates = {}
    for task in tasks:
        seeds = eval_seeds(root_seed, task.task_id, episodes)
        rates[task.task_id], _ = evaluate_task(policy, world, task, controller,
                                               seeds, synth_interval)
    return rates


# ------------------------------------------------------- checkpoint select


def select_best_checkpoint(rates):
    """Earliest checkpoint attaining the best on-task rate, plus the series
    clamped to the best value at and after that checkpoint."""
    if not rates:
        raise ContractViolation("empty checkpoint rate list")
    best = max(rates)
    idx = rates.index(best)
    clamped = [r if i < idx else best for i, r in enumerate(rates)]
    return idx, best, clamped


# ------------------------------------------------------------ success matrix


class SuccessMatrix:
    """Lower-triangular success records for a K-task sequence.

    diag_series[k] holds the clamped per-checkpoint on-task rates while task
    k was being learned; final[l][j] holds the post-task-l rate on task j
    (j == l stores the best on-task rate). Task indices are 1-based.
    """

    def __init__(self, num_tasks, checkpoint_epochs):
        self.num_tasks = num_tasks
        self.checkpoint_epochs = list(checkpoint_epochs)
        self.diag_series = {}
        self.final = {}

    def set_diagonal(self, k, clamped_series, best):
        if len(clamped_series) != len(self.checkpoint_epochs):
            raise ContractViolation(
                f"task {k}: {len(clamped_series)} checkpoint rates, "
                f"expected {len(self.checkpoint_epochs)}")
        self.diag_series[k] = [float(x) for x in clamped_series]
        self.final.setdefault(k, {})[k] = float(best)

    def set_entry(self, l, j, rate):
        self.final.setdefault(l, {})[j] = float(rate)

    def missing(self):
        out = []
        for k in range(1, self.num_tasks + 1):
            if k not in self.diag_series:
                out.append(f"diagonal series for task {k}")
            for j in range(1, k + 1):
                if j not in self.final.get(k, {}):
                    out.append(f"entry ({k},{j})")
        return out

    def to_json(self):
        return {
            "num_tasks": self.num_tasks,
            "checkpoint_epochs": self.checkpoint_epochs,
            "diag_series": {str(k): v for k, v in self.diag_series.items()},
            "final": {str(k): {str(j): v for j, v in row.items()}
                      for k, row in self.final.items()},
        }

    @classmethod
    def from_json(cls, d):
        m = cls(d["num_tasks"], d["checkpoint_epochs"])
        m.diag_series = {int(k): list(v) for k, v in d["diag_series"].items()}
        m.final = {int(k): {int(j): v for j, v in row.items()}
                   for k, row in d["final"].items()}
        return m


def compute_metrics(matrix):
    """Forward transfer, negative backward transfer, and success-curve area.

    FWT averages the clamped checkpoint series on each task's diagonal. NBT
    averages, over tasks k < K, the drop from the best on-task rate to the
    rates measured after each later task. AUC combines the diagonal series
    mean with all later evaluations of the same task.
    """
    missing = matrix.missing()
    if missing:
        raise ContractViolation("incomplete success matrix: " + "; ".join(missing))
    K = matrix.num_tasks
    fwt = sum(float(np.mean(matrix.diag_series[k])) for k in range(1, K + 1)) / K
    if K > 1:
        drops = []
        for k in range(1, K):
            s_kk = matrix.final[k][k]
            drops.append(sum(s_kk - matrix.final[l][k] for l in range(k + 1, K + 1))
                         / (K - k))
        nbt = sum(drops) / (K - 1)
    else:
        nbt = 0.0
    auc = 0.0
    for k in range(1, K + 1):
        later = sum(matrix.final[l][k] for l in range(k + 1, K + 1))
        auc += (float(np.mean(matrix.diag_series[k])) + later) / (K - k + 1)
    auc /= K
    return {"fwt": float(fwt), "nbt": float(nbt), "auc": float(auc)}


# --------------------------------------------------------- replay buffers


class CRBuffer:
    """Archived router input-output pairs (contexts and raw coefficient
    blocks captured before sparsification), tagged by task."""

    def __init__(self, ratio):
        if not 0.0 < ratio <= 1.0:
            raise ContractViolation(f"replay ratio must be in (0, 1], got {ratio}")
        self.ratio = ratio
        self.contexts = []      # (d_r,) float32
        self.raws = []          # (6, k_at_archive_time) float32
        self.tags = []

    def __len__(self):
        return len(self.contexts)

    def archive_task(self, contexts, raws, tag):
        """Keep ceil(ratio * n) pairs at stratified indices floor(i*n/m)."""
        n = contexts.shape[0]
        if n == 0:
            raise ContractViolation(f"no pairs to archive for task {tag!r}")
        m = math.ceil(self.ratio * n)
        idx = [int(math.floor(i * n / m)) for i in range(m)]
        for i in idx:
            self.contexts.append(np.array(contexts[i], dtype=np.float32))
            self.raws.append(np.array(raws[i], dtype=np.float32))
            self.tags.append(tag)

    def nbytes(self):
        return sum(4 * (c.size + r.size) for c, r in zip(self.contexts, self.raws))


def cr_loss(router, contexts, stored, record=True):
    """Half mean squared error between current raw routing and stored values.

    Stored blocks are zero-extended to the router's current width: experts
    created after archiving get a target of 0 on archived contexts, so the
    router learns to keep later experts inactive for earlier tasks. Without
    that pressure their outputs sit at the neutral activation value (1.0)
    everywhere and top-k selection mixes them into old tasks, which undoes
    the freezing of old experts. Entries with different stored widths are
    grouped so each group evaluates as one batched pass; the result is the
    per-pair mean of per-element means, a plain MSE when widths agree.
    """
    if not contexts:
        raise ContractViolation("coefficient replay loss over an empty buffer")
    groups = {}
    for i, s in enumerate(stored):
        groups.setdefault(s.shape[1], []).append(i)
    total = None
    n = len(stored)
    for width, idxs in sorted(groups.items()):
        ctx = np.stack([contexts[i] for i in idxs])
        target = np.stack([stored[i] for i in idxs]).astype(np.float32)
        raw = router.forward_raw(constant(ctx))
        k_now = raw.data.shape[2]
        if width > k_now:
            raise ContractViolation(
                f"stored coefficient block wider ({width}) than router output "
                f"({k_now})")
        if width < k_now:
            pad = np.zeros(target.shape[:2] + (k_now - width,), dtype=np.float32)
            target = np.concatenate([target, pad], axis=2)
        term = ad.scale(ad.mean(ad.square(ad.sub(raw, constant(target)))), 0.5)
        term = ad.scale(term, len(idxs) / n)
        total = term if total is None else ad.add(total, term)
    return total


def cr_loss_value(router, buffer):
    """Buffer-wide loss as a plain float (no tape)."""
    with ad.paused():
        return float(cr_loss(router, buffer.contexts, buffer.raws).data)


class DemoReplayBuffer:
    """Stored task datasets for experience replay (the ER baseline)."""

    def __init__(self, fraction=0.2):
        self.fraction = fraction
        self.datasets = []

    def store(self, dataset):
        self.datasets.append(dataset)

    def nbytes(self, obs_dim, act_dim):
        return sum(d.steps * 4 * (obs_dim + act_dim) for d in self.datasets)


def er_sample_batch(buffer, batch, rng):
    """(replay_slots, picks) where picks are (dataset, row index) pairs drawn
    uniformly over stored tasks; empty buffer yields no replay slots."""
    if not buffer.datasets:
        return 0, []
    slots = round(buffer.fraction * batch)
    picks = []
    for _ in range(slots):
        d = buffer.datasets[int(rng.integers(len(buffer.datasets)))]
        picks.append((d, int(rng.integers(len(d)))))
    return slots, picks


# ------------------------------------------------------------ train helpers


def snapshot_params(params):
    return [p.data.copy() for p in params]


def restore_params(params, snap):
    for p, arr in zip(params, snap):
        p.data = arr.copy()


def coeff_tensor_to_dict(coeffs, batch, k):
    """Split a (batch, 6, k) coefficient tensor into per-submodule tensors."""
    out = {}
    for i, s in enumerate(SUBMODULES):
        out[s] = ad.reshape(ad.narrow(coeffs, 1, i, 1), (batch, k))
    return out


def bc_step_loss(policy, rows, coeff_dict, rng):
    vis, prop, ids, tw, act = rows
    gmm = policy.forward(vis, prop, ids, tw, coeffs=coeff_dict,
                         training=True, rng=rng)
    return bc_nll_loss(gmm, act)


class TrainRecord:
    """Per-task training trace: losses and checkpoint rates."""

    def __init__(self):
        self.losses = []
        self.checkpoint_rates = []
        self.best_index = None
        self.mean_coefficients = None


# ----------------------------------------------------------------- pretrain


def pretrain(policy, datasets, config, progress=None):
    """Behavior cloning of all base parameters over pooled task datasets.

    Returns the per-epoch mean loss list. NaN loss aborts.
    """
    policy.set_base_trainable(True)
    params = policy.base_params()
    opt = AdamW(params, lr=config.pretrain_lr, betas=config.betas,
                weight_decay=config.weight_decay, grad_clip=config.grad_clip)
    sizes = [len(d) for d in datasets]
    steps_per_epoch = sum(math.ceil(n / config.batch) for n in sizes)
    total_steps = config.pretrain_epochs * steps_per_epoch
    drop_rng = stream(config.seed, "pretrain", "dropout")
    losses = []
    step = 0
    for epoch in range(config.pretrain_epochs):
        order_rng = stream(config.seed, "pretrain", "order", epoch)
        plan = []
        for di, d in enumerate(datasets):
            plan.extend((di, idx) for idx in batch_indices(len(d), config.batch, order_rng))
        plan = [plan[i] for i in order_rng.permutation(len(plan))]
        epoch_loss = 0.0
        for di, idx in plan:
            rows = datasets[di].rows(idx)
            with ad.recording() as tape:
                loss = bc_step_loss(policy, rows, None, drop_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                raise ContractViolation(f"pretraining diverged: loss={value} at step {step}")
            gs = ad.backward(tape, loss, params=params)
            opt.step(gs, lr=cosine_lr(step, total_steps, config.pretrain_lr))
            epoch_loss += value
            step += 1
        losses.append(epoch_loss / len(plan))
        if progress:
            progress(f"pretrain epoch {epoch + 1}/{config.pretrain_epochs} "
                     f"loss {losses[-1]:.4f}")
    policy.set_base_trainable(False)
    return losses


# ------------------------------------------------------------- lifelong run


class RunResult:
    def __init__(self, method, matrix, metrics, coefficient_log, storage,
                 trainable_params, checksum_history, best_indices, records,
                 router=None, cr_buffer=None, consolidation_traces=()):
        self.method = method
        self.matrix = matrix
        self.metrics = metrics
        self.coefficient_log = coefficient_log
        self.storage = storage
        self.trainable_params = trainable_params
        self.checksum_history = checksum_history
        self.best_indices = best_indices
        self.records = records
        self.router = router
        self.cr_buffer = cr_buffer
        self.consolidation_traces = list(consolidation_traces)


def _archive_pairs(router, dataset, buffer, tag, batch=512):
    """Run the router over every window context and archive stratified pairs."""
    raws = []
    with ad.paused():
        for lo in range(0, len(dataset), batch):
            ctx = dataset.contexts[lo:lo + batch]
            raws.append(router.forward_raw(constant(ctx)).data)
    buffer.archive_task(dataset.contexts, np.concatenate(raws), tag)


def _consolidate_router(router, buffer, config, task_index):
    """Router-only replay phase; restores the starting weights if the final
    buffer-wide loss exceeds the initial one (descent guard)."""
    if config.consolidation_epochs <= 0 or len(buffer) == 0:
        return None
    params = router.params()
    start = snapshot_params(params)
    start_loss = cr_loss_value(router, buffer)
    opt = AdamW(params, lr=config.consolidation_lr, betas=config.betas,
                weight_decay=config.weight_decay, grad_clip=config.grad_clip)
    n = len(buffer)
    # An epoch is one pass over the buffer; the minibatch is sized so a pass
    # takes about a hundred optimizer steps even when the buffer is tiny,
    # otherwise small replay ratios starve the phase of updates.
    batch = max(1, math.ceil(n / 100))
    steps_per_epoch = math.ceil(n / batch)
    total = config.consolidation_epochs * steps_per_epoch
    rng = stream(config.seed, "consolidate", task_index)
    step = 0
    for _ in range(config.consolidation_epochs):
        for idx in batch_indices(n, batch, rng):
            with ad.recording() as tape:
                loss = cr_loss(router,
                               [buffer.contexts[i] for i in idx],
                               [buffer.raws[i] for i in idx])
            gs = ad.backward(tape, loss, params=params)
            opt.step(gs, lr=cosine_lr(step, total, config.consolidation_lr))
            step += 1
    end_loss = cr_loss_value(router, buffer)
    if end_loss > start_loss:
        restore_params(params, start)
        end_loss = start_loss
    return start_loss, end_loss


def run_lifelong(method, policy, tasks, demo_sets, config, world=None,
                 run_dir=None, progress=None):
    """Execute one full lifelong run and return its RunResult.

    `policy` arrives pretrained with an empty expert library; its base is
    frozen here. `demo_sets` maps task_id -> list of Trajectory.
    """
    if method not in METHODS:
        raise ContractViolation(f"unknown method {method!r}")
    world = world or World(grid=policy.config.grid)
    policy.set_base_trainable(False)
    library = policy.library
    if library.k != 0:
        raise ContractViolation("lifelong run requires an empty expert library")
    cfg = config
    K = len(tasks)
    checkpoint_epochs = list(range(cfg.eval_every, cfg.epochs_per_task + 1,
                                   cfg.eval_every))
    matrix = SuccessMatrix(K, checkpoint_epochs)
    router = Router(policy.config.d_context, hidden=cfg.router_hidden,
                    seed=int(stream(cfg.seed, "router").integers(2**31))) \
        if method == "dmpel" else None
    cr_buffer = CRBuffer(cfg.cr_ratio) if method == "dmpel" else None
    demo_buffer = DemoReplayBuffer() if method == "er" else None
    datasets = {}
    checksum_history = []
    best_indices = []
    records = {}
    coefficient_log = {}
    consolidation_traces = []

    def controller_for(evaluated_index):
        """Evaluation-time coefficient source; indices are 0-based."""
        if method == "dmpel":
            return RouterController(router, cfg.delta)
        if method == "tail_oracle":
            return FixedController(one_hot(evaluated_index, library.k))
        return FixedController(np.ones(library.k, dtype=np.float32))

    for k, task in enumerate(tasks):
        dataset = TaskDataset(task, demo_sets[task.task_id], policy.config)
        dataset.attach_contexts(policy)
        datasets[k] = dataset

        # grow trainables
        if method in ("dmpel", "tail_oracle") or (method in ("seqft_lora", "er") and k == 0):
            library.add_task_expert(cfg.seed, task_id=k if method in ("dmpel", "tail_oracle") else 0)
        if method == "dmpel":
            router.grow()
            trainables = library.expert_params(k) + router.params()
        elif method == "tail_oracle":
            trainables = library.expert_params(k)
        else:
            trainables = library.expert_params(0)

        opt = AdamW(trainables, lr=cfg.lr, betas=cfg.betas,
                    weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
        n = len(dataset)
        steps_per_epoch = math.ceil(n / cfg.batch)
        total_steps = cfg.epochs_per_task * steps_per_epoch
        order_rng = stream(cfg.seed, "train", method, k)
        drop_rng = stream(cfg.seed, "dropout", method, k)
        replay_rng = stream(cfg.seed, "replay", k)
        record = TrainRecord()
        snapshots = []
        checkpoint_coeffs = []
        seeds_k = eval_seeds(cfg.seed, task.task_id, cfg.eval_episodes)
        step = 0

        for epoch in range(1, cfg.epochs_per_task + 1):
            for idx in batch_indices(n, cfg.batch, order_rng):
                rows = dataset.rows(idx)
                ctx = dataset.contexts[idx]
                if method == "er" and demo_buffer.datasets:
                    slots, picks = er_sample_batch(demo_buffer, cfg.batch, replay_rng)
                    if slots:
                        keep = len(idx) - slots
                        if keep < 0:
                            keep = 0
                        parts = [dataset.rows(idx[:keep])] + \
                            [d.rows(np.array([i])) for d, i in picks]
                        rows = tuple(np.concatenate([p[j] for p in parts])
                                     for j in range(5))
                B = rows[0].shape[0]
                with ad.recording() as tape:
                    if method == "dmpel":
                        _, coeffs = router.forward_coefficients(
                            constant(ctx), cfg.delta, cfg.coefficient_dropout,
                            drop_rng, training=True)
                        coeff_dict = coeff_tensor_to_dict(coeffs, B, library.k)
                    elif method == "tail_oracle":
                        vec = np.tile(one_hot(k, library.k), (B, 1))
                        coeff_dict = {s: constant(vec) for s in SUBMODULES}
                    else:
                        vec = np.ones((B, library.k), dtype=np.float32)
                        coeff_dict = {s: constant(vec) for s in SUBMODULES}
                    loss = bc_step_loss(policy, rows, coeff_dict, drop_rng)
                    if method == "dmpel" and len(cr_buffer) > 0:
                        pick = replay_rng.integers(len(cr_buffer),
                                                   size=min(cfg.batch, len(cr_buffer)))
                        replay_term = cr_loss(router,
                                              [cr_buffer.contexts[i] for i in pick],
                                              [cr_buffer.raws[i] for i in pick])
                        loss = ad.add(loss, ad.scale(replay_term, cfg.lambda_cr))
                value = float(loss.data)
                if not np.isfinite(value):
                    raise ContractViolation(
                        f"training diverged on task {task.task_id}: loss={value}")
                gs = ad.backward(tape, loss, params=trainables)
                opt.step(gs, lr=cosine_lr(step, total_steps, cfg.lr))
                record.losses.append(value)
                step += 1
            if epoch in checkpoint_epochs:
                snapshots.append(snapshot_params(trainables))
                rate, mean_coeff = evaluate_task(
                    policy, world, task, controller_for(k), seeds_k,
                    cfg.synth_interval)
                record.checkpoint_rates.append(rate)
                checkpoint_coeffs.append(mean_coeff)
                if progress:
                    progress(f"{method} task {k + 1}/{K} epoch {epoch}: "
                             f"on-task success {rate:.2f}")

        best_idx, best, clamped = select_best_checkpoint(record.checkpoint_rates)
        restore_params(trainables, snapshots[best_idx])
        record.best_index = best_idx
        record.mean_coefficients = checkpoint_coeffs[best_idx]
        matrix.set_diagonal(k + 1, clamped, best)
        best_indices.append(best_idx)
        records[k + 1] = record
        if record.mean_coefficients is not None:
            coefficient_log[k + 1] = record.mean_coefficients

        if run_dir is not None:
            _write_task_checkpoint(run_dir, method, k + 1, trainables, library,
                                   best_idx, checkpoint_epochs)

        # finalize
        if method == "dmpel":
            library.freeze_task(k)
            _archive_pairs(router, dataset, cr_buffer, task.task_id)
            trace = _consolidate_router(router, cr_buffer, cfg, k)
            if trace:
                consolidation_traces.append(trace)
        elif method == "tail_oracle":
            library.freeze_task(k)
        elif method == "er":
            demo_buffer.store(dataset)
        checksum_history.append(library.frozen_checksums())

        # off-diagonal evaluations
        for j in range(k):
            seeds_j = eval_seeds(cfg.seed, tasks[j].task_id, cfg.eval_episodes)
            rate, _ = evaluate_task(policy, world, tasks[j], controller_for(j),
                                    seeds_j, cfg.synth_interval)
            matrix.set_entry(k + 1, j + 1, rate)

    metrics = compute_metrics(matrix)
    obs_dim = policy.config.obs_dim
    act_dim = policy.config.action_dim
    demo_equiv = sum(d.steps for d in datasets.values()) * 4 * (obs_dim + act_dim)
    cr_bytes = cr_buffer.nbytes() if cr_buffer else 0
    trainable_params = sum(p.data.size for p in _all_trained_params(method, library, router))
    storage = {
        "cr_bytes": int(cr_bytes),
        "demo_bytes": int(demo_equiv),
        "cr_to_demo_ratio": float(cr_bytes / demo_equiv) if demo_equiv else 0.0,
        "trainable_params": int(trainable_params),
    }
    return RunResult(method, matrix, metrics, coefficient_log, storage,
                     trainable_params, checksum_history, best_indices, records,
                     router=router, cr_buffer=cr_buffer,
                     consolidation_traces=consolidation_traces)


def _all_trained_params(method, library, router):
    task_ids = sorted({e.task_id for layer in library.layers.values()
                       for e in layer.experts})
    params = []
    for t in task_ids:
        params.extend(library.expert_params(t))
    if router is not None:
        params.extend(router.params())
    return params


def _write_task_checkpoint(run_dir, method, task_number, trainables, library,
                           best_idx, checkpoint_epochs):
    os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
    tensors = {p.name or f"param{i}": p.data for i, p in enumerate(trainables)}
    meta = {
        "method": method,
        "task": task_number,
        "k": library.k,
        "best_checkpoint_epoch": checkpoint_epochs[best_idx],
        "frozen": sorted(library.frozen_checksums()),
    }
    save_checkpoint(os.path.join(run_dir, "checkpoints",
                                 f"task{task_number:02d}.ckpt"), tensors, meta)

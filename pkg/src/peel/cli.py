"""Command-line entry point.

Subcommands
    gen-suite   generate a task suite plus scripted demonstrations
    pretrain    behavior-clone the base policy on a suite
    lifelong    run one lifelong method over a suite into a run directory
    report      aggregate run directories into a summary CSV
    verify      run the numerical and invariant checks; nonzero exit on failure

Usage errors exit 2 (argparse); contract violations exit 1 with a message.
The environment variable PEEL_THREADS caps parallel evaluation workers.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import time

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation
from .config import RunConfig, load_config, parse_config
from .experts import SUBMODULES
from .harness import (BaseController, TaskDataset, evaluate_suite, pretrain,
                      run_lifelong)
from .io import load_checkpoint, load_demos, save_checkpoint, save_demos
from .policy import Policy
from .rng import stream
from .world import (World, collect_demonstrations, generate_suite, load_suite,
                    pretrain_suite, save_suite)

METRIC_COLUMNS = ["method", "seed", "suite", "fwt", "nbt", "auc",
                  "trainable_params", "cr_bytes", "demo_bytes"]


def _fresh_dir(path):
    if os.path.exists(path):
        raise ContractViolation(
            f"output directory {path!r} already exists; run directories are "
            "immutable, pick a new path")
    os.makedirs(path)


def _task_path(demo_dir, task_id):
    return os.path.join(demo_dir, f"{task_id}.demo")


def _load_suite_dir(suite_dir):
    tasks = load_suite(os.path.join(suite_dir, "suite.json"))
    demos = {}
    demo_dir = os.path.join(suite_dir, "demos")
    for t in tasks:
        demos[t.task_id] = load_demos(_task_path(demo_dir, t.task_id))
    return tasks, demos


# ------------------------------------------------------------- subcommands


def cmd_gen_suite(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    num_tasks = args.num_tasks if args.num_tasks is not None else (30 if args.pretrain else 5)
    if args.pretrain:
        tasks = pretrain_suite(args.seed, num_tasks)
    else:
        tasks = generate_suite(args.seed, args.family, num_tasks, parity=1)
    _fresh_dir(args.out)
    save_suite(os.path.join(args.out, "suite.json"), tasks)
    demo_dir = os.path.join(args.out, "demos")
    os.makedirs(demo_dir)
    world = World(grid=cfg.policy.grid)
    for t in tasks:
        demos = collect_demonstrations(world, t, args.demos, args.seed)
        save_demos(_task_path(demo_dir, t.task_id), demos)
        print(f"{t.task_id}: {len(demos)} demonstrations "
              f"({sum(d.steps for d in demos)} steps)")
    print(f"suite written to {args.out}")
    return 0


def cmd_pretrain(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    tasks, demos = _load_suite_dir(args.suite_dir)
    policy = Policy(cfg.policy, rank=cfg.rank, bias_experts=cfg.tune_bias,
                    seed=cfg.seed)
    datasets = [TaskDataset(t, demos[t.task_id], cfg.policy) for t in tasks]
    t0 = time.time()
    losses = pretrain(policy, datasets, cfg, progress=print)
    print(f"pretraining finished in {time.time() - t0:.0f}s "
          f"(final loss {losses[-1]:.4f})")
    tensors = {p.name: p.data for p in policy.base_params()}
    meta = {"kind": "base", "seed": cfg.seed, "pretrain_epochs": cfg.pretrain_epochs,
            "suite": os.path.basename(os.path.normpath(args.suite_dir))}
    save_checkpoint(args.out, tensors, meta)
    print(f"base checkpoint written to {args.out}")
    if args.eval_episodes > 0:
        world = World(grid=cfg.policy.grid)
        rates = evaluate_suite(policy, world, tasks, BaseController(), cfg.seed,
                               args.eval_episodes)
        mean = float(np.mean(list(rates.values())))
        for tid, r in rates.items():
            print(f"  {tid}: {r:.2f}")
        print(f"pretrain suite mean success: {mean:.3f}")
    return 0


def load_base_into(policy, path):
    tensors, meta = load_checkpoint(path)
    named = {p.name: p for p in policy.base_params()}
    missing = sorted(set(named) - set(tensors))
    if missing:
        raise ContractViolation(f"base checkpoint lacks tensors: {missing[:5]}")
    for name, p in named.items():
        if tensors[name].shape != p.data.shape:
            raise ContractViolation(
                f"base tensor {name} has shape {tensors[name].shape}, "
                f"policy expects {p.data.shape}")
        p.data = tensors[name].astype(p.data.dtype)
    return meta


def cmd_lifelong(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.method:
        cfg.method = args.method
        cfg.validate()
    tasks, demos = _load_suite_dir(args.suite_dir)
    policy = Policy(cfg.policy, rank=cfg.rank, bias_experts=cfg.tune_bias,
                    seed=cfg.seed)
    if args.base:
        load_base_into(policy, args.base)
    _fresh_dir(args.out)
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=1)
    shutil.copy(os.path.join(args.suite_dir, "suite.json"),
                os.path.join(args.out, "suite.json"))
    shutil.copytree(os.path.join(args.suite_dir, "demos"),
                    os.path.join(args.out, "demos"))
    world = World(grid=cfg.policy.grid)
    suite_name = os.path.basename(os.path.normpath(args.suite_dir))
    result = run_lifelong(cfg.method, policy, tasks, demos, cfg, world=world,
                          run_dir=args.out, progress=print)
    write_run_artifacts(args.out, result, cfg, suite_name)
    m = result.metrics
    print(f"{cfg.method}: FWT={m['fwt']:.3f} NBT={m['nbt']:.3f} AUC={m['auc']:.3f}")
    print(f"run directory: {args.out}")
    return 0


def write_run_artifacts(run_dir, result, cfg, suite_name):
    """metrics.csv, success_matrix.json, coefficients.csv, storage.json."""
    with open(os.path.join(run_dir, "success_matrix.json"), "w") as f:
        json.dump(result.matrix.to_json(), f, indent=1)
    with open(os.path.join(run_dir, "storage.json"), "w") as f:
        json.dump(result.storage, f, indent=1)
    m = result.metrics
    with open(os.path.join(run_dir, "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        w.writerow([result.method, cfg.seed, suite_name,
                    f"{m['fwt']:.6f}", f"{m['nbt']:.6f}", f"{m['auc']:.6f}",
                    result.storage["trainable_params"],
                    result.storage["cr_bytes"], result.storage["demo_bytes"]])
    K = result.matrix.num_tasks
    with open(os.path.join(run_dir, "coefficients.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task_k", "submodule", "expert_j", "mean_coefficient"])
        if result.method == "dmpel":
            for k in range(1, K + 1):
                block = result.coefficient_log.get(k)
                for si, sub in enumerate(SUBMODULES):
                    for j in range(1, K + 1):
                        value = 0.0
                        if block is not None and j <= block.shape[1]:
                            value = float(block[si, j - 1])
                        w.writerow([k, sub, j, f"{value:.6f}"])


def cmd_report(args):
    rows = []
    for run_dir in args.runs:
        path = os.path.join(run_dir, "metrics.csv")
        if not os.path.exists(path):
            raise ContractViolation(f"no metrics.csv in {run_dir!r}; "
                                    "was the run interrupted?")
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != METRIC_COLUMNS:
                raise ContractViolation(
                    f"unexpected metrics columns in {path}: {reader.fieldnames}")
            rows.extend(reader)
    if not rows:
        raise ContractViolation("no metric rows found")
    out = csv.writer(args.out_file)
    out.writerow(METRIC_COLUMNS)
    for r in rows:
        out.writerow([r[c] for c in METRIC_COLUMNS])
    out.writerow([])
    out.writerow(["method", "runs", "fwt_mean", "fwt_std", "nbt_mean", "nbt_std",
                  "auc_mean", "auc_std"])
    by_method = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(r)
    for method in sorted(by_method):
        grp = by_method[method]
        stats = []
        for col in ("fwt", "nbt", "auc"):
            vals = np.array([float(r[col]) for r in grp])
            stats.extend([f"{vals.mean():.6f}", f"{vals.std():.6f}"])
        out.writerow([method, len(grp)] + stats)
    return 0


# ----------------------------------------------------------------- verify


def _verify_grad_checks(report):
    """Central-difference checks of every differentiable building block in
    float64; the worst relative error must stay under 1e-4."""
    from .optim import adamw_update

    rng = np.random.default_rng(7)
    worst = 0.0

    def check(name, func, *arrays):
        nonlocal worst
        point = [ad.param(a, name=f"p{i}", dtype=np.float64)
                 for i, a in enumerate(arrays)]
        err = ad.grad_check(lambda ts: func(*ts), point)
        worst = max(worst, err)
        report(f"  grad {name}: max rel err {err:.2e}")

    check("mlp-gelu", lambda x, w: ad.mean(ad.gelu(ad.matmul(x, w))),
          rng.standard_normal((3, 5)), rng.standard_normal((5, 4)))
    check("layer-norm", lambda x, g, b: ad.mean(ad.layer_norm(x, g, b)),
          rng.standard_normal((4, 6)), rng.standard_normal(6),
          rng.standard_normal(6))
    check("softmax-lse",
          lambda x: ad.mean(ad.sub(ad.logsumexp(x, axis=-1),
                                   ad.tensor_sum(ad.softmax(x, axis=-1), axis=-1))),
          rng.standard_normal((3, 7)))

    def attention_loss(x):
        q = ad.reshape(ad.narrow(x, 3, 0, 4), (2, 2, 3, 4))
        k = ad.reshape(ad.narrow(x, 3, 4, 4), (2, 2, 3, 4))
        v = ad.reshape(ad.narrow(x, 3, 8, 4), (2, 2, 3, 4))
        return ad.mean(ad.causal_attention(q, k, v))
    check("causal-attention", attention_loss, rng.standard_normal((2, 2, 3, 12)))

    def gmm_loss(x):
        logits = ad.narrow(x, 1, 0, 3)
        means = ad.narrow(x, 1, 3, 3)
        stds = ad.shift(ad.softplus(ad.narrow(x, 1, 6, 3)), 1e-4)
        z = ad.div(ad.sub(ad.constant(np.zeros((4, 3))), means), stds)
        quad = ad.scale(ad.square(z), -0.5)
        logw = ad.sub(logits, ad.logsumexp(logits, axis=-1, keepdims=True))
        return ad.neg(ad.mean(ad.logsumexp(ad.add(logw, quad), axis=-1)))
    check("gmm-nll", gmm_loss, rng.standard_normal((4, 9)))

    if worst >= 1e-4:
        raise ContractViolation(f"gradient check failed: {worst:.3e} >= 1e-4")
    th = adamw_update(np.float64(1.0), np.float64(1.0), np.zeros(1), np.zeros(1),
                      1, 0.1, 0.9, 0.999, 1e-8, 0.1)
    if abs(float(th[0]) - 0.89) > 1e-6:
        raise ContractViolation(f"optimizer hand example mismatch: {th}")
    report(f"  optimizer single-step hand value ok ({float(th[0]):.8f})")
    return worst


def _verify_identity_and_orthogonality(report):
    from .experts import AdaptedLinear

    rng = np.random.default_rng(3)
    layer = AdaptedLinear("probe", "head", 48, 24, rank=4,
                          rng=np.random.default_rng(0))
    for t in range(10):
        layer.add_expert(stream(11, "expert", t, "probe"), task_id=t)
    A = np.concatenate([e.A.data.astype(np.float64) for e in layer.experts], axis=1)
    gram = A.T @ A - np.eye(A.shape[1])
    ortho = float(np.abs(gram).max())
    report(f"  orthogonality over 10 experts: max |<a_i,a_j> - delta| {ortho:.2e}")
    if ortho > 1e-6:
        raise ContractViolation(f"orthogonality {ortho:.3e} > 1e-6")
    zeros = np.zeros(layer.k, dtype=np.float32)
    for i in range(100):
        x = rng.standard_normal((2, 48)).astype(np.float32)
        base = x @ layer.w0.data + layer.b0.data
        mixed = layer.forward_single(x, zeros, "materialized")
        if not np.array_equal(base, mixed):
            raise ContractViolation(f"zero-coefficient identity broke on input {i}")
    report("  zero-coefficient identity bitwise over 100 inputs ok")


def _verify_sparsity_and_metrics(report):
    from .harness import SuccessMatrix, compute_metrics
    from .router import sparsify_topk

    rng = np.random.default_rng(5)
    raw = rng.uniform(0, 2, size=(8, 6, 9)).astype(np.float32)
    sp = sparsify_topk(raw, 3)
    nz = (sp != 0).sum(axis=-1)
    if nz.max() > 3 or sp.min() < 0 or sp.max() > 2:
        raise ContractViolation("sparsification bounds violated")
    report(f"  top-3 sparsity ok (max nonzeros {int(nz.max())}, "
           f"range [{sp.min():.3f}, {sp.max():.3f}])")
    m = SuccessMatrix(2, [2, 4])
    m.set_diagonal(1, [0.5, 0.7], 0.7)
    m.set_diagonal(2, [0.4, 0.8], 0.8)
    m.set_entry(2, 1, 0.6)
    got = compute_metrics(m)
    want = {"fwt": 0.6, "nbt": 0.1, "auc": 0.6}
    for key, val in want.items():
        if abs(got[key] - val) > 1e-12:
            raise ContractViolation(f"metric oracle mismatch on {key}: {got[key]}")
    report("  metric oracle (two-task hand matrix) exact ok")


def _verify_tail_micro_run(report):
    cfg = parse_config({
        "seed": 5, "method": "tail_oracle", "epochs_per_task": 2,
        "eval_every": 2, "eval_episodes": 4, "demos_per_task": 4,
        "consolidation_epochs": 0,
    })
    world = World(grid=cfg.policy.grid)
    tasks = generate_suite(5, "goal", 2, parity=1)
    demos = {t.task_id: collect_demonstrations(world, t, cfg.demos_per_task, cfg.seed)
             for t in tasks}
    policy = Policy(cfg.policy, rank=cfg.rank, seed=cfg.seed)
    result = run_lifelong("tail_oracle", policy, tasks, demos, cfg, world=world)
    nbt = result.metrics["nbt"]
    report(f"  oracle-routing micro-run (2 tasks x 2 epochs): NBT {nbt}")
    if nbt != 0.0:
        raise ContractViolation(f"oracle routing must have NBT exactly 0, got {nbt}")
    first, second = result.checksum_history[0], result.checksum_history[1]
    for name, digest in first.items():
        if second.get(name) != digest:
            raise ContractViolation(f"frozen expert {name} changed after freezing")
    report("  frozen-expert checksums constant ok")


def cmd_verify(args):
    t0 = time.time()
    checks = [
        ("gradient checks (float64, central differences)", _verify_grad_checks),
        ("expert identity and orthogonality", _verify_identity_and_orthogonality),
        ("sparsification and metric oracle", _verify_sparsity_and_metrics),
        ("oracle-routing micro-run", _verify_tail_micro_run),
    ]
    failures = 0
    for name, fn in checks:
        try:
            fn(print)
            print(f"PASS {name}")
        except Exception as e:  # noqa: BLE001 - verify reports all failures
            failures += 1
            print(f"FAIL {name}: {e}")
    print(f"verify finished in {time.time() - t0:.1f}s: "
          f"{len(checks) - failures}/{len(checks)} passed")
    return 1 if failures else 0


# ------------------------------------------------------------------ parser


def build_parser():
    p = argparse.ArgumentParser(prog="peel",
                                description="Lifelong expert-library experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-suite", help="generate tasks and demonstrations")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--family", choices=["goal", "spatial", "object", "long"],
                   default="object")
    g.add_argument("--num-tasks", type=int, default=None,
                   help="task count (default 5, or 30 with --pretrain)")
    g.add_argument("--demos", type=int, default=20)
    g.add_argument("--pretrain", action="store_true",
                   help="mixed-family pretraining suite on the complementary "
                        "goal lattice")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_suite)

    t = sub.add_parser("pretrain", help="behavior-clone the base policy")
    t.add_argument("--config", default=None)
    t.add_argument("--suite-dir", required=True)
    t.add_argument("--out", required=True, help="base checkpoint path")
    t.add_argument("--eval-episodes", type=int, default=0,
                   help="episodes per task for a post-training report (0: skip)")
    t.set_defaults(func=cmd_pretrain)

    l = sub.add_parser("lifelong", help="run one lifelong method")
    l.add_argument("--config", default=None)
    l.add_argument("--method", choices=["dmpel", "seqft_lora", "er", "tail_oracle"],
                   default=None)
    l.add_argument("--suite-dir", required=True)
    l.add_argument("--base", default=None, help="pretrained base checkpoint")
    l.add_argument("--out", required=True, help="run directory (must not exist)")
    l.set_defaults(func=cmd_lifelong)

    r = sub.add_parser("report", help="aggregate run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", default=None, help="summary CSV path (default stdout)")
    r.set_defaults(func=cmd_report)

    v = sub.add_parser("verify", help="numerical and invariant checks")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report":
        args.out_file = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        return args.func(args)
    except ContractViolation as e:
        print(f"contract violation: {e}", file=sys.stderr)
        return 1
    finally:
        if args.command == "report" and args.out:
            args.out_file.close()


if __name__ == "__main__":
    sys.exit(main())

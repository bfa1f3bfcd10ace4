#!/usr/bin/env python3
"""Compute/recompute trade-off for coefficient synthesis during rollout.

During rollout the router's coefficients can be recomputed every step
(adaptive but costly) or cached for synth_interval steps. This script trains
a short lifelong run in-process, then sweeps the interval and reports the
measured synthesis events per episode alongside the analytic FLOPs-per-step
estimate:

    flops/step = forward + synth_events/steps * synthesis

Example:
    python scripts/synthesis_tradeoff.py --base runs/<ts>/base.ckpt
"""

import argparse
import math
import sys
import tempfile

import numpy as np

from peel.cli import load_base_into
from peel.config import RunConfig
from peel.harness import RouterController, run_lifelong
from peel.policy import Policy, rollout_episode
from peel.world import World, collect_demonstrations, generate_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--base", required=True, help="pretrained base checkpoint")
    ap.add_argument("--suite-seed", type=int, default=11)
    ap.add_argument("--family", default="object",
                    choices=["goal", "spatial", "object", "long"])
    ap.add_argument("--tasks", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--intervals", type=int, nargs="+", default=[1, 2, 5, 10, 20])
    ap.add_argument("--episodes", type=int, default=10,
                    help="rollouts per task per interval")
    args = ap.parse_args()

    cfg = RunConfig()
    cfg.epochs_per_task = args.epochs
    cfg.validate()
    policy = Policy(config=cfg.policy, seed=cfg.seed)
    load_base_into(policy, args.base)
    world = World(grid=cfg.policy.grid)
    suite = generate_suite(args.suite_seed, args.family, args.tasks, parity=1)
    demos = {t.task_id: collect_demonstrations(world, t, cfg.demos_per_task,
                                               args.suite_seed)
             for t in suite}

    print(f"training {args.tasks} tasks x {args.epochs} epochs ...", flush=True)
    with tempfile.TemporaryDirectory() as tmp:
        result = run_lifelong("dmpel", policy, suite, demos, cfg, world=world,
                              run_dir=tmp)
    controller = RouterController(result.router, cfg.delta)
    delta = min(cfg.delta, policy.library.num_experts)
    synth, fwd = policy.library.total_flops(delta)
    print(f"library: {policy.library.num_experts} experts, "
          f"synthesis {synth:.3e} flops, forward {fwd:.3e} flops/step\n")

    print(f"{'interval':>8}  {'events/ep':>9}  {'steps/ep':>8}  "
          f"{'flops/step':>12}  {'success':>7}")
    for interval in args.intervals:
        events = steps = succ = n = 0
        for task in suite:
            for ep in range(args.episodes):
                rng = np.random.default_rng([17, interval, task.task_id, ep])
                result = rollout_episode(policy, world, task, controller, rng,
                                         synth_interval=interval)
                assert result.synth_events == math.ceil(result.steps / interval)
                events += result.synth_events
                steps += result.steps
                succ += result.success
                n += 1
        per_step = fwd + synth * (events / steps)
        print(f"{interval:>8}  {events / n:>9.1f}  {steps / n:>8.1f}  "
              f"{per_step:>12.3e}  {succ / n:>7.2f}")


if __name__ == "__main__":
    sys.exit(main())

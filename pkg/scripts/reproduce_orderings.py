#!/usr/bin/env python3
"""Full experiment grid: pretrain once, then run the lifelong comparison.

Produces, under --workdir (default runs/<timestamp>):
    pretrain-suite/   30 mixed-family tasks + demonstrations
    base.ckpt         behavior-cloned base policy
    suite/            the 5-task lifelong suite
    <method>-s<seed>/ one run directory per method and seed
    summary.csv       aggregated metric table with per-method means

Methods covered: the expert-library method at replay ratios 1.0 and 0.05,
sequential low-rank finetuning, and the task-labeled oracle. Everything goes
through the command-line interface, so this script doubles as an end-to-end
exercise of the published entry points.
"""

import argparse
import json
import os
import subprocess
import sys
import time


def sh(*args):
    print("+", " ".join(args), flush=True)
    subprocess.run(args, check=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--workdir", default=None)
    ap.add_argument("--suite-seed", type=int, default=11)
    ap.add_argument("--family", default="object",
                    choices=["goal", "spatial", "object", "long"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--skip-pretrain", default=None, metavar="CKPT",
                    help="reuse an existing base checkpoint")
    args = ap.parse_args()

    workdir = args.workdir or os.path.join("runs", time.strftime("%Y%m%d-%H%M%S"))
    os.makedirs(workdir, exist_ok=True)
    t0 = time.time()

    base = args.skip_pretrain
    if base is None:
        pre_dir = os.path.join(workdir, "pretrain-suite")
        base = os.path.join(workdir, "base.ckpt")
        sh("peel", "gen-suite", "--pretrain", "--seed", "0", "--out", pre_dir)
        sh("peel", "pretrain", "--suite-dir", pre_dir, "--out", base,
           "--eval-episodes", "20")

    suite_dir = os.path.join(workdir, "suite")
    sh("peel", "gen-suite", "--seed", str(args.suite_seed),
       "--family", args.family, "--out", suite_dir)

    grid = [("dmpel", 1.0), ("dmpel", 0.05), ("seqft_lora", None)]
    run_dirs = []
    for seed in args.seeds:
        for method, ratio in grid:
            tag = f"{method}" + (f"-r{ratio}" if ratio is not None else "")
            run_dir = os.path.join(workdir, f"{tag}-s{seed}")
            cfg = {"seed": seed, "method": method}
            if ratio is not None:
                cfg["cr_ratio"] = ratio
            cfg_path = os.path.join(workdir, f"config-{tag}-s{seed}.json")
            with open(cfg_path, "w") as f:
                json.dump(cfg, f)
            sh("peel", "lifelong", "--config", cfg_path, "--suite-dir", suite_dir,
               "--base", base, "--out", run_dir)
            run_dirs.append(run_dir)

    oracle_dir = os.path.join(workdir, "tail_oracle-s0")
    cfg_path = os.path.join(workdir, "config-tail.json")
    with open(cfg_path, "w") as f:
        json.dump({"seed": args.seeds[0], "method": "tail_oracle"}, f)
    sh("peel", "lifelong", "--config", cfg_path, "--suite-dir", suite_dir,
       "--base", base, "--out", oracle_dir)
    run_dirs.append(oracle_dir)

    summary = os.path.join(workdir, "summary.csv")
    sh("peel", "report", *run_dirs, "--out", summary)
    print(open(summary).read())
    print(f"total {time.time() - t0:.0f}s; artifacts in {workdir}")


if __name__ == "__main__":
    sys.exit(main())

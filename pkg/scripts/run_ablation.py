#!/usr/bin/env python3
"""Run the loss-ablation study on the synthetic blob corpus.

Generates the train/test corpora if missing, trains the requested
variants over the requested seeds (two worker processes), and prints a
per-variant mean test Dice table.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from smoothsep import config as cfgmod
from smoothsep import perf, synthdata


def ensure_corpus(root: Path, classes: int = 2) -> tuple:
    train_dir = root / "train"
    test_dir = root / "test"
    if not (train_dir / "manifest.txt").exists():
        synthdata.save_corpus(
            train_dir, synthdata.blob_dataset(80, 64, 64, classes, 1.5, 0.4,
                                              seed=11))
    if not (test_dir / "manifest.txt").exists():
        synthdata.save_corpus(
            test_dir, synthdata.blob_dataset(20, 96, 96, classes, 1.5, 0.4,
                                             seed=12))
    return train_dir, test_dir


def ablation_config(train_dir, test_dir, seed: int, total_iters: int,
                    epsilon: float, lam_lds: float, lam_cs: float,
                    proto_t: float, width: int, lr0: float = 0.01):
    cfg = cfgmod.default_config()
    cfg.total_iters = total_iters
    cfg.lr0 = lr0
    cfg.decay_every = max(1, total_iters // 6)
    cfg.eval_every = 0
    cfg.seed = seed
    cfg.adv.epsilon = epsilon
    cfg.ramp.lambda_max_lds = lam_lds
    cfg.ramp.lambda_max_cs = lam_cs
    cfg.ramp.t_ramp = int(0.4 * total_iters)
    cfg.proto.t = proto_t
    cfg.net.channels = (width, 2 * width)
    cfg.data.train_dir = str(train_dir)
    cfg.data.test_dir = str(test_dir)
    cfg.data.labeled_fraction = 0.05
    return cfg


def run_one(job) -> dict:
    variant, cfg_text, out_dir = job
    perf.tune_process()
    from smoothsep import trainer
    cfg = cfgmod.parse_config(cfg_text)
    t0 = time.perf_counter()
    _, _, report = trainer.run_experiment(cfg, variant, out_dir=out_dir)
    return {"variant": variant, "seed": cfg.seed,
            "dice": report.mean_dice(),
            "wall_s": time.perf_counter() - t0}


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--variants", nargs="+",
                    default=["seg_only", "seg_lds", "seg_cs", "full"])
    ap.add_argument("--seeds", nargs="+", type=int, default=[1, 2, 3])
    ap.add_argument("--iters", type=int, default=3000)
    ap.add_argument("--epsilon", type=float, default=2.0)
    ap.add_argument("--lam-lds", type=float, default=1.0)
    ap.add_argument("--lam-cs", type=float, default=1.0)
    ap.add_argument("--proto-t", type=float, default=0.9)
    ap.add_argument("--width", type=int, default=8)
    ap.add_argument("--lr0", type=float, default=0.01)
    ap.add_argument("--workers", type=int, default=2)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_dir, test_dir = ensure_corpus(out / "data")

    jobs = []
    for seed in args.seeds:
        for variant in args.variants:
            cfg = ablation_config(train_dir, test_dir, seed, args.iters,
                                  args.epsilon, args.lam_lds, args.lam_cs,
                                  args.proto_t, args.width, args.lr0)
            jobs.append((variant, cfgmod.dump_config(cfg),
                         str(out / f"{variant}_s{seed}")))

    os.environ.update(perf.worker_env())
    t0 = time.perf_counter()
    with ProcessPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(run_one, jobs))
    wall = time.perf_counter() - t0

    by_variant = {}
    for r in results:
        by_variant.setdefault(r["variant"], []).append(r["dice"])
    summary = {v: {"mean_dice": sum(d) / len(d), "per_seed": d}
               for v, d in by_variant.items()}
    summary["wall_s"] = wall
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    for v, s in sorted(summary.items()):
        if v == "wall_s":
            continue
        print(f"{v:12s} mean dice {s['mean_dice']*100:6.2f}  "
              f"per-seed {[f'{d*100:.2f}' for d in s['per_seed']]}")
    print(f"total wall: {wall/60:.1f} min")
    return 0


if __name__ == "__main__":
    sys.exit(main())

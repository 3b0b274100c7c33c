"""Command-line surface: data generation, training, evaluation and
embedding export.

Exit codes: 0 success, 2 usage or config error, 3 I/O failure,
4 numeric abort during training, 5 checkpoint shape incompatibility.
Errors print a single ``error: <category>: <detail>`` line to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfgmod
from . import metrics, nets, synthdata, trainer
from .containers import ContainerError, load_checkpoint, load_checkpoint_config


def _fail(code: int, category: str, detail: str) -> int:
    print(f"error: {category}: {detail}", file=sys.stderr)
    return code


def _load_bundle(checkpoint_dir):
    """Rebuild a model from a checkpoint directory (config + containers)."""
    text = load_checkpoint_config(checkpoint_dir)
    if not text:
        raise ContainerError(f"{checkpoint_dir}: missing config.cfg")
    cfg = cfgmod.parse_config(text)
    bundle = nets.build_model(cfg.net, cfg.seed)
    stored = load_checkpoint(checkpoint_dir)
    if set(stored) != set(bundle.params):
        raise nets.ad.ShapeMismatch(
            "checkpoint parameter names do not match the configured network")
    for name, arr in stored.items():
        if bundle.params[name].shape != arr.shape:
            raise nets.ad.ShapeMismatch(
                f"{name}: checkpoint shape {arr.shape} != model "
                f"{bundle.params[name].shape}")
        bundle.params[name].data = arr.astype(np.float32)
    return bundle, cfg


def _is_moons_dir(data_dir) -> bool:
    return (Path(data_dir) / "moons.ssnt").exists()


def cmd_gen_data(args) -> int:
    try:
        out = Path(args.out)
        if args.kind == "two-moons":
            moons = synthdata.two_moons(args.n, args.gamma, args.seed)
            synthdata.save_moons(out, moons)
            print(f"wrote {args.n} points ({moons.labels.tolist().count(0)} "
                  f"class 0, {moons.labels.tolist().count(1)} class 1) "
                  f"to {out}")
        else:
            samples = synthdata.blob_dataset(
                args.n, h=args.size, w=args.size, classes=args.classes,
                blur_sigma=args.blur, contrast=args.contrast, seed=args.seed)
            synthdata.save_corpus(out, samples)
            print(f"wrote {len(samples)} image/mask pairs "
                  f"({args.size}x{args.size}, {args.classes} classes) to {out}")
        return 0
    except (ValueError,) as exc:
        return _fail(2, "usage", str(exc))
    except OSError as exc:
        return _fail(3, "io", str(exc))


def cmd_train(args) -> int:
    try:
        cfg = cfgmod.load_config(args.config) if args.config \
            else cfgmod.default_config()
    except cfgmod.ConfigError as exc:
        return _fail(2, "config", str(exc))
    except OSError as exc:
        return _fail(3, "io", str(exc))
    if args.dump_config:
        print(cfgmod.dump_config(cfg), end="")
        return 0
    if args.out is None:
        return _fail(2, "usage", "--out is required to train")
    try:
        if cfg.net.kind == "mlp":
            points, labels = synthdata.load_moons(cfg.data.train_dir)
            n_lab = int(round(cfg.data.labeled_fraction * len(labels)))
            trainer.run_toy_experiment(cfg, args.variant, points, labels,
                                       n_lab, out_dir=args.out)
        else:
            trainer.run_experiment(cfg, args.variant, out_dir=args.out)
        return 0
    except trainer.TrainAbort as exc:
        return _fail(4, "numeric", str(exc))
    except ad.NonFiniteValue as exc:
        return _fail(4, "numeric", str(exc))
    except (OSError, ContainerError) as exc:
        return _fail(3, "io", str(exc))
    except ValueError as exc:
        return _fail(2, "usage", str(exc))


def cmd_eval(args) -> int:
    try:
        bundle, cfg = _load_bundle(args.checkpoint)
    except ad.ShapeMismatch as exc:
        return _fail(5, "shape", str(exc))
    except (OSError, ContainerError) as exc:
        return _fail(3, "io", str(exc))
    try:
        samples = synthdata.load_corpus(args.data)
        report = trainer.evaluate_corpus(
            bundle, samples, (cfg.infer.patch, cfg.infer.patch),
            (cfg.infer.stride, cfg.infer.stride), lcc=args.lcc)
        metrics.write_report_csv(report, args.out)
        agg = report.aggregate()
        print(f"evaluated {len(samples)} samples: "
              f"mean dice {agg['dice']:.4f}, jaccard {agg['jaccard']:.4f}")
        return 0
    except ad.ShapeMismatch as exc:
        return _fail(5, "shape", str(exc))
    except (OSError, ContainerError) as exc:
        return _fail(3, "io", str(exc))


def cmd_embed(args) -> int:
    try:
        bundle, cfg = _load_bundle(args.checkpoint)
    except ad.ShapeMismatch as exc:
        return _fail(5, "shape", str(exc))
    except (OSError, ContainerError) as exc:
        return _fail(3, "io", str(exc))
    try:
        if _is_moons_dir(args.data):
            points, true_labels = synthdata.load_moons(args.data)
            n_lab = int(round(cfg.data.labeled_fraction * len(true_labels)))
            lab_idx = trainer.stratified_labeled_indices(
                true_labels, n_lab, cfg.seed)
            labels = np.full(len(true_labels), -1, dtype=np.int64)
            labels[lab_idx] = true_labels[lab_idx]
            inputs = points
        else:
            samples = synthdata.load_corpus(args.data)
            split = synthdata.split_semi(
                len(samples), cfg.data.labeled_fraction, cfg.seed)
            inputs = np.stack([s.image for s in samples])
            labels = np.stack(
                [s.mask.astype(np.int64) if i in set(split.labeled.tolist())
                 else np.full_like(s.mask, -1, dtype=np.int64)
                 for i, s in enumerate(samples)])
        rows = trainer.export_embeddings(bundle, inputs, labels, args.out,
                                         max_points=args.max_points,
                                         seed=args.seed)
        print(f"wrote {rows} rows to {args.out}")
        return 0
    except (OSError, ContainerError) as exc:
        return _fail(3, "io", str(exc))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smoothsep",
        description="semi-supervised segmentation with adversarial "
                    "smoothness and prototype separation")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--kind", choices=["two-moons", "blobs"], default="blobs")
    g.add_argument("--n", type=int, default=80, help="sample count")
    g.add_argument("--gamma", type=float, default=0.1,
                   help="two-moons dispersion")
    g.add_argument("--blur", type=float, default=1.5,
                   help="blob edge blur sigma")
    g.add_argument("--contrast", type=float, default=0.4,
                   help="blob intensity contrast in (0,1]")
    g.add_argument("--classes", type=int, default=2, help="blob class count")
    g.add_argument("--size", type=int, default=64, help="blob image side")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one experiment variant")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--variant", choices=sorted(trainer.VARIANTS),
                   default="full")
    t.add_argument("--out", help="output directory")
    t.add_argument("--dump-config", action="store_true",
                   help="print the canonical config and exit")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="metrics CSV path")
    e.add_argument("--lcc", action="store_true",
                   help="keep only the largest connected component per class")
    e.set_defaults(fn=cmd_eval)

    m = sub.add_parser("embed", help="export projected features as TSV")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--max-points", type=int, default=2000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True, help="TSV path")
    m.set_defaults(fn=cmd_embed)
    return parser


def main(argv=None) -> int:
    from .perf import tune_process
    tune_process()
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

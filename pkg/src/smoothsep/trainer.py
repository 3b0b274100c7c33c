"""Training loop: semi-supervised batches, the three-term objective with
ramped weights, SGD with momentum and step decay, per-iteration
prototype refresh, checkpointing, and sliding-window inference.

Loss routing: the supervised Dice term sees labelled samples only; the
smoothness and separation terms see the whole batch.  The adversarial
direction is computed with parameters frozen (gradient w.r.t. the probe
noise only), then one combined backward drives the update.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses, metrics, nets, rng, synthdata
from .containers import save_checkpoint


class TrainAbort(ArithmeticError):
    """Training hit a non-finite value; carries the iteration number."""

    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"non-finite value at iteration {iteration}: {cause}")
        self.iteration = iteration


class PatchLargerThanImage(ValueError):
    pass


VARIANTS = {
    # variant -> (use_lds, use_cs, discrepancy kind for the lds pair)
    "seg_only": (False, False, "dice"),
    "seg_lds": (True, False, "dice"),
    "seg_cs": (False, True, "dice"),
    "full": (True, True, "dice"),
    "seg_lds_kl": (True, False, "kl"),
}


def lr_schedule(iteration: int, cfg) -> float:
    """lr0 * decay_factor ** floor(iteration / decay_every)."""
    return cfg.lr0 * cfg.decay_factor ** (iteration // cfg.decay_every)


class SGD:
    """Heavy-ball update: v <- momentum*v - lr*grad; p <- p + v."""

    def __init__(self, names):
        self.velocity = {n: None for n in names}

    def step(self, params: dict, grads: dict, lr: float,
             momentum: float) -> None:
        for name, tensor in params.items():
            g = grads[name]
            v = self.velocity[name]
            if v is None:
                v = np.zeros_like(tensor.data)
            v = momentum * v - lr * g
            self.velocity[name] = v
            tensor.data += v


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    eval_snapshots: list = field(default_factory=list)   # (iteration, report)

    def add(self, iteration, seg, lds, cs, lam_lds, lam_cs, lr, ms):
        self.records.append((iteration, seg, lds, cs, lam_lds, lam_cs, lr, ms))

    def to_csv(self, path) -> None:
        lines = ["iter,seg,lds,cs,lambda_lds,lambda_cs,lr,ms"]
        for rec in self.records:
            it, seg, lds, cs, ll, lc, lr, ms = rec
            lines.append(f"{it},{seg:.9g},{lds:.9g},{cs:.9g},"
                         f"{ll:.9g},{lc:.9g},{lr:.9g},{ms:.9g}")
        Path(path).write_text("\n".join(lines) + "\n")


def _flatten_probs(probs: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [B*H*W, C] in (b, h, w) row-major order."""
    if probs.ndim == 2:
        return probs
    b, c, h, w = probs.shape
    return np.ascontiguousarray(
        probs.transpose(0, 2, 3, 1)).reshape(b * h * w, c)


def train_step(bundle: nets.ModelBundle, batch, iteration: int, cfg, opt: SGD,
               variant: str = "full"):
    """One optimization step; returns the logged record tuple."""
    use_lds, use_cs, kind = VARIANTS[variant]
    x_l, y_l, x_u = batch
    lam_lds = losses.rampup_weight(iteration, cfg.ramp, "lds") if use_lds else 0.0
    lam_cs = losses.rampup_weight(iteration, cfg.ramp, "cs") if use_cs else 0.0
    t0 = time.perf_counter()

    try:
        record = _step_losses(bundle, x_l, y_l, x_u, iteration, cfg,
                              use_lds, use_cs, kind, lam_lds, lam_cs)
        total, seg_v, lds_v, cs_v = record
        grads = ad.gradients(total, list(bundle.params.values()))
        grads = {n: g.data for n, g in zip(bundle.params, grads)}
        opt.step(bundle.params, grads, lr_schedule(iteration, cfg),
                 cfg.momentum)
    except ad.NonFiniteValue as exc:
        raise TrainAbort(iteration, exc) from exc

    ms = 0.0 if ad.deterministic() else (time.perf_counter() - t0) * 1e3
    return (iteration, seg_v, lds_v, cs_v, lam_lds, lam_cs,
            lr_schedule(iteration, cfg), ms)


def _step_losses(bundle, x_l, y_l, x_u, iteration, cfg,
                 use_lds, use_cs, kind, lam_lds, lam_cs):
    classes = bundle.cfg.classes
    n_lab = x_l.shape[0]

    if not (use_lds or use_cs):
        probs_l = ad.softmax(nets.forward(bundle, ad.Tensor(x_l))[0], axis=1)
        seg = losses.seg_dice_loss(probs_l, y_l)
        return seg, float(seg.data), 0.0, 0.0

    x_all = ad.Tensor(np.concatenate([x_l, x_u], axis=0) if x_u.size
                      else x_l)
    logits, deep = nets.forward(bundle, x_all)
    probs = ad.softmax(logits, axis=1)
    pseudo = probs.data            # detached by construction below

    lab_bounds = ((0, n_lab),) + tuple((0, s) for s in probs.shape[1:])
    probs_l = ad.slice_(probs, lab_bounds)
    seg = losses.seg_dice_loss(probs_l, y_l)

    lds_term = 0.0
    if use_lds:
        adv_cfg = cfg.adv if kind == cfg.adv.discrepancy_kind else \
            losses.AdvConfig(epsilon=cfg.adv.epsilon, xi=cfg.adv.xi,
                             discrepancy_kind=kind)
        noise = losses.adversarial_noise(
            bundle, x_all, adv_cfg, rng.stream(cfg.seed, "noise", iteration),
            pseudo_probs=pseudo)
        lds_term = losses.lds_loss(bundle, x_all, noise, kind,
                                   pseudo_probs=pseudo)

    cs_term = 0.0
    if use_cs:
        deep_l = ad.slice_(deep, ((0, n_lab),) +
                           tuple((0, s) for s in deep.shape[1:]))
        feats_z = nets.project_features(bundle, "z", deep_l)
        bank = losses.select_prototypes(
            bundle, feats_z, y_l.reshape(-1), _flatten_probs(pseudo[:n_lab]),
            cfg.proto.k, cfg.proto.t)
        feats_f = nets.project_features(bundle, "f", deep)
        # labelled positions keep their true labels; the rest take the
        # hard pseudo-label from the current prediction
        assignments = _flatten_probs(pseudo).argmax(axis=1)
        assignments[:y_l.size] = y_l.reshape(-1)
        cs_term = losses.cs_loss(bundle, bank, feats_f, assignments,
                                 rng.stream(cfg.seed, "cs", iteration),
                                 cfg.proto.feature_cap)

    total = losses.total_loss(seg, lds_term, cs_term, lam_lds, lam_cs)
    to_f = lambda v: float(v.data) if isinstance(v, ad.Tensor) else float(v)
    return total, float(seg.data), to_f(lds_term), to_f(cs_term)


# ---------------------------------------------------------------------------
# inference


def _window_starts(full: int, win: int, stride: int) -> list:
    starts = list(range(0, full - win + 1, stride))
    if starts[-1] != full - win:
        starts.append(full - win)
    return starts


def sliding_window_inference(model, image: np.ndarray, patch: tuple,
                             stride: tuple) -> np.ndarray:
    """Average softmax probabilities over all covering windows.

    ``model`` is a ModelBundle or any callable mapping an image batch
    tensor to per-pixel class probabilities.  Returns [C,H,W].
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        image = image[None]
    _, h, w = image.shape
    ph, pw = patch
    sh, sw = stride
    if ph > h or pw > w:
        raise PatchLargerThanImage(f"patch {patch} on image {h}x{w}")
    if sh < 1 or sw < 1:
        raise ValueError("stride must be >= 1")
    if sh > ph or sw > pw:
        raise ValueError("stride larger than patch leaves pixels uncovered")

    if callable(model):
        predict = model
    else:
        def predict(batch):
            return ad.softmax(nets.segnet_forward(model, batch)[0], axis=1)

    acc = None
    count = np.zeros((1, h, w), dtype=np.float32)
    with ad.no_grad():
        for ys in _window_starts(h, ph, sh):
            for xs in _window_starts(w, pw, sw):
                win = image[None, :, ys:ys + ph, xs:xs + pw]
                probs = predict(ad.Tensor(win)).data[0]
                if acc is None:
                    acc = np.zeros((probs.shape[0], h, w), dtype=np.float32)
                acc[:, ys:ys + ph, xs:xs + pw] += probs
                count[0, ys:ys + ph, xs:xs + pw] += 1.0
    return acc / count


def predict_mask(model, image, patch, stride) -> np.ndarray:
    return sliding_window_inference(model, image, patch, stride).argmax(axis=0)


def evaluate_corpus(bundle: nets.ModelBundle, samples, patch, stride,
                    lcc: bool = False) -> metrics.MetricsReport:
    report = metrics.MetricsReport()
    for i, s in enumerate(samples):
        h, w = s.mask.shape
        p = (min(patch[0], h), min(patch[1], w))
        pred = predict_mask(bundle, s.image, p, stride)
        if lcc:
            for c in range(1, bundle.cfg.classes):
                pred = metrics.largest_connected_component(pred, c)
        metrics.evaluate_masks(pred, s.mask, bundle.cfg.classes,
                               sample_id=f"{i:04d}", report=report)
    return report


# ---------------------------------------------------------------------------
# experiment driver


def _draw_batch(samples, split, iteration, cfg):
    gen = rng.stream(cfg.seed, "data", iteration)
    lab_idx = gen.choice(split.labeled, size=cfg.batch_labeled, replace=True)
    unl_idx = gen.choice(split.unlabeled, size=cfg.batch_unlabeled,
                         replace=True) if cfg.batch_unlabeled else []
    xs, ys, xu = [], [], []
    for slot, i in enumerate(lab_idx):
        aug = synthdata.augment(samples[i],
                                rng.stream_key(cfg.seed, "aug", iteration, slot))
        xs.append(aug.image)
        ys.append(aug.mask)
    for slot, i in enumerate(unl_idx):
        aug = synthdata.augment(
            samples[i], rng.stream_key(cfg.seed, "aug", iteration, 100 + slot))
        xu.append(aug.image)
    x_l = np.stack(xs).astype(np.float32)
    y_l = np.stack(ys)
    x_u = np.stack(xu).astype(np.float32) if xu else \
        np.zeros((0,) + x_l.shape[1:], dtype=np.float32)
    return x_l, y_l, x_u


def run_experiment(cfg, variant: str, out_dir=None, train_samples=None,
                   test_samples=None):
    """Train one variant end to end; returns (bundle, log, final report).

    Data is loaded from cfg.data paths unless passed in directly.  With
    ``out_dir`` set, writes checkpoint/, runlog.csv and metrics.csv.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; "
                         f"choose from {sorted(VARIANTS)}")
    if train_samples is None:
        train_samples = synthdata.load_corpus(cfg.data.train_dir)
    if test_samples is None:
        test_samples = synthdata.load_corpus(cfg.data.test_dir)
    split = synthdata.split_semi(len(train_samples), cfg.data.labeled_fraction,
                                 cfg.seed)
    bundle = nets.build_model(cfg.net, cfg.seed)
    opt = SGD(bundle.params)
    log = RunLog()
    patch = (cfg.infer.patch, cfg.infer.patch)
    stride = (cfg.infer.stride, cfg.infer.stride)

    for it in range(cfg.total_iters):
        batch = _draw_batch(train_samples, split, it, cfg)
        log.add(*train_step(bundle, batch, it, cfg, opt, variant))
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0 \
                and it + 1 < cfg.total_iters:
            log.eval_snapshots.append(
                (it, evaluate_corpus(bundle, test_samples, patch, stride)))
    report = evaluate_corpus(bundle, test_samples, patch, stride)
    log.eval_snapshots.append((cfg.total_iters - 1, report))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        from .config import dump_config
        save_checkpoint(out_dir / "checkpoint", bundle.params,
                        dump_config(cfg))
        log.to_csv(out_dir / "runlog.csv")
        metrics.write_report_csv(report, out_dir / "metrics.csv")
    return bundle, log, report


# ---------------------------------------------------------------------------
# two-moon point study


def stratified_labeled_indices(labels: np.ndarray, n_labeled: int,
                               seed: int) -> np.ndarray:
    """Pick n_labeled points split as evenly as possible across classes."""
    gen = rng.stream(seed, "split")
    out = []
    classes = np.unique(labels)
    quota, extra = divmod(n_labeled, len(classes))
    for j, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)
        take = quota + (1 if j < extra else 0)
        out.append(gen.permutation(idx)[:take])
    return np.sort(np.concatenate(out))


def run_toy_experiment(cfg, variant: str, points: np.ndarray,
                       labels: np.ndarray, n_labeled: int,
                       out_dir=None):
    """Train the point classifier; returns (bundle, log, accuracy).

    The labelled subset is stratified; every step uses all labelled
    points plus a fresh uniform draw of unlabelled ones.  Accuracy is
    measured on the full point set against the true labels.
    """
    lab_idx = stratified_labeled_indices(labels, n_labeled, cfg.seed)
    unl_idx = np.setdiff1d(np.arange(len(labels)), lab_idx)
    bundle = nets.build_model(cfg.net, cfg.seed)
    opt = SGD(bundle.params)
    log = RunLog()

    x_l = points[lab_idx].astype(np.float32)
    y_l = labels[lab_idx].astype(np.int64)
    for it in range(cfg.total_iters):
        gen = rng.stream(cfg.seed, "data", it)
        pick = gen.choice(unl_idx, size=min(cfg.batch_unlabeled, len(unl_idx)),
                          replace=False) if cfg.batch_unlabeled else []
        x_u = points[pick].astype(np.float32) if len(pick) else \
            np.zeros((0, 2), dtype=np.float32)
        log.add(*train_step(bundle, (x_l, y_l, x_u), it, cfg, opt, variant))

    with ad.no_grad():
        logits, _ = nets.mlp_forward(bundle, ad.Tensor(points))
    accuracy = float(np.mean(logits.data.argmax(axis=1) == labels))

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        from .config import dump_config
        save_checkpoint(out_dir / "checkpoint", bundle.params,
                        dump_config(cfg))
        log.to_csv(out_dir / "runlog.csv")
        (out_dir / "accuracy.txt").write_text(f"{accuracy:.6f}\n")
    return bundle, log, accuracy


# ---------------------------------------------------------------------------
# embedding export


def export_embeddings(bundle: nets.ModelBundle, inputs: np.ndarray,
                      labels: np.ndarray, path, max_points: int = 2000,
                      seed: int = 0) -> int:
    """Project f-family features and dump a TSV for external tools.

    One row per sampled pixel/point: d_proj feature columns, then
    ``label`` (-1 for unlabelled), ``pseudo_label`` (argmax of the
    current prediction) and ``confidence`` (its probability).  Returns
    the number of rows written.
    """
    with ad.no_grad():
        logits, deep = nets.forward(bundle, ad.Tensor(inputs))
        probs = ad.softmax(logits, axis=1).data
        feats = nets.project_features(bundle, "f", deep).data
    flat_probs = _flatten_probs(probs)
    labels = np.asarray(labels).reshape(-1)
    n = feats.shape[0]
    if labels.shape[0] != n:
        raise ad.ShapeMismatch("labels must cover every feature row")
    if n > max_points:
        keep = np.sort(rng.stream(seed, "embed").choice(n, size=max_points,
                                                        replace=False))
    else:
        keep = np.arange(n)
    header = "\t".join([f"f{j}" for j in range(feats.shape[1])]
                       + ["label", "pseudo_label", "confidence"])
    lines = [header]
    for i in keep:
        row = [f"{v:.6g}" for v in feats[i]]
        row.append(str(int(labels[i])))
        row.append(str(int(flat_probs[i].argmax())))
        row.append(f"{flat_probs[i].max():.6g}")
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n")
    return len(keep)

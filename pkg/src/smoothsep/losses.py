"""The training objective: adversarial-perturbation smoothness, prototype
based class separation, and the supervised Dice term that anchors them.

Three pieces:

* ``discrepancy`` measures how far apart two predictive distributions
  are, either as a soft-Dice complement (the default) or as mean KL
  (the ablation variant).
* ``adversarial_noise`` finds, for each sample, the eps-norm input
  perturbation along the gradient of the discrepancy between the
  model's own (detached) prediction and the prediction under a small
  random probe noise, then ``lds_loss`` penalizes disagreement under
  that perturbation.
* ``select_prototypes`` keeps, per class, the top-K attention-ranked
  labelled features among those predicted correctly with confidence
  above a threshold; ``cs_loss`` pulls every feature toward its class
  prototypes under a doubly attention-weighted cosine distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nets


class NotADistribution(ValueError):
    """KL requested on rows that do not sum to one."""


class ZeroVector(ValueError):
    """Cosine distance against a (near-)zero vector."""


@dataclass
class AdvConfig:
    epsilon: float = 10.0       # perturbation magnitude, input-intensity units
    xi: float = 0.1             # probe noise scale
    discrepancy_kind: str = "dice"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.xi <= 0:
            raise ValueError("xi must be > 0")
        if self.discrepancy_kind not in ("dice", "kl"):
            raise ValueError("discrepancy_kind must be 'dice' or 'kl'")


@dataclass
class RampUp:
    lambda_max_lds: float = 1.0
    lambda_max_cs: float = 1.0
    t_ramp: int = 1200


@dataclass
class PrototypeBank:
    """Per-class prototype rows and their L1-normalized attention weights.

    ``vectors[c]`` is a graph-connected [n_c, d_proj] tensor, so the
    separation loss trains the z-projector and z-attention heads through
    the bank.  Classes without candidates are simply absent.
    """
    k: int
    threshold: float
    vectors: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    indices: dict = field(default_factory=dict)

    def classes(self) -> list:
        return sorted(self.vectors)


def one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    """Integer labels [B,...] -> float32 one-hot [B,C,...]."""
    labels = np.asarray(labels)
    eye = np.eye(classes, dtype=np.float32)
    oh = eye[labels.reshape(-1)].reshape(labels.shape + (classes,))
    return np.ascontiguousarray(np.moveaxis(oh, -1, 1))


def discrepancy(a, b, kind: str = "dice", class_axis: int = 1,
                smooth: float = 1e-5) -> ad.Tensor:
    """Divergence between two probability tensors.

    dice: mean over classes of 1 - 2*sum(a_c*b_c)/(sum(a_c)+sum(b_c)+smooth),
    sums pooled over every non-class position.  kl: mean over positions
    of KL(a || b) along the class axis.
    """
    a = ad.as_tensor(a)
    b = ad.as_tensor(b, a)
    if a.shape != b.shape:
        raise ad.ShapeMismatch(f"discrepancy: {a.shape} vs {b.shape}")
    ndim = a.data.ndim
    class_axis = class_axis % ndim
    other_axes = tuple(i for i in range(ndim) if i != class_axis)

    if kind == "dice":
        inter = ad.tsum(ad.mul(a, b), axis=other_axes)
        denom = ad.add(ad.add(ad.tsum(a, axis=other_axes),
                              ad.tsum(b, axis=other_axes)), float(smooth))
        per_class = ad.sub(1.0, ad.div(ad.mul(2.0, inter), denom))
        return ad.tmean(per_class)

    if kind == "kl":
        for name, t in (("a", a), ("b", b)):
            sums = np.sum(t.data, axis=class_axis, dtype=np.float64)
            if np.max(np.abs(sums - 1.0)) > 1e-4:
                raise NotADistribution(
                    f"{name}: rows off unit mass by {np.max(np.abs(sums - 1.0)):.2e}")
        eps = 1e-12
        log_ratio = ad.sub(ad.log(ad.add(a, eps)), ad.log(ad.add(b, eps)))
        total = ad.tsum(ad.mul(a, log_ratio))
        positions = a.size // a.shape[class_axis]
        return ad.div(total, float(positions))

    raise ValueError(f"unknown discrepancy kind {kind!r}")


def _probs(bundle: nets.ModelBundle, x: ad.Tensor) -> ad.Tensor:
    logits, _ = nets.forward(bundle, x)
    return ad.softmax(logits, axis=1)


def _per_sample_norm(arr: np.ndarray) -> np.ndarray:
    flat = arr.reshape(arr.shape[0], -1).astype(np.float64)
    return np.sqrt(np.sum(flat * flat, axis=1))


def _scale_per_sample(arr: np.ndarray, target: float,
                      floor: float = 1e-12) -> tuple:
    """Rescale each sample to L2 norm ``target``; flag samples below floor."""
    norms = _per_sample_norm(arr)
    dead = norms < floor
    safe = np.where(dead, 1.0, norms)
    scale = (target / safe).astype(arr.dtype)
    out = arr * scale.reshape((-1,) + (1,) * (arr.ndim - 1))
    out[dead] = 0.0
    return out, dead


@dataclass
class AdvNoise:
    r_adv: np.ndarray
    zero_grad: np.ndarray       # per-sample flag: gradient vanished

    @property
    def any_zero(self) -> bool:
        return bool(self.zero_grad.any())


def adversarial_noise(bundle: nets.ModelBundle, x, cfg: AdvConfig,
                      gen: np.random.Generator,
                      pseudo_probs: np.ndarray | None = None) -> AdvNoise:
    """Per-sample eps-norm perturbation along the discrepancy gradient.

    The model is treated as frozen: the gradient is taken w.r.t. the
    probe noise only and no parameter is touched.  ``pseudo_probs``
    may pass in an already-computed clean prediction to avoid a
    redundant forward.
    """
    x = ad.as_tensor(x)
    if cfg.epsilon == 0.0:
        return AdvNoise(np.zeros(x.shape, dtype=x.dtype.type),
                        np.zeros(x.shape[0], dtype=bool))

    if pseudo_probs is None:
        with ad.no_grad():
            pseudo_probs = _probs(bundle, x).data
    pseudo = np.asarray(pseudo_probs)

    d = gen.standard_normal(x.shape).astype(x.dtype)
    r_ini, _ = _scale_per_sample(d, cfg.xi)
    r = ad.Tensor(r_ini, requires_grad=True, dtype=x.dtype)
    pert = _probs(bundle, ad.add(x, r))
    dist = discrepancy(pseudo, pert, cfg.discrepancy_kind)
    g = ad.gradients(dist, [r])[0].data
    r_adv, dead = _scale_per_sample(g, cfg.epsilon)
    return AdvNoise(r_adv, dead)


def lds_loss(bundle: nets.ModelBundle, x, r_adv, kind: str = "dice",
             pseudo_probs: np.ndarray | None = None) -> ad.Tensor:
    """Discrepancy between the detached clean prediction and the
    prediction under the adversarial perturbation; gradients flow only
    through the perturbed branch."""
    x = ad.as_tensor(x)
    r = r_adv.r_adv if isinstance(r_adv, AdvNoise) else np.asarray(r_adv)
    if r.shape != x.shape:
        raise ad.ShapeMismatch(f"lds_loss: noise {r.shape} vs input {x.shape}")
    if pseudo_probs is None:
        with ad.no_grad():
            pseudo_probs = _probs(bundle, x).data
    pert = _probs(bundle, ad.Tensor(x.data + r, dtype=x.dtype))
    return discrepancy(np.asarray(pseudo_probs), pert, kind)


def select_prototypes(bundle: nets.ModelBundle, feats_l: ad.Tensor,
                      labels: np.ndarray, probs: np.ndarray,
                      k: int, threshold: float) -> PrototypeBank:
    """Top-K attention-ranked candidates per class.

    Candidates are labelled features whose max prediction confidence
    exceeds ``threshold`` and whose argmax agrees with the label.
    Ranking is by z-attention score, descending, stable, ties broken by
    ascending feature index.  Selected scores are L1-normalized into
    the bank weights.
    """
    labels = np.asarray(labels)
    probs = np.asarray(probs)
    if not (feats_l.shape[0] == labels.shape[0] == probs.shape[0]):
        raise ad.ShapeMismatch("select_prototypes: misaligned inputs")
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    eligible = (conf > threshold) & (pred == labels)

    bank = PrototypeBank(k=k, threshold=threshold)
    for c in range(bundle.cfg.classes):
        idx = np.nonzero(eligible & (labels == c))[0]
        if idx.size == 0:
            continue
        cand = ad.take(feats_l, idx)
        scores = nets.attention_scores(bundle, "z", c, cand)
        order = np.argsort(-scores.data, kind="stable")[:min(k, idx.size)]
        chosen = ad.take(cand, order)
        chosen_scores = ad.take(scores, order)
        bank.vectors[c] = chosen
        bank.weights[c] = ad.div(chosen_scores, ad.tsum(chosen_scores))
        bank.indices[c] = idx[order]
    return bank


def _row_unit(t: ad.Tensor, what: str) -> ad.Tensor:
    norms = ad.l2_norm(t, axis=1, keepdims=True)
    if float(norms.data.min()) < 1e-12:
        raise ZeroVector(f"{what} with near-zero L2 norm")
    ones = ad.Tensor(np.ones((1, t.shape[1]), dtype=t.dtype))
    return ad.div(t, ad.matmul(norms, ones))


def cs_loss(bundle: nets.ModelBundle, bank: PrototypeBank, feats: ad.Tensor,
            assignments: np.ndarray, gen: np.random.Generator | None = None,
            feature_cap: int = 4096) -> ad.Tensor:
    """Attention-weighted mean cosine distance from class features to
    their prototypes, averaged over classes having both.

    Per class: (1/(N*M)) * sum_ij w_z_i * w_f_j * (1 - cos(z_i, f_j)),
    then the mean over contributing classes.  When the number of
    features exceeds ``feature_cap`` they are subsampled uniformly per
    class (proportionally) with the provided generator.
    """
    assignments = np.asarray(assignments)
    if assignments.shape[0] != feats.shape[0]:
        raise ad.ShapeMismatch("cs_loss: assignments do not cover features")
    total = feats.shape[0]
    terms = []
    for c in bank.classes():
        idx = np.nonzero(assignments == c)[0]
        if idx.size == 0:
            continue
        if feature_cap and total > feature_cap:
            target = max(1, int(round(feature_cap * idx.size / total)))
            if target < idx.size:
                if gen is None:
                    raise ValueError("feature subsampling requires a generator")
                pick = gen.choice(idx.size, size=target, replace=False)
                idx = idx[np.sort(pick)]
        f_c = ad.take(feats, idx)
        n = bank.vectors[c].shape[0]
        m = idx.size

        f_scores = nets.attention_scores(bundle, "f", c, f_c)
        w_f = ad.div(f_scores, ad.tsum(f_scores))
        z_n = _row_unit(bank.vectors[c], f"class {c} prototype")
        f_n = _row_unit(f_c, f"class {c} feature")
        cos = ad.matmul(z_n, ad.transpose(f_n, (1, 0)))
        dist = ad.sub(1.0, cos)
        pooled = ad.matmul(ad.matmul(ad.reshape(bank.weights[c], (1, n)), dist),
                           ad.reshape(w_f, (m, 1)))
        terms.append(ad.mul(ad.reshape(pooled, ()), 1.0 / (n * m)))

    if not terms:
        return ad.Tensor(np.zeros((), dtype=np.float32))
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.div(acc, float(len(terms)))


def rampup_weight(iteration: int, cfg: RampUp, which: str) -> float:
    """lambda(t) = lambda_max * exp(-5 * (1 - min(t/t_ramp, 1))^2)."""
    lam_max = {"lds": cfg.lambda_max_lds, "cs": cfg.lambda_max_cs}[which]
    if cfg.t_ramp <= 0 or iteration >= cfg.t_ramp:
        return lam_max
    frac = iteration / cfg.t_ramp
    return lam_max * math.exp(-5.0 * (1.0 - frac) ** 2)


def total_loss(seg, lds, cs, lam_lds: float, lam_cs: float) -> ad.Tensor:
    """seg + lam_lds * lds + lam_cs * cs (seg from labelled data only)."""
    out = ad.as_tensor(seg)
    if lam_lds:
        out = ad.add(out, ad.mul(ad.as_tensor(lds, out), float(lam_lds)))
    if lam_cs:
        out = ad.add(out, ad.mul(ad.as_tensor(cs, out), float(lam_cs)))
    return out


def seg_dice_loss(probs: ad.Tensor, labels: np.ndarray,
                  smooth: float = 1e-5) -> ad.Tensor:
    """Soft Dice loss of predicted probabilities against integer labels."""
    target = one_hot(labels, probs.shape[1])
    return discrepancy(probs, target, "dice", smooth=smooth)

"""Desk-scale networks: toy MLP, small encoder-decoder segmenter, the
shared feature projectors, and per-class attention scorers.

A ModelBundle carries every trainable tensor in a flat name -> Tensor
dict: backbone, final classifier head, two projector families ("z" for
prototype extraction, "f" for the features compared against them) and
one attention scorer per class per family.

Projectors are two pointwise (1x1) maps with a leaky-relu between; on
flattened feature vectors those are plain matmuls, which is how they
are implemented for both network kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng


class IndivisibleSpatialDims(ad.ShapeMismatch):
    """Input spatial dims not divisible by the downsampling factor."""


@dataclass
class NetConfig:
    kind: str = "segnet"            # segnet | mlp
    classes: int = 2
    d_proj: int = 32
    channels: tuple = (16, 32)      # encoder stage widths
    in_channels: int = 1
    input_size: int = 64
    mlp_hidden: tuple = (64, 64, 64)

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.d_proj < 2:
            raise ValueError("d_proj must be >= 2")

    @property
    def d_feat(self) -> int:
        return self.channels[0] if self.kind == "segnet" else self.mlp_hidden[-1]


@dataclass
class ModelBundle:
    cfg: NetConfig
    params: dict = field(default_factory=dict)

    def tensors(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    def names(self) -> list:
        return sorted(self.params)


def _he(gen: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    return (gen.standard_normal(shape) * std).astype(np.float32)


def build_model(cfg: NetConfig, seed: int) -> ModelBundle:
    """Fresh parameter set; He fan-in weights, zero biases, seeded."""
    p: dict[str, ad.Tensor] = {}

    def param(name, arr):
        p[name] = ad.Tensor(arr, requires_grad=True)

    def conv_param(name, cout, cin, k):
        g = rng.stream(seed, "init", name)
        param(name + ".w", _he(g, (cout, cin, k, k), cin * k * k))
        param(name + ".b", np.zeros(cout, dtype=np.float32))

    def fc_param(name, din, dout):
        g = rng.stream(seed, "init", name)
        param(name + ".w", _he(g, (din, dout), din))
        param(name + ".b", np.zeros((1, dout), dtype=np.float32))

    if cfg.kind == "segnet":
        c1, c2 = cfg.channels
        conv_param("enc1a", c1, cfg.in_channels, 3)
        conv_param("enc1b", c1, c1, 3)
        conv_param("down", c2, c1, 3)
        conv_param("mid", c2, c2, 3)
        conv_param("up", c1, c2, 3)
        conv_param("dec", c1, 2 * c1, 3)
        conv_param("cls", cfg.classes, c1, 1)
    elif cfg.kind == "mlp":
        widths = [2] + list(cfg.mlp_hidden)
        for i in range(len(widths) - 1):
            fc_param(f"fc{i + 1}", widths[i], widths[i + 1])
        fc_param("cls", widths[-1], cfg.classes)
    else:
        raise ValueError(f"unknown net kind {cfg.kind!r}")

    for fam in ("z", "f"):
        fc_param(f"proj_{fam}1", cfg.d_feat, cfg.d_proj)
        fc_param(f"proj_{fam}2", cfg.d_proj, cfg.d_proj)
        for c in range(cfg.classes):
            fc_param(f"att_{fam}.{c}", cfg.d_proj, 1)
    return ModelBundle(cfg=cfg, params=p)


def _linear(x: ad.Tensor, w: ad.Tensor, b: ad.Tensor) -> ad.Tensor:
    # bias row is expanded through a ones-column matmul so the final add
    # is exact-shape (the engine does not row-broadcast)
    ones = ad.Tensor(np.ones((x.shape[0], 1), dtype=x.dtype))
    return ad.add(ad.matmul(x, w), ad.matmul(ones, b))


def mlp_forward(bundle: ModelBundle, points: ad.Tensor):
    """Toy classifier on 2-D points -> (logits [B,C], features [B,d_feat])."""
    p = bundle.params
    if points.data.ndim != 2 or points.shape[1] != 2:
        raise ad.ShapeMismatch(f"mlp_forward: expected [B,2], got {points.shape}")
    h = points
    for i in range(1, len(bundle.cfg.mlp_hidden) + 1):
        h = ad.leaky_relu(_linear(h, p[f"fc{i}.w"], p[f"fc{i}.b"]))
    logits = _linear(h, p["cls.w"], p["cls.b"])
    return logits, h


def segnet_forward(bundle: ModelBundle, images: ad.Tensor):
    """Per-pixel logits plus the pre-classifier feature map.

    Returns (logits [B,C,H,W], deep_features [B,d_feat,H,W]).
    """
    p = bundle.params
    if images.data.ndim != 4 or images.shape[1] != bundle.cfg.in_channels:
        raise ad.ShapeMismatch(
            f"segnet_forward: expected [B,{bundle.cfg.in_channels},H,W], "
            f"got {images.shape}")
    _, _, h, w = images.shape
    if h % 2 or w % 2:
        raise IndivisibleSpatialDims(f"spatial dims {h}x{w} not divisible by 2")

    e1 = ad.leaky_relu(ad.conv2d(images, p["enc1a.w"], p["enc1a.b"], padding=1))
    e1 = ad.leaky_relu(ad.conv2d(e1, p["enc1b.w"], p["enc1b.b"], padding=1))
    d = ad.leaky_relu(ad.conv2d(e1, p["down.w"], p["down.b"],
                                stride=2, padding=1))
    m = ad.leaky_relu(ad.conv2d(d, p["mid.w"], p["mid.b"], padding=1))
    u = ad.upsample2d(m, 2)
    u = ad.leaky_relu(ad.conv2d(u, p["up.w"], p["up.b"], padding=1))
    cat = ad.concat([u, e1], axis=1)
    deep = ad.leaky_relu(ad.conv2d(cat, p["dec.w"], p["dec.b"], padding=1))
    logits = ad.conv2d(deep, p["cls.w"], p["cls.b"])
    return logits, deep


def forward(bundle: ModelBundle, x: ad.Tensor):
    if bundle.cfg.kind == "segnet":
        return segnet_forward(bundle, x)
    return mlp_forward(bundle, x)


def flatten_features(deep: ad.Tensor) -> ad.Tensor:
    """[B,d,H,W] -> [B*H*W, d] in row-major (b, h, w) order; 2-D passes through."""
    if deep.data.ndim == 2:
        return deep
    b, d, h, w = deep.shape
    return ad.reshape(ad.transpose(deep, (0, 2, 3, 1)), (b * h * w, d))


def project_features(bundle: ModelBundle, family: str,
                     deep: ad.Tensor) -> ad.Tensor:
    """Project deep features with the z- or f-family pointwise stack."""
    if family not in ("z", "f"):
        raise ValueError("family must be 'z' or 'f'")
    p = bundle.params
    flat = flatten_features(deep)
    if flat.shape[1] != bundle.cfg.d_feat:
        raise ad.ShapeMismatch(
            f"project_features: width {flat.shape[1]} != d_feat "
            f"{bundle.cfg.d_feat}")
    hid = ad.leaky_relu(_linear(flat, p[f"proj_{family}1.w"],
                                p[f"proj_{family}1.b"]))
    return _linear(hid, p[f"proj_{family}2.w"], p[f"proj_{family}2.b"])


def attention_scores(bundle: ModelBundle, family: str, class_id: int,
                     feats: ad.Tensor) -> ad.Tensor:
    """One positive score per feature row from the class-specific head."""
    p = bundle.params
    if feats.shape[1] != bundle.cfg.d_proj:
        raise ad.ShapeMismatch(
            f"attention_scores: width {feats.shape[1]} != d_proj "
            f"{bundle.cfg.d_proj}")
    raw = _linear(feats, p[f"att_{family}.{class_id}.w"],
                  p[f"att_{family}.{class_id}.b"])
    return ad.reshape(ad.sigmoid(raw), (feats.shape[0],))

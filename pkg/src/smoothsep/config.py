"""Plain-text experiment configuration: ``key = value`` lines with
dotted keys.  Unknown keys are an error, every key has a documented
default, and the canonical dump re-parses to an equal config.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .losses import AdvConfig, RampUp
from .nets import NetConfig


class ConfigError(ValueError):
    pass


@dataclass
class ProtoConfig:
    k: int = 32                 # prototypes kept per class
    t: float = 0.9              # candidate confidence threshold
    feature_cap: int = 4096     # subsample features beyond this many

    def __post_init__(self):
        if not (0.0 <= self.t <= 1.0):
            raise ValueError("proto.t must lie in [0, 1]")


@dataclass
class DataConfig:
    train_dir: str = "data/train"
    test_dir: str = "data/test"
    labeled_fraction: float = 0.05


@dataclass
class InferConfig:
    patch: int = 64
    stride: int = 32


@dataclass
class TrainConfig:
    total_iters: int = 3000
    lr0: float = 0.01
    decay_factor: float = 0.9
    decay_every: int = 500
    momentum: float = 0.9
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    seed: int = 1
    eval_every: int = 250
    adv: AdvConfig = field(default_factory=AdvConfig)
    ramp: RampUp = field(default_factory=RampUp)
    proto: ProtoConfig = field(default_factory=ProtoConfig)
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    infer: InferConfig = field(default_factory=InferConfig)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("train.lr0 must be > 0")
        if not (0 < self.decay_factor < 1):
            raise ValueError("train.decay_factor must lie in (0, 1)")
        if self.batch_labeled < 1:
            raise ValueError("train.batch_labeled must be >= 1")
        if self.batch_unlabeled < 0:
            raise ValueError("train.batch_unlabeled must be >= 0")


def _int_tuple(text: str) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# key -> (section attribute or None for top level, field, parser, doc)
KEYS = {
    "train.total_iters": (None, "total_iters", int, "training iterations"),
    "train.lr0": (None, "lr0", float, "initial learning rate"),
    "train.decay_factor": (None, "decay_factor", float,
                           "multiplicative lr decay per step"),
    "train.decay_every": (None, "decay_every", int,
                          "iterations between lr decays"),
    "train.momentum": (None, "momentum", float, "SGD momentum"),
    "train.batch_labeled": (None, "batch_labeled", int,
                            "labelled samples per batch"),
    "train.batch_unlabeled": (None, "batch_unlabeled", int,
                              "unlabelled samples per batch"),
    "train.seed": (None, "seed", int, "master random seed"),
    "train.eval_every": (None, "eval_every", int,
                         "iterations between held-out evaluations"),
    "adv.epsilon": ("adv", "epsilon", float, "perturbation magnitude"),
    "adv.xi": ("adv", "xi", float, "probe noise scale"),
    "adv.discrepancy_kind": ("adv", "discrepancy_kind", str,
                             "dice or kl"),
    "ramp.lambda_max_lds": ("ramp", "lambda_max_lds", float,
                            "smoothness weight plateau"),
    "ramp.lambda_max_cs": ("ramp", "lambda_max_cs", float,
                           "separation weight plateau"),
    "ramp.t_ramp": ("ramp", "t_ramp", int, "warm-up length in iterations"),
    "proto.k": ("proto", "k", int, "prototypes per class"),
    "proto.t": ("proto", "t", float, "candidate confidence threshold"),
    "proto.feature_cap": ("proto", "feature_cap", int,
                          "max features in the separation loss"),
    "net.kind": ("net", "kind", str, "segnet or mlp"),
    "net.classes": ("net", "classes", int, "class count"),
    "net.d_proj": ("net", "d_proj", int, "projected feature width"),
    "net.channels": ("net", "channels", _int_tuple,
                     "encoder stage widths, comma separated"),
    "net.in_channels": ("net", "in_channels", int, "input channels"),
    "net.input_size": ("net", "input_size", int, "training image side"),
    "net.mlp_hidden": ("net", "mlp_hidden", _int_tuple,
                       "mlp hidden widths, comma separated"),
    "data.train_dir": ("data", "train_dir", str, "training corpus"),
    "data.test_dir": ("data", "test_dir", str, "held-out corpus"),
    "data.labeled_fraction": ("data", "labeled_fraction", float,
                              "fraction of training samples with labels"),
    "infer.patch": ("infer", "patch", int, "sliding-window patch side"),
    "infer.stride": ("infer", "stride", int, "sliding-window stride"),
}


def default_config() -> TrainConfig:
    return TrainConfig()


def get_key(cfg: TrainConfig, key: str):
    section, name, _, _ = KEYS[key]
    holder = cfg if section is None else getattr(cfg, section)
    return getattr(holder, name)


def set_key(cfg: TrainConfig, key: str, raw: str) -> None:
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    section, name, parse, _ = KEYS[key]
    try:
        value = parse(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from exc
    holder = cfg if section is None else getattr(cfg, section)
    setattr(holder, name, value)


def parse_config(text: str) -> TrainConfig:
    cfg = default_config()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        set_key(cfg, key, raw)
    # re-run the dataclass validators on the final values
    cfg.adv = replace(cfg.adv)
    cfg.proto = replace(cfg.proto)
    cfg.net = replace(cfg.net)
    return replace(cfg)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: TrainConfig) -> str:
    lines = [f"{key} = {_fmt(get_key(cfg, key))}" for key in KEYS]
    return "\n".join(lines) + "\n"


def describe_defaults() -> str:
    cfg = default_config()
    return "\n".join(f"{key} = {_fmt(get_key(cfg, key))}  # {KEYS[key][3]}"
                     for key in KEYS) + "\n"

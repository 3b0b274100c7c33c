"""Semi-supervised segmentation via adversarial pixel-level smoothness
and prototype-based inter-class separation, with its own small
reverse-mode differentiation engine, synthetic benchmarks, and a full
evaluation suite."""

from . import autodiff, config, containers, losses, metrics, nets, rng, \
    synthdata, trainer

__all__ = ["autodiff", "config", "containers", "losses", "metrics", "nets",
           "rng", "synthdata", "trainer"]
__version__ = "0.1.0"

"""Deterministic synthetic data: the two-moon point toy, a blurred-blob
segmentation corpus, semi-supervised splits, and dihedral augmentation.

Every generator is a pure function of its arguments including the seed;
per-sample randomness is drawn from streams keyed by (seed, sample id),
so generation order and concurrency cannot change outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import rng
from .containers import read_tensor, write_tensor


class DegenerateSplit(ValueError):
    """Labelled subset would be empty or the whole set."""


class NonSquareInput(ValueError):
    """90/270 degree rotation requested on a non-square sample."""


@dataclass
class MoonSet:
    points: np.ndarray          # [n,2] float32
    labels: np.ndarray          # [n] uint8, {0,1}
    gamma: float
    seed: int


@dataclass
class SegSample:
    image: np.ndarray           # [1,H,W] float32 in [0,1]
    mask: np.ndarray            # [H,W] uint8 class ids


@dataclass
class SemiSplit:
    labeled: np.ndarray
    unlabeled: np.ndarray


def two_moons(n: int, gamma: float, seed: int) -> MoonSet:
    """Two half-circle arcs: class 0 on the upper unit arc, class 1 on
    the lower arc offset by (1, -0.5); each point displaced by isotropic
    Gaussian noise with standard deviation gamma."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    n0 = (n + 1) // 2
    n1 = n // 2
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([np.cos(t1) + 1.0, -np.sin(t1) - 0.5], axis=1)
    pts = np.concatenate([upper, lower], axis=0)
    if gamma > 0:
        gen = rng.stream(seed, "moons")
        pts = pts + gen.standard_normal(pts.shape) * gamma
    labels = np.concatenate([np.zeros(n0, np.uint8), np.ones(n1, np.uint8)])
    return MoonSet(points=pts.astype(np.float32), labels=labels,
                   gamma=float(gamma), seed=int(seed))


def _blob_mask(gen: np.random.Generator, h: int, w: int,
               classes: int) -> np.ndarray:
    """One wobbly-ellipse blob per foreground class, resampled until the
    total foreground fraction lands in [5%, 60%]."""
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(200):
        mask = np.zeros((h, w), dtype=np.uint8)
        for c in range(1, classes):
            cy = gen.uniform(0.25 * h, 0.75 * h)
            cx = gen.uniform(0.25 * w, 0.75 * w)
            ry = gen.uniform(0.12 * h, 0.30 * h)
            rx = gen.uniform(0.12 * w, 0.30 * w)
            theta = gen.uniform(0, np.pi)
            amp = gen.uniform(0.05, 0.25)
            freq = gen.integers(3, 7)
            phase = gen.uniform(0, 2 * np.pi)
            dy = yy - cy
            dx = xx - cx
            u = np.cos(theta) * dx + np.sin(theta) * dy
            v = -np.sin(theta) * dx + np.cos(theta) * dy
            r = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
            ang = np.arctan2(v, u)
            boundary = 1.0 + amp * np.sin(freq * ang + phase)
            mask[r <= boundary] = c
        frac = np.count_nonzero(mask) / mask.size
        if 0.05 <= frac <= 0.60:
            return mask
    raise RuntimeError("blob rejection sampling failed to converge")


def blob_dataset(count: int, h: int = 64, w: int = 64, classes: int = 2,
                 blur_sigma: float = 1.5, contrast: float = 0.4,
                 seed: int = 0) -> list:
    """Blurred low-contrast blob images with crisp ground-truth masks.

    The image is the class-intensity map scaled by ``contrast``, edge
    blurred with a Gaussian of ``blur_sigma``, plus additive noise whose
    amplitude rides on ``blur_sigma``.  Lowering the contrast also
    jitters each sample's class intensities, so an intensity threshold
    learned from a few samples does not transfer across the corpus; at
    blur_sigma=0, contrast=1 the foreground reproduces its class
    intensity exactly.
    """
    if h < 16 or w < 16:
        raise ValueError("spatial dims must be >= 16")
    if classes < 2:
        raise ValueError("classes must be >= 2")
    if not (0 < contrast <= 1):
        raise ValueError("contrast must be in (0, 1]")
    base = np.linspace(0.2, 1.0, classes, dtype=np.float64)
    jitter_amp = 0.45 * (1.0 - contrast)
    samples = []
    for i in range(count):
        gen = rng.stream(seed, "blobs", i)
        mask = _blob_mask(gen, h, w, classes)
        intensities = base + gen.uniform(-jitter_amp, jitter_amp, classes)
        img = intensities[mask] * contrast
        if blur_sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=blur_sigma)
            img = img + gen.standard_normal(img.shape) * (0.05 * blur_sigma)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(SegSample(image=img[None], mask=mask))
    return samples


def split_semi(total: int, fraction: float, seed: int) -> SemiSplit:
    """Uniform labelled subset of size round(fraction * total)."""
    if not (0 < fraction < 1):
        raise ValueError("fraction must be in (0, 1)")
    n_lab = int(round(fraction * total))
    if n_lab == 0 or n_lab == total:
        raise DegenerateSplit(f"{n_lab} labelled of {total}")
    perm = rng.stream(seed, "split").permutation(total)
    return SemiSplit(labeled=np.sort(perm[:n_lab]),
                     unlabeled=np.sort(perm[n_lab:]))


def apply_dihedral(sample: SegSample, k: int, flip: bool) -> SegSample:
    """Apply one dihedral-group element (k quarter-turns, optional
    horizontal flip before rotating) jointly to image and mask."""
    img = sample.image
    mask = sample.mask
    if k % 2 and img.shape[1] != img.shape[2]:
        raise NonSquareInput("quarter-turn rotation needs square samples")
    if flip:
        img = img[:, :, ::-1]
        mask = mask[:, ::-1]
    if k % 4:
        img = np.rot90(img, k=k % 4, axes=(1, 2))
        mask = np.rot90(mask, k=k % 4)
    return SegSample(image=np.ascontiguousarray(img),
                     mask=np.ascontiguousarray(mask))


def augment(sample: SegSample, seed: int) -> SegSample:
    """One uniformly chosen element of the 8-element dihedral group."""
    gen = rng.stream(seed, "augment")
    code = int(gen.integers(0, 8))
    return apply_dihedral(sample, k=code % 4, flip=bool(code // 4))


# ---------------------------------------------------------------------------
# on-disk corpus layout: one image/mask container pair per sample plus a
# manifest of "id image-file mask-file" lines


def save_corpus(directory, samples: list) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        img_name = f"image_{i:04d}.ssnt"
        mask_name = f"mask_{i:04d}.ssnt"
        write_tensor(directory / img_name, s.image.astype(np.float32))
        write_tensor(directory / mask_name, s.mask.astype(np.uint8))
        lines.append(f"{i:04d} {img_name} {mask_name}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_corpus(directory) -> list:
    directory = Path(directory)
    samples = []
    for line in (directory / "manifest.txt").read_text().splitlines():
        if not line.strip():
            continue
        _, img_name, mask_name = line.split()
        samples.append(SegSample(image=read_tensor(directory / img_name),
                                 mask=read_tensor(directory / mask_name)))
    return samples


def save_moons(directory, moons: MoonSet) -> None:
    """MoonSet as a single [n,3] float32 container (x, y, label)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    packed = np.concatenate(
        [moons.points, moons.labels[:, None].astype(np.float32)], axis=1)
    write_tensor(directory / "moons.ssnt", packed.astype(np.float32))
    (directory / "manifest.txt").write_text("moons moons.ssnt\n")


def load_moons(directory) -> tuple:
    packed = read_tensor(Path(directory) / "moons.ssnt")
    return packed[:, :2].copy(), packed[:, 2].astype(np.int64)

"""Synthetic bi-temporal pairs, augmentation, and the on-disk dataset layout.

A sample is two RGB images over the same textured background plus a binary
change mask. Structural edits (objects added, removed, or moved between the
two frames) define mask=1 regions constructively; on top of that the second
frame gets a global photometric shift that never enters the mask, standing
in for appearance-only pseudo-changes the detector must learn to ignore.

On disk datasets follow root/{split}/{A,B,label}/<id>.png so real benchmark
layouts drop in unchanged.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigurationError, ShapeError

SPLIT_DIRS = ("A", "B", "label")


@dataclass
class BiTemporalSample:
    """Image pair [3,H,W] in [0,1] plus binary change mask [H,W]."""

    img_a: np.ndarray
    img_b: np.ndarray
    mask: np.ndarray
    id: str

    def __post_init__(self):
        if self.img_a.shape != self.img_b.shape:
            raise ShapeError(
                f"image shapes differ: {self.img_a.shape} vs {self.img_b.shape}"
            )
        if self.img_a.shape[1:] != self.mask.shape:
            raise ShapeError(
                f"mask shape {self.mask.shape} does not match images {self.img_a.shape}"
            )
        vals = np.unique(self.mask)
        if not np.isin(vals, (0, 1)).all():
            raise ShapeError(f"mask must be binary, found values {vals[:8]}")


@dataclass
class SynthSpec:
    """Generator knobs; generation is bit-deterministic per seed."""

    canvas: int = 64
    n_objects: tuple[int, int] = (3, 8)
    change_fraction: float = 0.5
    pseudo_change: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.canvas <= 0:
            raise ConfigurationError(f"canvas must be positive, got {self.canvas}")
        if not 0.0 <= self.change_fraction <= 1.0:
            raise ConfigurationError("change_fraction must be in [0, 1]")
        if self.pseudo_change < 0:
            raise ConfigurationError("pseudo_change must be >= 0")


@dataclass
class ObjectRecord:
    """One synthetic object and how it evolved between the two frames."""

    kind: str
    color: np.ndarray
    footprint_a: np.ndarray | None
    footprint_b: np.ndarray | None
    change: str  # none | add | remove | move


def _smooth_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    """Multi-octave smooth background texture [3,H,W] in roughly [0.2, 0.8]."""
    base = rng.uniform(0.35, 0.55, size=(3, 1, 1)).astype(np.float32)
    img = np.broadcast_to(base, (3, size, size)).copy()
    for res, amp in ((4, 0.12), (8, 0.07), (16, 0.04)):
        res = min(res, size)
        coarse = rng.uniform(-1.0, 1.0, size=(1, 3, res, res)).astype(np.float32)
        up = F.interpolate(
            torch.from_numpy(coarse), size=(size, size), mode="bilinear", align_corners=False
        )
        img += amp * up.numpy()[0]
    return np.clip(img, 0.15, 0.85)


def _object_color(rng: np.random.Generator) -> np.ndarray:
    # push channels away from the mid-toned background
    high = rng.integers(0, 2, size=3).astype(bool)
    color = np.where(high, rng.uniform(0.8, 1.0, 3), rng.uniform(0.0, 0.2, 3))
    return color.astype(np.float32)


def _footprint(rng: np.random.Generator, kind: str, size: int) -> np.ndarray:
    fp = np.zeros((size, size), dtype=bool)
    if kind == "rect":
        h = int(rng.integers(max(2, size // 8), max(3, size // 3)))
        w = int(rng.integers(max(2, size // 8), max(3, size // 3)))
        y = int(rng.integers(0, max(1, size - h)))
        x = int(rng.integers(0, max(1, size - w)))
        fp[y : y + h, x : x + w] = True
    elif kind == "circle":
        r = int(rng.integers(max(2, size // 10), max(3, size // 5)))
        cy = int(rng.integers(r, max(r + 1, size - r)))
        cx = int(rng.integers(r, max(r + 1, size - r)))
        yy, xx = np.ogrid[:size, :size]
        fp[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = True
    else:  # bar
        length = int(rng.integers(size // 3, max(size // 3 + 1, 2 * size // 3)))
        thick = int(rng.integers(2, max(3, size // 12)))
        y = int(rng.integers(0, max(1, size - thick)))
        x = int(rng.integers(0, max(1, size - length)))
        if rng.random() < 0.5:
            fp[y : y + thick, x : x + length] = True
        else:
            fp[x : x + length, y : y + thick] = True
    return fp


def generate_with_objects(spec: SynthSpec) -> tuple[BiTemporalSample, list[ObjectRecord]]:
    """Generate one sample plus the object records that explain its mask."""
    rng = np.random.default_rng(spec.seed)
    size = spec.canvas
    background = _smooth_noise(rng, size)

    n = int(rng.integers(spec.n_objects[0], spec.n_objects[1] + 1))
    records: list[ObjectRecord] = []
    for _ in range(n):
        kind = str(rng.choice(["rect", "circle", "bar"]))
        color = _object_color(rng)
        fp = _footprint(rng, kind, size)
        if rng.random() < spec.change_fraction:
            change = str(rng.choice(["add", "remove", "move"]))
        else:
            change = "none"
        if change == "none":
            rec = ObjectRecord(kind, color, fp, fp, "none")
        elif change == "add":
            rec = ObjectRecord(kind, color, None, fp, "add")
        elif change == "remove":
            rec = ObjectRecord(kind, color, fp, None, "remove")
        else:
            fp2 = _footprint(rng, kind, size)
            rec = ObjectRecord(kind, color, fp, fp2, "move")
        records.append(rec)

    img_a = background.copy()
    img_b = background.copy()
    mask = np.zeros((size, size), dtype=np.uint8)
    # changed objects painted last so their footprints stay on top
    for rec in sorted(records, key=lambda r: r.change != "none"):
        if rec.footprint_a is not None:
            img_a[:, rec.footprint_a] = rec.color[:, None]
        if rec.footprint_b is not None:
            img_b[:, rec.footprint_b] = rec.color[:, None]
        if rec.change != "none":
            if rec.footprint_a is not None:
                mask[rec.footprint_a] = 1
            if rec.footprint_b is not None:
                mask[rec.footprint_b] = 1

    if spec.pseudo_change > 0:
        gain = 1.0 + rng.uniform(-1.0, 1.0, size=(3, 1, 1)) * spec.pseudo_change
        bias = rng.uniform(-1.0, 1.0, size=(3, 1, 1)) * spec.pseudo_change * 0.5
        img_b = np.clip(img_b * gain + bias, 0.0, 1.0)

    sample = BiTemporalSample(
        img_a=img_a.astype(np.float32),
        img_b=img_b.astype(np.float32),
        mask=mask,
        id=f"synth_{spec.seed:08x}",
    )
    return sample, records


def generate(spec: SynthSpec) -> BiTemporalSample:
    """One synthetic bi-temporal sample, bit-identical for a given seed."""
    sample, _ = generate_with_objects(spec)
    return sample


def sample_seed(base_seed: int, index: int) -> int:
    """Stable per-sample seed derivation for dataset generation."""
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


def generate_dataset(spec: SynthSpec, n: int, root: str, split: str) -> list[str]:
    """Write ``n`` generated samples under root/split/{A,B,label}; returns ids."""
    ids = []
    for i in range(n):
        sample = generate(replace(spec, seed=sample_seed(spec.seed, i)))
        sample.id = f"{i:04d}"
        save_sample(sample, root, split)
        ids.append(sample.id)
    return ids


def augment(sample: BiTemporalSample, seed: int, crop_size: int | None = None) -> BiTemporalSample:
    """Apply one random geometric transform jointly to both images and the mask.

    Draws a random subset of {horizontal flip, vertical flip, 90-degree
    rotations}, then an optional random square crop. Deterministic per
    (sample, seed).
    """
    rng = np.random.default_rng(seed)
    img_a, img_b, mask = sample.img_a, sample.img_b, sample.mask
    if rng.random() < 0.5:  # horizontal flip
        img_a, img_b = np.flip(img_a, 2), np.flip(img_b, 2)
        mask = np.flip(mask, 1)
    if rng.random() < 0.5:  # vertical flip
        img_a, img_b = np.flip(img_a, 1), np.flip(img_b, 1)
        mask = np.flip(mask, 0)
    k = int(rng.integers(0, 4))
    if k:
        img_a = np.rot90(img_a, k, axes=(1, 2))
        img_b = np.rot90(img_b, k, axes=(1, 2))
        mask = np.rot90(mask, k, axes=(0, 1))
    if crop_size is not None:
        h, w = mask.shape
        if crop_size > h or crop_size > w:
            raise ShapeError(f"crop {crop_size} larger than image {h}x{w}")
        top = int(rng.integers(0, h - crop_size + 1))
        left = int(rng.integers(0, w - crop_size + 1))
        img_a = img_a[:, top : top + crop_size, left : left + crop_size]
        img_b = img_b[:, top : top + crop_size, left : left + crop_size]
        mask = mask[top : top + crop_size, left : left + crop_size]
    return BiTemporalSample(
        img_a=np.ascontiguousarray(img_a),
        img_b=np.ascontiguousarray(img_b),
        mask=np.ascontiguousarray(mask),
        id=sample.id,
    )


def _to_png_array(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def _from_png_array(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32) / 255.0).transpose(2, 0, 1)


def save_sample(sample: BiTemporalSample, root: str, split: str):
    for sub in SPLIT_DIRS:
        os.makedirs(os.path.join(root, split, sub), exist_ok=True)
    name = f"{sample.id}.png"
    Image.fromarray(_to_png_array(sample.img_a)).save(os.path.join(root, split, "A", name))
    Image.fromarray(_to_png_array(sample.img_b)).save(os.path.join(root, split, "B", name))
    Image.fromarray((sample.mask * 255).astype(np.uint8)).save(
        os.path.join(root, split, "label", name)
    )


def load_image(path: str) -> np.ndarray:
    """RGB PNG -> float32 [3,H,W] in [0,1]."""
    return _from_png_array(np.asarray(Image.open(path).convert("RGB")))


def load_dataset(root: str, split: str) -> list[BiTemporalSample]:
    """Load samples matched by filename across A/, B/ and label/.

    Missing counterpart files and size mismatches raise with the offending
    path named. Labels are binarized at threshold 127.
    """
    a_dir = os.path.join(root, split, "A")
    if not os.path.isdir(a_dir):
        raise FileNotFoundError(f"split directory not found: {a_dir}")
    samples = []
    for name in sorted(os.listdir(a_dir)):
        if not name.endswith(".png"):
            continue
        paths = {sub: os.path.join(root, split, sub, name) for sub in SPLIT_DIRS}
        for sub in ("B", "label"):
            if not os.path.exists(paths[sub]):
                raise FileNotFoundError(f"missing counterpart file: {paths[sub]}")
        img_a = load_image(paths["A"])
        img_b = load_image(paths["B"])
        label = np.asarray(Image.open(paths["label"]).convert("L"))
        if img_a.shape != img_b.shape or img_a.shape[1:] != label.shape:
            raise ShapeError(
                f"size mismatch within triplet {name}: A {img_a.shape[1:]}, "
                f"B {img_b.shape[1:]}, label {label.shape}"
            )
        mask = (label > 127).astype(np.uint8)
        samples.append(BiTemporalSample(img_a, img_b, mask, id=name[: -len(".png")]))
    return samples

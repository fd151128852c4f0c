"""Desk-scale synthetic video dataset: one bright anisotropic blob per clip,
translating in a class-specific direction with class-specific size, aspect,
and color, over a noisy background.

The pattern is parametric and regenerable: every clip's geometry derives
deterministically from (seed, class index, clip index), so tests can recover
ground-truth blob bounding boxes without sidecar metadata.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .prompts import EXPRESSION_CLASSES


@dataclass(frozen=True)
class BlobSpec:
    """Geometry and appearance of one clip's moving blob."""

    clip_id: str
    label: str
    fold: int
    cx0: float
    cy0: float
    vx: float
    vy: float
    sx: float
    sy: float
    color: tuple[float, float, float]
    noise: float
    background: float

    def center(self, t: int) -> tuple[float, float]:
        return self.cx0 + t * self.vx, self.cy0 + t * self.vy

    def bbox(self, t: int, image_size: int, k_sigma: float = 2.5) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) pixel box covering k_sigma standard deviations,
        clipped to the image. Inclusive of x1, y1."""
        cx, cy = self.center(t)
        x0 = max(0, int(math.floor(cx - k_sigma * self.sx)))
        x1 = min(image_size - 1, int(math.ceil(cx + k_sigma * self.sx)))
        y0 = max(0, int(math.floor(cy - k_sigma * self.sy)))
        y1 = min(image_size - 1, int(math.ceil(cy + k_sigma * self.sy)))
        return x0, y0, x1, y1


def _class_color(class_idx: int, n_classes: int) -> tuple[float, float, float]:
    hue = 2.0 * math.pi * class_idx / max(n_classes, 1)
    chans = [
        0.55 + 0.45 * math.cos(hue),
        0.55 + 0.45 * math.cos(hue - 2.0 * math.pi / 3.0),
        0.55 + 0.45 * math.cos(hue + 2.0 * math.pi / 3.0),
    ]
    return tuple(min(1.0, max(0.15, c)) for c in chans)


def clip_spec(
    seed: int,
    class_idx: int,
    clip_idx: int,
    n_classes: int,
    frames: int,
    image_size: int,
    n_folds: int,
) -> BlobSpec:
    """Deterministic geometry for one clip."""
    rng = np.random.default_rng([seed, class_idx, clip_idx])
    angle = 2.0 * math.pi * class_idx / n_classes + float(rng.uniform(-0.25, 0.25))
    speed = (image_size / 24.0) * float(rng.uniform(0.85, 1.15))
    vx, vy = speed * math.cos(angle), speed * math.sin(angle)
    # symmetric path through the image center keeps the blob in frame
    mid = (image_size - 1) / 2.0
    cx0 = mid - vx * (frames - 1) / 2.0 + float(rng.uniform(-2.0, 2.0))
    cy0 = mid - vy * (frames - 1) / 2.0 + float(rng.uniform(-2.0, 2.0))
    sx = image_size / 10.0 + 1.1 * class_idx + float(rng.uniform(0.0, 1.0))
    aspect = 1.0 + 0.35 * class_idx
    label = EXPRESSION_CLASSES[class_idx]
    return BlobSpec(
        clip_id=f"{label}_{clip_idx:04d}",
        label=label,
        fold=clip_idx % n_folds,
        cx0=cx0,
        cy0=cy0,
        vx=vx,
        vy=vy,
        sx=sx,
        sy=sx / aspect,
        color=_class_color(class_idx, n_classes),
        noise=0.04,
        background=0.08,
    )


def dataset_specs(
    n_classes: int,
    clips_per_class: int,
    seed: int,
    frames: int,
    image_size: int,
    n_folds: int = 5,
) -> list[BlobSpec]:
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if n_classes > len(EXPRESSION_CLASSES):
        raise ValueError(f"at most {len(EXPRESSION_CLASSES)} classes supported")
    if clips_per_class < 1:
        raise ValueError("clips_per_class must be positive")
    return [
        clip_spec(seed, k, i, n_classes, frames, image_size, n_folds)
        for k in range(n_classes)
        for i in range(clips_per_class)
    ]


def render_frame(spec: BlobSpec, t: int, image_size: int, rng: np.random.Generator) -> np.ndarray:
    """One (H, W, 3) float frame in [0, 1]: background + blob + pixel noise."""
    cx, cy = spec.center(t)
    ys = np.arange(image_size, dtype=np.float64)[:, None]
    xs = np.arange(image_size, dtype=np.float64)[None, :]
    intensity = np.exp(-0.5 * (((xs - cx) / spec.sx) ** 2 + ((ys - cy) / spec.sy) ** 2))
    frame = np.full((image_size, image_size, 3), spec.background, dtype=np.float64)
    frame += intensity[:, :, None] * np.asarray(spec.color)
    frame += rng.normal(0.0, spec.noise, size=frame.shape)
    return np.clip(frame, 0.0, 1.0)


def render_clip(spec: BlobSpec, frames: int, image_size: int, seed: int) -> np.ndarray:
    """(T, H, W, 3) float clip; noise stream seeded per clip."""
    rng = np.random.default_rng([seed, hash_id(spec.clip_id)])
    return np.stack([render_frame(spec, t, image_size, rng) for t in range(frames)])


def hash_id(clip_id: str) -> int:
    return int.from_bytes(hashlib.sha256(clip_id.encode()).digest()[:8], "little")


def generate_synthetic_dataset(
    out_dir: str | Path,
    n_classes: int = 2,
    clips_per_class: int = 32,
    seed: int = 0,
    frames: int = 12,
    image_size: int = 64,
    n_folds: int = 5,
) -> Path:
    """Write the clip directories, annotation table, and a generation
    manifest. Refuses to write into a non-empty directory."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"target directory {out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    specs = dataset_specs(n_classes, clips_per_class, seed, frames, image_size, n_folds)
    for spec in specs:
        clip = render_clip(spec, frames, image_size, seed)
        clip_dir = out / spec.clip_id
        clip_dir.mkdir()
        for t in range(frames):
            img = Image.fromarray((clip[t] * 255.0).round().astype(np.uint8))
            img.save(clip_dir / f"frame_{t:04d}.png")
    with open(out / "annotations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["clip_id", "label", "fold"])
        for spec in specs:
            writer.writerow([spec.clip_id, spec.label, spec.fold])
    manifest = {
        "n_classes": n_classes,
        "clips_per_class": clips_per_class,
        "seed": seed,
        "frames": frames,
        "image_size": image_size,
        "n_folds": n_folds,
    }
    (out / "generation.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_generation_manifest(root: str | Path) -> dict:
    return json.loads((Path(root) / "generation.json").read_text())


def specs_for_dataset(root: str | Path) -> dict[str, BlobSpec]:
    """Recover every clip's spec from the generation manifest."""
    m = load_generation_manifest(root)
    specs = dataset_specs(
        m["n_classes"], m["clips_per_class"], m["seed"], m["frames"], m["image_size"], m["n_folds"]
    )
    return {s.clip_id: s for s in specs}


def spec_dict(spec: BlobSpec) -> dict:
    return asdict(spec)

"""Dataset ingestion, frame sampling, preprocessing, and the stochastic
Mixup/FMix augmentation schedule.

Dataset layout: a root directory holding one subdirectory per clip (ordered
frame images, sorted by filename) plus a top-level ``annotations.csv`` with
header ``clip_id,label,fold``. Labels must come from the canonical
seven-class vocabulary so prompt texts stay aligned with label indices.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageEnhance

from .prompts import EXPRESSION_CLASSES

logger = logging.getLogger(__name__)

NORMALIZE_MEAN = (0.5, 0.5, 0.5)
NORMALIZE_STD = (0.5, 0.5, 0.5)

FRAME_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class AugmentConfig:
    """Thresholds for the one-draw augmentation branch and mixing shapes.

    One uniform p per batch: p below p_mixup_threshold picks convex pixel
    blending, p in [p_mixup_threshold, p_fmix_threshold) picks binary
    low-frequency-mask compositing, p at or above p_fmix_threshold applies
    nothing. fmix_alpha and fmix_decay_power have no published values; the
    defaults here are package choices.
    """

    p_mixup_threshold: float = 0.4
    p_fmix_threshold: float = 0.7
    mixup_alpha: float = 0.4
    fmix_alpha: float = 1.0
    fmix_decay_power: float = 3.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_mixup_threshold <= self.p_fmix_threshold <= 1.0:
            raise ValueError(
                "need 0 <= p_mixup_threshold <= p_fmix_threshold <= 1, got "
                f"{self.p_mixup_threshold}, {self.p_fmix_threshold}"
            )
        if self.mixup_alpha <= 0 or self.fmix_alpha <= 0:
            raise ValueError("Beta parameters must be positive")
        if self.fmix_decay_power <= 0:
            raise ValueError("fmix_decay_power must be positive")


@dataclass
class ClipBatch:
    """frames: (B, T, H, W, 3) normalized floats; labels: (B, C) rows on the
    simplex; ids: clip identifiers."""

    frames: torch.Tensor
    labels: torch.Tensor
    ids: list[str]

    def __post_init__(self) -> None:
        if not torch.isfinite(self.frames).all():
            raise ValueError("batch frames contain non-finite values")
        sums = self.labels.sum(dim=-1)
        if not torch.allclose(sums, torch.ones_like(sums), atol=1e-6):
            raise ValueError("label rows must sum to 1")

    def __len__(self) -> int:
        return self.frames.shape[0]


def sample_frames(length: int, count: int, train: bool, rng: np.random.Generator) -> np.ndarray:
    """Indices of a consecutive window of ``count`` frames.

    Training draws a uniformly random window start; evaluation centers the
    window. Clips shorter than ``count`` repeat their last frame.
    """
    if length < 1:
        raise ValueError("clip has no frames")
    if count < 1:
        raise ValueError("frame count must be positive")
    if length >= count:
        start = int(rng.integers(0, length - count + 1)) if train else (length - count) // 2
        return np.arange(start, start + count)
    idx = np.arange(length)
    pad = np.full(count - length, length - 1)
    return np.concatenate([idx, pad])


@dataclass(frozen=True)
class JitterParams:
    """One clip's worth of training-time augmentation decisions, drawn once
    and applied to every frame so motion stays coherent."""

    flip: bool
    crop_scale: float
    crop_dx: float
    crop_dy: float
    brightness: float
    contrast: float
    saturation: float

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "JitterParams":
        return cls(
            flip=bool(rng.random() < 0.5),
            crop_scale=float(rng.uniform(0.8, 1.0)),
            crop_dx=float(rng.random()),
            crop_dy=float(rng.random()),
            brightness=float(rng.uniform(0.8, 1.2)),
            contrast=float(rng.uniform(0.8, 1.2)),
            saturation=float(rng.uniform(0.8, 1.2)),
        )


def preprocess_frame(image: Image.Image, size: int, jitter: JitterParams | None = None) -> np.ndarray:
    """Decode one frame to a (size, size, 3) float32 array in [0, 1].

    Evaluation (jitter=None) resizes the shorter side to ``size`` and center
    crops, fully deterministic. Training applies the clip's jitter: scaled
    random crop, horizontal flip, and color adjustments.
    """
    img = image.convert("RGB")
    w, h = img.size
    if jitter is None:
        scale = size / min(w, h)
        img = img.resize((max(size, round(w * scale)), max(size, round(h * scale))), Image.BILINEAR)
        w, h = img.size
        left, top = (w - size) // 2, (h - size) // 2
        img = img.crop((left, top, left + size, top + size))
    else:
        crop = max(1, round(min(w, h) * jitter.crop_scale))
        left = round((w - crop) * jitter.crop_dx)
        top = round((h - crop) * jitter.crop_dy)
        img = img.crop((left, top, left + crop, top + crop)).resize((size, size), Image.BILINEAR)
        if jitter.flip:
            img = img.transpose(Image.FLIP_LEFT_RIGHT)
        img = ImageEnhance.Brightness(img).enhance(jitter.brightness)
        img = ImageEnhance.Contrast(img).enhance(jitter.contrast)
        img = ImageEnhance.Color(img).enhance(jitter.saturation)
    arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.shape != (size, size, 3):
        raise ValueError(f"preprocessing produced shape {arr.shape}, expected ({size}, {size}, 3)")
    return arr


def normalize_frames(frames: np.ndarray) -> np.ndarray:
    mean = np.asarray(NORMALIZE_MEAN, dtype=np.float32)
    std = np.asarray(NORMALIZE_STD, dtype=np.float32)
    return (frames - mean) / std


def choose_augmentation(rng: np.random.Generator, cfg: AugmentConfig) -> str:
    """One uniform draw decides the batch's augmentation branch."""
    p = float(rng.random())
    if p < cfg.p_mixup_threshold:
        return "mixup"
    if p < cfg.p_fmix_threshold:
        return "fmix"
    return "none"


def apply_mixup(
    frames: torch.Tensor, labels: torch.Tensor, alpha: float, rng: np.random.Generator
):
    """Convex blend of the batch with a permuted copy of itself; one lambda
    for the whole batch, labels mixed with the same weight."""
    b = frames.shape[0]
    if b < 2:
        warnings.warn("mixup skipped: batch has fewer than 2 clips", stacklevel=2)
        return frames, labels, {"kind": "none"}
    lam = float(rng.beta(alpha, alpha))
    perm = torch.from_numpy(rng.permutation(b))
    mixed = lam * frames + (1.0 - lam) * frames[perm]
    mixed_labels = lam * labels + (1.0 - lam) * labels[perm]
    return mixed, mixed_labels, {"kind": "mixup", "lam": lam, "perm": perm.tolist()}


def fmix_mask(height: int, width: int, lam: float, decay_power: float, rng: np.random.Generator) -> np.ndarray:
    """Binary (height, width) mask whose ones cover round(lam*H*W) pixels,
    placed on the highest values of a low-frequency random field."""
    fy = np.fft.fftfreq(height)[:, None]
    fx = np.fft.rfftfreq(width)[None, :]
    freq = np.sqrt(fx * fx + fy * fy)
    floor = 1.0 / max(height, width)
    scale = 1.0 / np.maximum(freq, floor) ** decay_power
    spec = scale * (rng.normal(size=scale.shape) + 1j * rng.normal(size=scale.shape))
    field = np.fft.irfft2(spec, s=(height, width))
    k = int(round(float(lam) * height * width))
    mask = np.zeros(height * width, dtype=np.float32)
    if k > 0:
        top = np.argpartition(field.reshape(-1), -k)[-k:]
        mask[top] = 1.0
    return mask.reshape(height, width)


def apply_fmix(
    frames: torch.Tensor,
    labels: torch.Tensor,
    alpha: float,
    decay_power: float,
    rng: np.random.Generator,
):
    """Composite the batch with a permuted copy through one binary
    low-frequency mask, shared across every frame of every clip; labels mixed
    by the mask's exact area ratio."""
    b, _, h, w, _ = frames.shape
    if b < 2:
        warnings.warn("fmix skipped: batch has fewer than 2 clips", stacklevel=2)
        return frames, labels, {"kind": "none"}
    lam = float(rng.beta(alpha, alpha))
    mask = fmix_mask(h, w, lam, decay_power, rng)
    lam_actual = float(mask.mean())
    perm = torch.from_numpy(rng.permutation(b))
    m = torch.from_numpy(mask).to(frames.dtype)[None, None, :, :, None]
    mixed = m * frames + (1.0 - m) * frames[perm]
    mixed_labels = lam_actual * labels + (1.0 - lam_actual) * labels[perm]
    return mixed, mixed_labels, {
        "kind": "fmix",
        "lam": lam,
        "lam_actual": lam_actual,
        "perm": perm.tolist(),
    }


def apply_augmentation(
    frames: torch.Tensor, labels: torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator
):
    kind = choose_augmentation(rng, cfg)
    if kind == "mixup":
        return apply_mixup(frames, labels, cfg.mixup_alpha, rng)
    if kind == "fmix":
        return apply_fmix(frames, labels, cfg.fmix_alpha, cfg.fmix_decay_power, rng)
    return frames, labels, {"kind": "none"}


@dataclass(frozen=True)
class ClipEntry:
    clip_id: str
    label: str
    fold: int
    path: Path


class VideoDataset:
    """Frame-folder dataset with a csv annotation table."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        table = self.root / "annotations.csv"
        if not table.is_file():
            raise FileNotFoundError(f"missing annotation table {table}")
        entries: list[ClipEntry] = []
        with open(table, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["clip_id", "label", "fold"]:
                raise ValueError(
                    f"{table}: expected header clip_id,label,fold, got {reader.fieldnames}"
                )
            for row in reader:
                label = row["label"]
                if label not in EXPRESSION_CLASSES:
                    raise ValueError(f"{table}: label {label!r} outside the class set")
                entries.append(
                    ClipEntry(
                        clip_id=row["clip_id"],
                        label=label,
                        fold=int(row["fold"]),
                        path=self.root / row["clip_id"],
                    )
                )
        if not entries:
            raise ValueError(f"{table}: no clips listed")
        self.entries = entries
        present = {e.label for e in entries}
        self.classes = [c for c in EXPRESSION_CLASSES if c in present]
        self._class_index = {c: i for i, c in enumerate(self.classes)}

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def folds(self) -> list[int]:
        return sorted({e.fold for e in self.entries})

    def label_index(self, i: int) -> int:
        return self._class_index[self.entries[i].label]

    def labels(self) -> np.ndarray:
        return np.array([self.label_index(i) for i in range(len(self))])

    def frame_paths(self, i: int) -> list[Path]:
        clip_dir = self.entries[i].path
        paths = sorted(
            p for p in clip_dir.iterdir() if p.suffix.lower() in FRAME_EXTENSIONS
        )
        if not paths:
            raise FileNotFoundError(f"clip {self.entries[i].clip_id} has no frames")
        return paths

    def indices_in_folds(self, folds) -> list[int]:
        folds = set(folds)
        return [i for i in range(len(self)) if self.entries[i].fold in folds]

    def indices_not_in_folds(self, folds) -> list[int]:
        folds = set(folds)
        return [i for i in range(len(self)) if self.entries[i].fold not in folds]


def _clip_rng(seed: int, epoch: int, clip_id: str) -> np.random.Generator:
    digest = hashlib.sha256(clip_id.encode()).digest()
    return np.random.default_rng([seed, epoch, int.from_bytes(digest[:8], "little")])


class ClipLoader:
    """Deterministic batch stream over a dataset subset.

    Per-clip randomness (window start, jitter) derives from (seed, epoch,
    clip id), and batch-level augmentation randomness from (seed, epoch,
    batch index), so the stream is independent of scheduling order.
    """

    def __init__(
        self,
        dataset: VideoDataset,
        indices: list[int],
        frames: int,
        image_size: int,
        batch_size: int,
        train: bool,
        augment: AugmentConfig | None = None,
        seed: int = 0,
        strict: bool = False,
        jitter: bool = True,
    ):
        if not indices:
            raise ValueError("loader got an empty index list")
        self.dataset = dataset
        self.indices = list(indices)
        self.frames = frames
        self.image_size = image_size
        self.batch_size = batch_size
        self.train = train
        self.augment = augment
        self.seed = seed
        self.strict = strict
        self.jitter = jitter

    def steps_per_epoch(self) -> int:
        return (len(self.indices) + self.batch_size - 1) // self.batch_size

    def _load_clip(self, i: int, epoch: int) -> np.ndarray | None:
        entry = self.dataset.entries[i]
        rng = _clip_rng(self.seed, epoch, entry.clip_id)
        try:
            paths = self.dataset.frame_paths(i)
            window = sample_frames(len(paths), self.frames, self.train, rng)
            jitter = JitterParams.draw(rng) if (self.train and self.jitter) else None
            frames = []
            for t in window:
                with Image.open(paths[t]) as img:
                    frames.append(preprocess_frame(img, self.image_size, jitter))
        except (OSError, SyntaxError, ValueError) as err:
            if self.strict:
                raise
            logger.warning("skipping clip %s: %s", entry.clip_id, err)
            return None
        return normalize_frames(np.stack(frames))

    def iter_epoch(self, epoch: int = 0):
        order = np.array(self.indices)
        if self.train:
            order = np.random.default_rng([self.seed, epoch, 0x0DDE]).permutation(order)
        n_classes = self.dataset.n_classes
        for b, start in enumerate(range(0, len(order), self.batch_size)):
            chunk = order[start : start + self.batch_size]
            clips, labels, ids = [], [], []
            for i in chunk:
                arr = self._load_clip(int(i), epoch)
                if arr is None:
                    continue
                clips.append(torch.from_numpy(arr))
                one_hot = torch.zeros(n_classes)
                one_hot[self.dataset.label_index(int(i))] = 1.0
                labels.append(one_hot)
                ids.append(self.dataset.entries[int(i)].clip_id)
            if not clips:
                continue
            frames = torch.stack(clips)
            label_mat = torch.stack(labels)
            info = {"kind": "none"}
            if self.train and self.augment is not None:
                rng = np.random.default_rng([self.seed, epoch, b, 0xAA])
                frames, label_mat, info = apply_augmentation(
                    frames, label_mat, self.augment, rng
                )
            batch = ClipBatch(frames=frames, labels=label_mat, ids=ids)
            batch.augment_info = info
            yield batch

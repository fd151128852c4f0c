"""Gradient-weighted attention rollout heatmaps and embedding exports.

The rollout is one concrete instantiation: per block, attention probabilities
are weighted by the positive gradient of the predicted-class logit, averaged
over heads, mixed with the residual identity, row-normalized, and multiplied
across blocks. The class-token row of the product, restricted to patch
columns, becomes the per-frame map.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import ClipLoader
from .host import DualEncoderModel

logger = logging.getLogger(__name__)


def gradient_attention_rollout(
    model: DualEncoderModel,
    clip: torch.Tensor,
    texts: list[str] | None = None,
) -> tuple[np.ndarray, int]:
    """Per-frame saliency maps for one clip.

    clip: (T, H, W, 3) or (1, T, H, W, 3) normalized frames.
    Returns (maps, predicted_class) where maps is (T, grid, grid) with each
    frame min-max normalized to [0, 1]. Model parameters are left untouched
    (gradients are cleared afterwards).
    """
    cfg = model.config
    if clip.dim() == 4:
        clip = clip.unsqueeze(0)
    if clip.shape[0] != 1:
        raise ValueError(f"rollout takes a single clip, got batch {clip.shape[0]}")
    model.eval()
    clip = clip.to(cfg.dtype).clone().requires_grad_(True)
    f_v = model.encode_video(clip, record_attention=True)
    sink = model.last_vision_attention
    f_t = model.encode_text(texts)
    logits = f_v @ f_t.T / model.temperature
    pred = int(logits[0].argmax())
    logits[0, pred].backward()

    t = cfg.frames
    cls_idx = model.vision_class_index
    n_prompts = model.n_vision_prompts
    rollout: torch.Tensor | None = None
    with torch.no_grad():
        for attn in sink:
            if attn.grad is None:
                raise RuntimeError("attention gradients missing; graph was detached")
            weighted = torch.relu(attn.grad * attn).mean(dim=1)  # (T, L, L)
            length = weighted.shape[-1]
            mixed = 0.5 * (weighted + torch.eye(length, dtype=weighted.dtype))
            mixed = mixed / mixed.sum(dim=-1, keepdim=True)
            rollout = mixed if rollout is None else mixed @ rollout
    model.zero_grad(set_to_none=True)

    row = rollout[:, cls_idx, :]                      # (T, L)
    patches = row[:, n_prompts + 1 :]                 # drop prompts + class token
    grid = cfg.image_size // cfg.patch_size
    maps = patches.reshape(t, grid, grid).detach().cpu().numpy().astype(np.float64)
    out = np.zeros_like(maps)
    for i in range(t):
        lo, hi = maps[i].min(), maps[i].max()
        if hi - lo > 0:
            out[i] = (maps[i] - lo) / (hi - lo)
    return out, pred


def export_attention(
    model: DualEncoderModel,
    clip: torch.Tensor,
    out_dir: str | Path,
    texts: list[str] | None = None,
    upscale: int = 16,
) -> dict:
    """Write per-frame heatmap images plus the raw values as CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    maps, pred = gradient_attention_rollout(model, clip, texts)
    image_paths = []
    for i, frame_map in enumerate(maps):
        img = Image.fromarray((frame_map * 255.0).round().astype(np.uint8), mode="L")
        if upscale > 1:
            img = img.resize(
                (img.width * upscale, img.height * upscale), Image.NEAREST
            )
        path = out_dir / f"attention_{i:04d}.png"
        img.save(path)
        image_paths.append(path)
    csv_path = out_dir / "attention_raw.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "row", "col", "value"])
        for i, frame_map in enumerate(maps):
            for r in range(frame_map.shape[0]):
                for c in range(frame_map.shape[1]):
                    writer.writerow([i, r, c, f"{frame_map[r, c]:.10g}"])
    return {"maps": maps, "pred": pred, "images": image_paths, "csv": csv_path}


def collect_embeddings(
    model: DualEncoderModel, loader: ClipLoader
) -> tuple[list[str], np.ndarray, np.ndarray]:
    """(clip_ids, labels, embeddings) over an eval-mode loader."""
    if loader.train:
        raise ValueError("embedding export needs an eval-mode loader")
    model.eval()
    ids: list[str] = []
    labels: list[int] = []
    rows: list[np.ndarray] = []
    with torch.no_grad():
        for batch in loader.iter_epoch(0):
            f_v = model.encode_video(batch.frames.to(model.config.dtype))
            rows.append(f_v.cpu().numpy())
            ids.extend(batch.ids)
            labels.extend(int(i) for i in batch.labels.argmax(dim=-1))
    return ids, np.array(labels), np.concatenate(rows)


def export_embeddings(
    model: DualEncoderModel,
    loader: ClipLoader,
    out_csv: str | Path,
    method: str = "raw",
    seed: int = 0,
    perplexity: float = 30.0,
) -> np.ndarray:
    """Write per-clip embeddings (raw) or a seeded 2-d stochastic-neighbor
    projection. Returns the written coordinate array."""
    if method not in ("raw", "tsne"):
        raise ValueError(f"method must be raw or tsne, got {method!r}")
    ids, labels, emb = collect_embeddings(model, loader)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = min(perplexity, max(1.0, len(ids) - 1.0))
        coords = TSNE(
            n_components=2,
            random_state=seed,
            perplexity=perplexity,
            init="pca",
            method="exact",
        ).fit_transform(emb.astype(np.float64))
        header = ["clip_id", "label", "x", "y"]
    else:
        coords = emb
        header = ["clip_id", "label"] + [f"e_{k}" for k in range(emb.shape[1])]
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, clip_id in enumerate(ids):
            writer.writerow([clip_id, int(labels[i]), *(f"{v:.10g}" for v in coords[i])])
    return coords

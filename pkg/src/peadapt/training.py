"""Optimization loop: per-component learning rates, cosine schedule with
linear warmup, soft cross-entropy, holdout-based checkpoint selection, and
dead-parameter tracking.

The optimizer is decoupled-weight-decay Adam with moment defaults
(0.9, 0.999, 1e-8); those moment values are package defaults, not published
settings. Adapters and prompts train at separate rates; the backbone never
trains and the loop hard-fails if it finds a trainable backbone array.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import AugmentConfig, ClipLoader, VideoDataset
from .evaluation import evaluate, prompts_for
from .host import DualEncoderModel
from .weights import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

BACKBONE_PREFIXES = ("vision.", "text.")


@dataclass(frozen=True)
class TrainingConfig:
    """Optimization knobs. Defaults follow the published configuration for
    the 30-epoch regime; shorter presets only change epochs/warmup."""

    batch_size: int = 8
    epochs: int = 30
    lr_adapters: float = 2e-4
    lr_prompts: float = 3e-5
    weight_decay: float = 0.01
    warmup_epochs: int = 3
    scheduler: str = "cosine"
    seed: int = 0
    precision: str = "float32"
    grad_clip: float = 0.0          # 0 disables clipping
    lr_global: float = 0.0          # informational only, see build_param_groups
    holdout_fraction: float = 0.1
    jitter: bool = True

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr_adapters <= 0 or self.lr_prompts <= 0:
            raise ValueError("learning rates must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.scheduler != "cosine":
            raise ValueError(f"unsupported scheduler {self.scheduler!r}")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs < epochs, got {self.warmup_epochs}, {self.epochs}"
            )
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")


def build_param_groups(model: DualEncoderModel, cfg: TrainingConfig) -> list[dict]:
    """Two groups: adapters at lr_adapters, prompts at lr_prompts, both with
    the shared weight decay. A trainable temperature rides in the adapter
    group. Any trainable backbone array is a hard error."""
    for name, p in model.named_parameters():
        if p.requires_grad and name.startswith(BACKBONE_PREFIXES):
            raise RuntimeError(
                f"backbone parameter {name} is trainable; the backbone must stay frozen"
            )
    if cfg.lr_global:
        logger.info(
            "lr_global=%g requested; component rates (%g adapters, %g prompts) "
            "remain the configuration of record and are used instead",
            cfg.lr_global, cfg.lr_adapters, cfg.lr_prompts,
        )
    split = model.trainable_parameters()
    groups = []
    if split["adapters"]:
        groups.append(
            {"params": split["adapters"], "lr": cfg.lr_adapters,
             "weight_decay": cfg.weight_decay, "name": "adapters"}
        )
    if split["prompts"]:
        groups.append(
            {"params": split["prompts"], "lr": cfg.lr_prompts,
             "weight_decay": cfg.weight_decay, "name": "prompts"}
        )
    if not groups:
        raise RuntimeError("no trainable parameters: enable adapters or prompts")
    return groups


def make_optimizer(model: DualEncoderModel, cfg: TrainingConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(build_param_groups(model, cfg), betas=(0.9, 0.999), eps=1e-8)


def lr_at(step: int, total_steps: int, warmup_steps: int) -> float:
    """Schedule multiplier: linear warmup 0 -> 1 over warmup_steps, then a
    half-cosine from 1 down to exactly 0 at the last queried step
    (total_steps - 1). Steps at or past total_steps stay 0."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("need 0 <= warmup_steps < total_steps")
    if step >= total_steps:
        return 0.0
    if step < warmup_steps:
        return step / warmup_steps
    span = max(total_steps - 1 - warmup_steps, 1)
    progress = (step - warmup_steps) / span
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def set_learning_rates(optimizer: torch.optim.Optimizer, cfg: TrainingConfig, mult: float) -> dict:
    base = {"adapters": cfg.lr_adapters, "prompts": cfg.lr_prompts}
    applied = {}
    for group in optimizer.param_groups:
        name = group.get("name", "adapters")
        group["lr"] = base[name] * mult
        applied[f"lr_{name[0]}"] = group["lr"]
    applied.setdefault("lr_p", 0.0)
    return applied


def soft_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of -sum_k targets_k * log softmax(logits)_k.
    Accepts one-hot or soft target rows."""
    log_probs = torch.log_softmax(logits, dim=-1)
    return -(targets * log_probs).sum(dim=-1).mean()


def _grad_norms(model: DualEncoderModel) -> dict[str, float]:
    norms = {}
    for name, p in model.named_parameters():
        if p.requires_grad and p.grad is not None:
            norms[name] = float(p.grad.norm())
    return norms


def train_step(
    model: DualEncoderModel,
    optimizer: torch.optim.Optimizer,
    frames: torch.Tensor,
    labels: torch.Tensor,
    texts: list[str],
    batch_ids: list[str],
    grad_clip: float = 0.0,
) -> tuple[float, torch.Tensor]:
    """One optimization step. Returns (loss value, detached logits)."""
    model.train()
    optimizer.zero_grad()
    f_t = model.encode_text(texts)
    f_v = model.encode_video(frames.to(model.config.dtype))
    logits = f_v @ f_t.T / model.temperature
    loss = soft_cross_entropy(logits, labels.to(logits.dtype))
    loss.backward()
    if not torch.isfinite(loss):
        lrs = {g.get("name", "?"): g["lr"] for g in optimizer.param_groups}
        norms = _grad_norms(model)
        worst = sorted(norms.items(), key=lambda kv: -kv[1])[:5]
        raise RuntimeError(
            "non-finite loss "
            f"{float(loss.detach())} on batch {batch_ids}; lrs={lrs}; "
            f"largest grad norms={worst}"
        )
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(
            [p for g in optimizer.param_groups for p in g["params"]], grad_clip
        )
    optimizer.step()
    return float(loss.detach()), logits.detach()


def stratified_holdout(
    labels: np.ndarray, indices: list[int], fraction: float, seed: int
) -> tuple[list[int], list[int]]:
    """Split indices into (train, holdout), holding out about ``fraction`` of
    each class. Classes with a single clip stay entirely in train."""
    if fraction <= 0:
        return sorted(indices), []
    train, held = [], []
    for cls in np.unique(labels[indices]):
        members = [i for i in indices if labels[i] == cls]
        rng = np.random.default_rng([seed, int(cls), 0x1707])
        members = [members[j] for j in rng.permutation(len(members))]
        n_hold = min(len(members) - 1, max(1, round(fraction * len(members))))
        if len(members) < 2:
            n_hold = 0
        held.extend(members[:n_hold])
        train.extend(members[n_hold:])
    return sorted(train), sorted(held)


@dataclass
class TrainResult:
    log_rows: list[dict]
    step_losses: list[float]
    step_lrs: list[dict]
    best_path: Path
    final_path: Path
    best_war: float
    touched_params: set[str]
    train_indices: list[int]
    holdout_indices: list[int]


def train_loop(
    dataset: VideoDataset,
    cfg: TrainingConfig,
    model: DualEncoderModel,
    out_dir: str | Path,
    train_indices: list[int] | None = None,
    texts: list[str] | None = None,
    augment: AugmentConfig | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Full training run over the given indices (default: whole dataset).

    A stratified holdout carved from the training indices drives best-WAR
    checkpoint selection; with holdout_fraction=0 the validation metrics are
    computed on the training split itself. Writes best.npz, final.npz, and
    train_log.jsonl under out_dir. Deterministic for a fixed seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if train_indices is None:
        train_indices = list(range(len(dataset)))
    texts = texts if texts is not None else prompts_for(model, dataset.classes)
    if len(texts) != dataset.n_classes:
        raise ValueError(f"{len(texts)} prompts for {dataset.n_classes} classes")

    train_idx, holdout_idx = stratified_holdout(
        dataset.labels(), train_indices, cfg.holdout_fraction, cfg.seed
    )
    eval_idx = holdout_idx if holdout_idx else train_idx
    loader = ClipLoader(
        dataset, train_idx, frames=model.config.frames,
        image_size=model.config.image_size, batch_size=cfg.batch_size,
        train=True, augment=augment, seed=cfg.seed, jitter=cfg.jitter,
    )
    holdout_loader = ClipLoader(
        dataset, eval_idx, frames=model.config.frames,
        image_size=model.config.image_size, batch_size=cfg.batch_size,
        train=False, seed=cfg.seed,
    )
    optimizer = make_optimizer(model, cfg)
    spe = loader.steps_per_epoch()
    total_steps = max(cfg.epochs * spe, 1)
    warmup_steps = cfg.warmup_epochs * spe

    global_step = 0
    start_epoch = 0
    if resume_from is not None:
        meta = load_checkpoint(model, resume_from, optimizer=optimizer)
        global_step = int(meta["step"])
        start_epoch = global_step // spe
        logger.info("resumed from %s at step %d (epoch %d)", resume_from, global_step, start_epoch)

    result = TrainResult(
        log_rows=[], step_losses=[], step_lrs=[],
        best_path=out_dir / "best.npz", final_path=out_dir / "final.npz",
        best_war=-1.0, touched_params=set(),
        train_indices=train_idx, holdout_indices=holdout_idx,
    )
    holdout_ids = [dataset.entries[i].clip_id for i in holdout_idx]
    if cfg.epochs == 0:
        extra = {"epoch": 0, "war": None, "holdout_ids": holdout_ids}
        save_checkpoint(model, result.final_path, optimizer=optimizer, step=0, extra=extra)
        save_checkpoint(model, result.best_path, optimizer=optimizer, step=0, extra=extra)
        _write_log(out_dir, result.log_rows)
        return result

    trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    for epoch in range(start_epoch, cfg.epochs):
        epoch_losses = []
        aug_counts = {"mixup": 0, "fmix": 0, "none": 0}
        lrs = {"lr_a": 0.0, "lr_p": 0.0}
        for batch in loader.iter_epoch(epoch):
            mult = lr_at(global_step, total_steps, warmup_steps)
            lrs = set_learning_rates(optimizer, cfg, mult)
            loss, _ = train_step(
                model, optimizer, batch.frames, batch.labels, texts,
                batch.ids, grad_clip=cfg.grad_clip,
            )
            aug_counts[getattr(batch, "augment_info", {"kind": "none"})["kind"]] += 1
            for name, p in trainable:
                if p.grad is not None and bool((p.grad != 0).any()):
                    result.touched_params.add(name)
            result.step_losses.append(loss)
            result.step_lrs.append(dict(lrs, step=global_step))
            epoch_losses.append(loss)
            global_step += 1
        res = evaluate(model, holdout_loader, texts=texts)
        row = {
            "epoch": epoch,
            "step": global_step,
            "loss": float(np.mean(epoch_losses)) if epoch_losses else None,
            "lr_a": lrs["lr_a"],
            "lr_p": lrs["lr_p"],
            "uar": res.report.uar,
            "war": res.report.war,
            "aug": aug_counts,
        }
        result.log_rows.append(row)
        logger.info(
            "epoch %d: loss %.4f uar %.4f war %.4f",
            epoch, row["loss"], row["uar"], row["war"],
        )
        if res.report.war > result.best_war:
            result.best_war = res.report.war
            save_checkpoint(model, result.best_path, optimizer=optimizer, step=global_step,
                            extra={"epoch": epoch, "war": res.report.war,
                                   "holdout_ids": holdout_ids})
    save_checkpoint(model, result.final_path, optimizer=optimizer, step=global_step,
                    extra={"epoch": cfg.epochs - 1, "war": result.best_war,
                           "holdout_ids": holdout_ids})
    _write_log(out_dir, result.log_rows)
    return result


def _write_log(out_dir: Path, rows: list[dict]) -> None:
    with open(out_dir / "train_log.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")

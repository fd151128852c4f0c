"""Deterministic evaluation over clip datasets and k-fold orchestration."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ClipLoader, VideoDataset
from .host import DualEncoderModel
from .metrics import ConfusionMatrix, MetricsReport, argmax_lowest_index, compute_metrics
from .prompts import class_prompts_for

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    report: MetricsReport
    confusion: ConfusionMatrix
    rows: list[tuple]          # (clip_id, true_idx, pred_idx, *probs)
    logits: np.ndarray         # (N, C) raw model outputs, row order == rows

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        n_classes = self.confusion.counts.shape[0]
        header = ["clip_id", "true", "pred"] + [f"prob_{k}" for k in range(n_classes)]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(self.rows)
        return path


def prompts_for(model: DualEncoderModel, classes) -> list[str]:
    return class_prompts_for(
        classes,
        mode=model.prompt_config.text_mode,
        description_file=model.prompt_config.description_file,
    )


def evaluate(
    model: DualEncoderModel,
    loader: ClipLoader,
    texts: list[str] | None = None,
    out_csv: str | Path | None = None,
) -> EvalResult:
    """Run the model over an eval-mode loader and score argmax predictions.

    Text embeddings are computed once; per-clip probabilities come from the
    cosine/temperature softmax. Fully deterministic for a fixed loader.
    """
    if loader.train:
        raise ValueError("evaluate needs an eval-mode loader (train=False)")
    texts = texts if texts is not None else prompts_for(model, loader.dataset.classes)
    n_classes = len(texts)
    model.eval()
    rows: list[tuple] = []
    logits_rows: list[np.ndarray] = []
    true_all: list[int] = []
    pred_all: list[int] = []
    with torch.no_grad():
        f_t = model.encode_text(texts)
        for batch in loader.iter_epoch(0):
            f_v = model.encode_video(batch.frames.to(model.config.dtype))
            logits = f_v @ f_t.T / model.temperature
            probs = torch.softmax(logits, dim=-1).cpu().numpy()
            pred = argmax_lowest_index(logits.cpu().numpy())
            true = batch.labels.argmax(dim=-1).cpu().numpy()
            for i, clip_id in enumerate(batch.ids):
                rows.append((clip_id, int(true[i]), int(pred[i]), *probs[i].tolist()))
            logits_rows.append(logits.cpu().numpy())
            true_all.extend(int(t) for t in true)
            pred_all.extend(int(p) for p in pred)
    confusion = ConfusionMatrix.from_predictions(
        np.array(true_all), np.array(pred_all), n_classes
    )
    report = compute_metrics(confusion)
    result = EvalResult(
        report=report,
        confusion=confusion,
        rows=rows,
        logits=np.concatenate(logits_rows) if logits_rows else np.zeros((0, n_classes)),
    )
    if out_csv is not None:
        result.write_csv(out_csv)
    return result


@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    checkpoint: Path


@dataclass
class KFoldResult:
    folds: list[FoldResult]
    mean_uar: float
    mean_war: float
    per_fold: dict = field(default_factory=dict)

    def __str__(self) -> str:
        lines = [
            f"fold {f.fold}: UAR {f.report.uar:.4f}  WAR {f.report.war:.4f}"
            for f in self.folds
        ]
        lines.append(f"mean:   UAR {self.mean_uar:.4f}  WAR {self.mean_war:.4f}")
        return "\n".join(lines)


def run_kfold(
    dataset: VideoDataset,
    k: int,
    train_cfg,
    out_dir: str | Path,
    model_factory,
) -> KFoldResult:
    """Train once per held-out fold and average UAR/WAR arithmetically.

    model_factory() must return a fresh model per fold. k=1 degenerates to a
    single run trained and evaluated on the whole dataset (no held-out fold),
    useful only for smoke checks.
    """
    from .training import train_loop  # deferred: training imports this module
    from .weights import load_checkpoint

    if k < 1:
        raise ValueError("k must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fold_ids = dataset.folds
    if k > 1:
        if len(fold_ids) < k:
            raise ValueError(f"dataset has folds {fold_ids}, cannot run k={k}")
        fold_ids = fold_ids[:k]
    results: list[FoldResult] = []
    for fold in fold_ids if k > 1 else [None]:
        if fold is None:
            train_idx = list(range(len(dataset)))
            eval_idx = train_idx
            tag = "all"
        else:
            train_idx = dataset.indices_not_in_folds([fold])
            eval_idx = dataset.indices_in_folds([fold])
            if not eval_idx:
                raise ValueError(f"fold {fold} has no clips")
            assert not set(train_idx) & set(eval_idx)
            assert sorted(train_idx + eval_idx) == list(range(len(dataset)))
            tag = str(fold)
        model = model_factory()
        run_dir = out_dir / f"fold_{tag}"
        outcome = train_loop(dataset, train_cfg, model, run_dir, train_indices=train_idx)
        load_checkpoint(model, outcome.best_path)
        eval_loader = ClipLoader(
            dataset,
            eval_idx,
            frames=model.config.frames,
            image_size=model.config.image_size,
            batch_size=train_cfg.batch_size,
            train=False,
            seed=train_cfg.seed,
        )
        res = evaluate(model, eval_loader, out_csv=run_dir / "predictions.csv")
        results.append(
            FoldResult(fold=-1 if fold is None else fold, report=res.report,
                       checkpoint=outcome.best_path)
        )
        logger.info("fold %s: UAR %.4f WAR %.4f", tag, res.report.uar, res.report.war)
    mean_uar = float(np.mean([r.report.uar for r in results]))
    mean_war = float(np.mean([r.report.war for r in results]))
    return KFoldResult(folds=results, mean_uar=mean_uar, mean_war=mean_war)

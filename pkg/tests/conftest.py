from dataclasses import dataclass
from pathlib import Path

import pytest

from peadapt.data import VideoDataset
from peadapt.host import DualEncoderModel, HostConfig
from peadapt.synthetic import generate_synthetic_dataset
from peadapt.training import TrainingConfig, TrainResult, train_loop


@pytest.fixture(scope="session")
def full_model():
    """ViT-B/16-shaped dual encoder. Expensive (~150M params); shared by the
    audit and acceptance tests, never run forward at this size."""
    return DualEncoderModel(HostConfig.full(), seed=0)


@dataclass
class OverfitRun:
    root: Path
    dataset: VideoDataset
    model: DualEncoderModel
    cfg: TrainingConfig
    result: TrainResult
    out_dir: Path


# Desk-scale learning rates: the published rates (2e-4 / 3e-5) assume a
# pretrained backbone; a randomly initialized toy backbone needs larger
# steps to memorize 64 clips within the 200-step budget.
OVERFIT_CFG = dict(
    epochs=25, warmup_epochs=2, lr_adapters=5e-3, lr_prompts=5e-4,
    holdout_fraction=0.0, jitter=False, seed=0,
)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory) -> OverfitRun:
    """Toy model trained 200 steps on a synthetic 2-class dataset (64 clips).
    Shared by trainer, evaluator, visualization, and acceptance tests."""
    root = tmp_path_factory.mktemp("overfit_data") / "clips"
    generate_synthetic_dataset(
        root, n_classes=2, clips_per_class=32, seed=0, frames=8, image_size=64
    )
    dataset = VideoDataset(root)
    model = DualEncoderModel(HostConfig(), seed=0)
    cfg = TrainingConfig(**OVERFIT_CFG)
    out_dir = tmp_path_factory.mktemp("overfit_out")
    result = train_loop(dataset, cfg, model, out_dir, augment=None)
    return OverfitRun(
        root=root, dataset=dataset, model=model, cfg=cfg,
        result=result, out_dir=out_dir,
    )

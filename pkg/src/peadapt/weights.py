"""Named-array containers for backbone weights and training checkpoints.

Backbone container: a ``.npz`` archive plus a sidecar name-mapping manifest
(``<archive>.map``, plain text, one ``source_name -> target_name`` line per
array). The manifest lets archives produced under other naming schemes load
without renaming arrays in place.

Checkpoint container: the same archive format holding the trainable arrays
(adapters, prompts, temperature when trainable) together with the host
config digest, the global step, and optimizer moments. Loading rejects a
digest mismatch so a checkpoint cannot silently run under a different
architecture.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .host import DualEncoderModel

logger = logging.getLogger(__name__)

BACKBONE_PREFIXES = ("vision.", "text.")
META_KEY = "__meta__"


def _is_backbone(name: str) -> bool:
    return name.startswith(BACKBONE_PREFIXES) or name == "temperature"


def backbone_state(model: DualEncoderModel) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy()
        for name, p in model.named_parameters()
        if _is_backbone(name)
    }


def trainable_state(model: DualEncoderModel) -> dict[str, np.ndarray]:
    return {
        name: p.detach().cpu().numpy()
        for name, p in model.named_parameters()
        if p.requires_grad
    }


def manifest_path(archive: str | Path) -> Path:
    archive = Path(archive)
    return archive.with_name(archive.name + ".map")


def write_manifest(path: Path, mapping: dict[str, str]) -> None:
    lines = [f"{src} -> {tgt}" for src, tgt in sorted(mapping.items())]
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise FileNotFoundError(f"missing name-mapping manifest {path}")
    mapping: dict[str, str] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if " -> " not in line:
            raise ValueError(f"{path}:{ln}: expected 'source_name -> target_name', got {line!r}")
        src, tgt = (part.strip() for part in line.split(" -> ", 1))
        mapping[src] = tgt
    return mapping


def export_backbone(model: DualEncoderModel, archive: str | Path) -> Path:
    """Write every backbone array plus an identity name manifest."""
    archive = Path(archive)
    state = backbone_state(model)
    np.savez(archive, **state)
    if archive.suffix != ".npz":
        archive = archive.with_name(archive.name + ".npz")
    write_manifest(manifest_path(archive), {n: n for n in state})
    return archive


def _assign(model: DualEncoderModel, updates: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, arr in updates.items():
            # as_tensor keeps 0-d arrays 0-d (ascontiguousarray would not)
            params[name].copy_(torch.as_tensor(np.array(arr)))


def import_backbone(model: DualEncoderModel, archive: str | Path) -> list[str]:
    """Load all backbone arrays from a mapped container. Adapters and prompts
    are untouched. Every shape mismatch is reported, not just the first."""
    archive = Path(archive)
    if not archive.is_file():
        raise FileNotFoundError(f"unreadable weight container {archive}")
    mapping = read_manifest(manifest_path(archive))
    targets = {name: p for name, p in model.named_parameters() if _is_backbone(name)}
    covered = {tgt: src for src, tgt in mapping.items() if tgt in targets}
    missing_targets = sorted(set(targets) - set(covered))
    if missing_targets:
        raise KeyError(f"manifest covers no source for target arrays: {missing_targets}")
    with np.load(archive) as data:
        available = set(data.files)
        missing_sources = sorted(
            src for src in covered.values() if src not in available
        )
        if missing_sources:
            raise KeyError(f"container is missing arrays: {missing_sources}")
        mismatches = []
        staged: dict[str, np.ndarray] = {}
        for tgt, src in covered.items():
            arr = data[src]
            want = tuple(targets[tgt].shape)
            if tuple(arr.shape) != want:
                mismatches.append(f"{src} -> {tgt}: got {tuple(arr.shape)}, expected {want}")
            else:
                staged[tgt] = arr
        if mismatches:
            raise ValueError("shape mismatches:\n  " + "\n  ".join(sorted(mismatches)))
    _assign(model, staged)
    return sorted(staged)


# ----------------------------------------------------------- checkpoints


def save_checkpoint(
    model: DualEncoderModel,
    path: str | Path,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> Path:
    """Trainable arrays + config digest + step + optimizer moments."""
    path = Path(path)
    state = trainable_state(model)
    arrays: dict[str, np.ndarray] = dict(state)
    meta = {
        "digest": model.config.digest(),
        "step": int(step),
        "param_names": sorted(state),
        "extra": extra or {},
    }
    if optimizer is not None:
        ordered = _optimizer_params(model)
        opt_meta = []
        for i, p in enumerate(ordered):
            st = optimizer.state.get(p, {})
            entry = {}
            for key, val in st.items():
                if torch.is_tensor(val):
                    arrays[f"opt.{i}.{key}"] = val.detach().cpu().numpy()
                else:
                    entry[key] = val
            opt_meta.append(entry)
        meta["optimizer"] = opt_meta
    arrays[META_KEY] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    return path


def _optimizer_params(model: DualEncoderModel) -> list[torch.nn.Parameter]:
    """Deterministic flat ordering matching the trainer's param groups."""
    groups = model.trainable_parameters()
    return list(groups["adapters"]) + list(groups["prompts"])


def load_checkpoint(
    model: DualEncoderModel,
    path: str | Path,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict:
    """Restore trainable arrays (and optimizer moments when asked); returns
    the checkpoint metadata."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"unreadable checkpoint {path}")
    with np.load(path, allow_pickle=False) as data:
        if META_KEY not in data.files:
            raise ValueError(f"{path}: not a checkpoint (missing {META_KEY})")
        meta = json.loads(str(data[META_KEY]))
        if meta["digest"] != model.config.digest():
            raise ValueError(
                f"checkpoint digest {meta['digest'][:12]}... does not match "
                f"model config digest {model.config.digest()[:12]}..."
            )
        targets = {name: p for name, p in model.named_parameters() if p.requires_grad}
        missing = sorted(set(targets) - set(data.files))
        if missing:
            raise KeyError(f"checkpoint is missing arrays: {missing}")
        staged: dict[str, np.ndarray] = {}
        mismatches = []
        for name, p in targets.items():
            arr = data[name]
            if tuple(arr.shape) != tuple(p.shape):
                mismatches.append(f"{name}: got {tuple(arr.shape)}, expected {tuple(p.shape)}")
            else:
                staged[name] = arr
        if mismatches:
            raise ValueError("shape mismatches:\n  " + "\n  ".join(sorted(mismatches)))
        _assign(model, staged)
        if optimizer is not None and "optimizer" in meta:
            ordered = _optimizer_params(model)
            for i, (p, entry) in enumerate(zip(ordered, meta["optimizer"])):
                state = dict(entry)
                for key in ("step", "exp_avg", "exp_avg_sq", "max_exp_avg_sq"):
                    arr_key = f"opt.{i}.{key}"
                    if arr_key in data.files:
                        state[key] = torch.from_numpy(data[arr_key].copy()).to(p.dtype)
                if state:
                    optimizer.state[p] = state
    return meta

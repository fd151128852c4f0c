"""Command-line entry points: train, eval, audit, synth, export-attention,
export-embeddings. Every command writes a manifest (resolved config echo,
seed, code digest) into its output directory."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, code_digest, resolve_config

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peadapt",
        description="Parameter-efficient dual-encoder adaptation for video "
        "expression recognition.",
    )
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="key=value config file")
        p.add_argument("--set", dest="sets", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--preset", choices=["toy", "full"], default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, default=None, help="output directory")

    p_train = sub.add_parser("train", help="train adapters and prompts")
    common(p_train)
    p_train.add_argument("--data", type=Path, default=None, help="dataset root")
    p_train.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--data", type=Path, default=None)
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.add_argument("--folds", type=int, nargs="*", default=None,
                        help="restrict evaluation to these fold ids")
    p_eval.add_argument("--split", choices=["all", "holdout"], default="all",
                        help="holdout: the clips the checkpoint was validated on")

    p_audit = sub.add_parser("audit", help="print the trainable-parameter budget")
    common(p_audit)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--classes", type=int, default=2)
    p_synth.add_argument("--clips-per-class", type=int, default=32)
    p_synth.add_argument("--gen-frames", type=int, default=12)
    p_synth.add_argument("--gen-image-size", type=int, default=64)

    p_att = sub.add_parser("export-attention", help="saliency rollout for one clip")
    common(p_att)
    p_att.add_argument("--data", type=Path, default=None)
    p_att.add_argument("--checkpoint", type=Path, default=None)
    p_att.add_argument("--clip-id", default=None, help="default: first clip")

    p_emb = sub.add_parser("export-embeddings", help="per-clip embedding export")
    common(p_emb)
    p_emb.add_argument("--data", type=Path, default=None)
    p_emb.add_argument("--checkpoint", type=Path, default=None)
    p_emb.add_argument("--method", choices=["raw", "tsne"], default="raw")
    return parser


def _resolve(args: argparse.Namespace) -> RunConfig:
    sets = list(args.sets)
    if getattr(args, "data", None) is not None:
        sets.append(f"data.root={args.data}")
    if args.out is not None:
        sets.append(f"run.out={args.out}")
    return resolve_config(
        config_file=args.config, set_pairs=sets, preset=args.preset, seed=args.seed
    )


def _write_manifest(cfg: RunConfig, out_dir: Path, command: str, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.echo").write_text(cfg.to_text())
    manifest = {
        "command": command,
        "seed": cfg.seed,
        "config_digest": cfg.digest(),
        "code_digest": code_digest(),
    }
    manifest.update(extra or {})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _build_model(cfg: RunConfig):
    from .host import DualEncoderModel

    return DualEncoderModel(
        cfg.host, flags=cfg.flags, prompt_config=cfg.prompt, seed=cfg.seed
    )


def _need_data(cfg: RunConfig) -> Path:
    if not cfg.data_root:
        raise SystemExit("no dataset: pass --data PATH or set data.root")
    root = Path(cfg.data_root)
    if not root.exists():
        raise SystemExit(f"dataset root {root} does not exist")
    return root


def cmd_train(args: argparse.Namespace) -> int:
    from .data import VideoDataset
    from .training import train_loop

    cfg = _resolve(args)
    out_dir = Path(cfg.out_dir)
    dataset = VideoDataset(_need_data(cfg))
    model = _build_model(cfg)
    _write_manifest(cfg, out_dir, "train")
    result = train_loop(
        dataset, cfg.train, model, out_dir,
        augment=cfg.augment, resume_from=args.resume,
    )
    print(f"steps: {len(result.step_losses)}")
    print(f"best WAR: {result.best_war if result.best_war >= 0 else 'n/a'}")
    print(f"best checkpoint: {result.best_path}")
    print(f"final checkpoint: {result.final_path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .data import ClipLoader, VideoDataset
    from .evaluation import evaluate
    from .weights import load_checkpoint

    cfg = _resolve(args)
    out_dir = Path(cfg.out_dir)
    dataset = VideoDataset(_need_data(cfg))
    model = _build_model(cfg)
    meta = load_checkpoint(model, args.checkpoint)
    if args.split == "holdout":
        if args.folds:
            raise SystemExit("--folds and --split holdout are mutually exclusive")
        wanted = set(meta.get("extra", {}).get("holdout_ids") or [])
        if not wanted:
            raise SystemExit(f"checkpoint {args.checkpoint} records no holdout clips")
        indices = [i for i, e in enumerate(dataset.entries) if e.clip_id in wanted]
        if len(indices) != len(wanted):
            missing = wanted - {e.clip_id for e in dataset.entries}
            raise SystemExit(f"holdout clips not in dataset: {sorted(missing)}")
    elif args.folds:
        indices = dataset.indices_in_folds(args.folds)
    else:
        indices = list(range(len(dataset)))
    loader = ClipLoader(
        dataset, indices, frames=cfg.host.frames, image_size=cfg.host.image_size,
        batch_size=cfg.train.batch_size, train=False, seed=cfg.train.seed,
    )
    _write_manifest(cfg, out_dir, "eval", {"checkpoint": str(args.checkpoint),
                                           "checkpoint_step": meta["step"],
                                           "split": args.split})
    result = evaluate(model, loader, out_csv=out_dir / "predictions.csv")
    (out_dir / "metrics.json").write_text(
        json.dumps(result.report.as_dict(), indent=2) + "\n"
    )
    print(result.report)
    print(f"UAR: {result.report.uar:.6f}")
    print(f"WAR: {result.report.war:.6f}")
    print(f"predictions: {out_dir / 'predictions.csv'}")
    return 0


def cmd_audit(args: argparse.Namespace) -> int:
    cfg = _resolve(args)
    model = _build_model(cfg)
    audit = model.audit_trainable()
    print(audit)
    if args.out is not None:
        _write_manifest(cfg, Path(cfg.out_dir), "audit",
                        {"trainable": audit.trainable, "total": audit.total,
                         "fraction": audit.fraction})
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    from .synthetic import generate_synthetic_dataset

    cfg = _resolve(args)
    out_dir = Path(cfg.out_dir)
    target = out_dir / "clips"
    generate_synthetic_dataset(
        target,
        n_classes=args.classes,
        clips_per_class=args.clips_per_class,
        seed=cfg.seed,
        frames=args.gen_frames,
        image_size=args.gen_image_size,
    )
    _write_manifest(cfg, out_dir, "synth",
                    {"classes": args.classes, "clips_per_class": args.clips_per_class})
    print(f"dataset: {target}")
    return 0


def _load_for_export(args: argparse.Namespace, cfg: RunConfig):
    from .weights import load_checkpoint

    model = _build_model(cfg)
    if args.checkpoint is not None:
        load_checkpoint(model, args.checkpoint)
    return model


def cmd_export_attention(args: argparse.Namespace) -> int:
    from .data import ClipLoader, VideoDataset
    from .visualize import export_attention

    cfg = _resolve(args)
    out_dir = Path(cfg.out_dir)
    dataset = VideoDataset(_need_data(cfg))
    model = _load_for_export(args, cfg)
    if args.clip_id is None:
        index = 0
    else:
        matches = [i for i, e in enumerate(dataset.entries) if e.clip_id == args.clip_id]
        if not matches:
            raise SystemExit(f"clip id {args.clip_id!r} not in dataset")
        index = matches[0]
    loader = ClipLoader(
        dataset, [index], frames=cfg.host.frames, image_size=cfg.host.image_size,
        batch_size=1, train=False, seed=cfg.train.seed,
    )
    batch = next(iter(loader.iter_epoch(0)))
    _write_manifest(cfg, out_dir, "export-attention", {"clip_id": batch.ids[0]})
    out = export_attention(model, batch.frames[0], out_dir)
    print(f"predicted class index: {out['pred']}")
    print(f"heatmaps: {len(out['images'])} files in {out_dir}")
    print(f"raw values: {out['csv']}")
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    from .data import ClipLoader, VideoDataset
    from .visualize import export_embeddings

    cfg = _resolve(args)
    out_dir = Path(cfg.out_dir)
    dataset = VideoDataset(_need_data(cfg))
    model = _load_for_export(args, cfg)
    loader = ClipLoader(
        dataset, list(range(len(dataset))), frames=cfg.host.frames,
        image_size=cfg.host.image_size, batch_size=cfg.train.batch_size,
        train=False, seed=cfg.train.seed,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(cfg, out_dir, "export-embeddings", {"method": args.method})
    out_csv = out_dir / f"embeddings_{args.method}.csv"
    export_embeddings(model, loader, out_csv, method=args.method, seed=cfg.seed)
    print(f"embeddings: {out_csv}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "synth": cmd_synth,
    "export-attention": cmd_export_attention,
    "export-embeddings": cmd_export_embeddings,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, KeyError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

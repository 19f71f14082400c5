"""
SEA command-line entry point.

    python main.py generate --out data/synth
    python main.py train --config run.toml --set train.epochs=30
    python main.py eval --config run.toml --checkpoint runs/<run>/checkpoints/best.pt
    python main.py predict --checkpoint best.pt --image ego.jpg [--exo exo_dir/]
    python main.py ablate --config run.toml
"""

import argparse
import hashlib
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence

from PIL import Image

from affordance import render_overlay
from config import RunConfig, config_hash, load_run_config, resolve_data_root, settings
from data_model import generate_synthetic, load_dataset, load_vocabularies, summarize_split
from errors import ConfigError, LoadError, SEAError
from logger import attach_run_log, setup_logger
from metrics import evaluate_split
from model import build_model
from trainer import Trainer, restore_model
from utils import read_rgb, save_heatmap_png, seed_everything

# Setup logging
logger = setup_logger(__name__, settings.LOG_LEVEL)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp"}
ABLATION_VARIANTS = ("ffn_softmax", "concat_avgpool", "transformer")


def make_run_dir(cfg: RunConfig, out: Optional[str] = None) -> Path:
    """`--out` when given, else <SEA_RUNS_DIR>/<timestamp>-<config hash>; run.log is attached there"""
    if out:
        run_dir = Path(out)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        run_dir = Path(settings.SEA_RUNS_DIR) / f"{stamp}-{config_hash(cfg)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    attach_run_log(run_dir / "run.log")
    (run_dir / "config.json").write_text(cfg.model_dump_json(indent=2), encoding="utf-8")
    return run_dir


def _load_splits(cfg: RunConfig, need_train: bool = True):
    root = resolve_data_root(cfg)
    vocab_pair = load_vocabularies(root)
    setting = cfg.train.setting
    train = load_dataset(root, setting, "train", vocab_pair) if need_train else []
    test = load_dataset(root, setting, "test", vocab_pair)
    for split in ("train", "test"):
        summary = summarize_split(root, setting, split)
        logger.info(
            f"{setting}/{split}: {summary.captions} captions, {summary.samples} samples, "
            f"{summary.n_actions} actions, {summary.n_objects} objects"
        )
    return vocab_pair, train, test


# ==================== Commands ====================

def cmd_generate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.set)
    manifest = generate_synthetic(cfg.data.synthetic, args.out, cfg.caption.styles)
    digest = hashlib.sha256((Path(args.out) / "manifest.json").read_bytes()).hexdigest()
    print(f"dataset: {Path(args.out).resolve()}")
    print(f"setting: {manifest.setting}  actions: {len(manifest.actions)}  objects: {len(manifest.objects)}")
    print(f"samples: train={manifest.n_samples['train']} test={manifest.n_samples['test']}  records: {manifest.n_records}")
    print(f"manifest sha256: {digest}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.set)
    run_dir = make_run_dir(cfg, args.out)
    vocab_pair, train, test = _load_splits(cfg)

    seed_everything(cfg.train.seed)
    model = build_model(cfg, vocab_pair)
    trainer = Trainer(model, cfg, run_dir)
    result = trainer.fit(train, test, resume_from=args.resume)

    report = result.final_report
    if report is not None:
        report.write(run_dir)
        print(report.table())
    print("train accuracy: " + "  ".join(f"{k}={v:.1f}" for k, v in result.train_accuracy.items()))
    print(f"checkpoints: best={result.best_checkpoint} last={result.last_checkpoint}")
    trainer.history.close()
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.set)
    run_dir = make_run_dir(cfg, args.out)
    vocab_pair, _, test = _load_splits(cfg, need_train=False)

    model = restore_model(args.checkpoint, vocab_pair)

    report = evaluate_split(
        model,
        test,
        cfg.metrics,
        model.image_size,
        batch_size=cfg.train.batch_size,
        export_dir=run_dir,
        vocab_pair=vocab_pair,
    )
    report.write(run_dir)
    print(report.table())
    return 0


def _exo_images(exo_dir: Optional[str]) -> List:
    if not exo_dir:
        return []
    folder = Path(exo_dir)
    if not folder.is_dir():
        raise LoadError(f"--exo must be a directory of images: {folder}")
    paths = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        logger.warning(f"No images in {folder}; predicting from the egocentric image only")
    return [read_rgb(p) for p in paths]


def cmd_predict(args: argparse.Namespace) -> int:
    image = read_rgb(args.image)
    exo = _exo_images(args.exo)
    model = restore_model(args.checkpoint)
    bundle = model.predict_one(image, exo or None, topk=5)

    out_dir = make_run_dir(model.cfg, args.out)
    stem = Path(args.image).stem
    heatmap_path = out_dir / f"{stem}_heatmap.png"
    overlay_path = out_dir / f"{stem}_overlay.png"
    save_heatmap_png(bundle.heatmap, heatmap_path)
    Image.fromarray(render_overlay(image, bundle.heatmap)).save(overlay_path)

    print(f"caption: {bundle.caption}")
    for rank, ((action, obj), prob) in enumerate(bundle.pair_topk, start=1):
        print(f"  {rank}. ({action}, {obj})  p={prob:.4f}")
    print(f"heatmap: {heatmap_path}")
    print(f"overlay: {overlay_path}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    """Train every Self-Explain variant under the same budget and compare train T_a@1"""
    cfg = load_run_config(args.config, args.set)
    run_dir = make_run_dir(cfg, args.out)
    vocab_pair, train, _ = _load_splits(cfg)

    scores = {}
    for variant in ABLATION_VARIANTS:
        variant_cfg = cfg.model_copy(deep=True)
        variant_cfg.model.explain.variant = variant
        seed_everything(cfg.train.seed)
        model = build_model(variant_cfg, vocab_pair)
        trainer = Trainer(model, variant_cfg, run_dir / variant)
        result = trainer.fit(train)
        scores[variant] = result.train_accuracy["T_a@1"]
        trainer.history.close()
        logger.info(f"Ablation {variant}: train T_a@1 = {scores[variant]:.1f}")

    for variant in ABLATION_VARIANTS:
        print(f"{variant:<15} T_a@1={scores[variant]:.1f}")
    ordered = scores["transformer"] >= scores["concat_avgpool"] >= scores["ffn_softmax"]
    if ordered:
        logger.info("Ablation ordering holds: transformer >= concat_avgpool >= ffn_softmax")
    else:
        logger.warning(f"Ablation ordering not observed: {scores}")
    return 0


# ==================== Parser ====================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sea",
        description="Self-explainable affordance learning: heatmaps plus embodied captions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, default=None, help="TOML or JSON run file")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="Override a config key, e.g. --set train.epochs=30 (repeatable, wins over the file)",
        )

    p = sub.add_parser("generate", help="Write the synthetic dataset")
    common(p)
    p.add_argument("--out", required=True, help="Dataset root to create")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="Train a model and evaluate it on the test split")
    common(p)
    p.add_argument("--out", default=None, help="Run directory (default: SEA_RUNS_DIR/<timestamp>-<hash>)")
    p.add_argument("--resume", default=None, help="Checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint and write the metric report")
    common(p)
    p.add_argument("--checkpoint", required=True, help="Path to a .pt checkpoint")
    p.add_argument("--out", default=None, help="Report directory (default: a new run directory)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="Caption and heatmap for one egocentric image")
    p.add_argument("--checkpoint", required=True, help="Path to a .pt checkpoint")
    p.add_argument("--image", required=True, help="Egocentric image")
    p.add_argument("--exo", default=None, help="Optional directory of exocentric images")
    p.add_argument("--out", default=None, help="Directory for the heatmap and overlay PNGs (default: SEA_RUNS_DIR/<timestamp>-<hash>)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="Compare the three Self-Explain variants on train T_a@1")
    common(p)
    p.add_argument("--out", default=None, help="Run directory")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}", exc_info=True)
        return 2
    except (SEAError, OSError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())

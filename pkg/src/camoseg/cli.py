"""Command-line entry point: ``camoseg <command> [options]``.

Exit codes: 0 success, 2 configuration or argument error, 3 data error,
1 other failures such as a diverged training run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .checkpoint import Checkpoint
from .config import Config, config_from_dict, load_config
from .data.coco import AnnotatedSample
from .data.synth import synth_generate
from .errors import CamoSegError, ConfigError, DataError, DomainError
from .evaluation import EvalResult
from .inference import detect, detections_json, evaluate, overlay
from .model import SWITCHES, Switches
from .pipeline import load_split, resolve_vocab, text_embeddings
from .train import load_model, train
from .visualize import feature_views, render_views

log = logging.getLogger("camoseg")

CHECKPOINT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.jsonl"


# ------------------------------------------------------------------ helpers

def _config(args) -> Config:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "data_root", None):
        cfg.data.root = args.data_root
    if getattr(args, "no_prompt_ensemble", False):
        cfg.data.prompt_ensemble = False
    return cfg.validate()


def _checkpoint_config(ckpt: Checkpoint, args) -> Config:
    """The configuration a checkpoint was trained with, with data-side overrides from the command line."""
    cfg = config_from_dict(ckpt.config, Config())
    if getattr(args, "data_root", None):
        cfg.data.root = args.data_root
    if getattr(args, "no_prompt_ensemble", False):
        cfg.data.prompt_ensemble = False
    return cfg.validate()


def _load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_NAME
    return Checkpoint.load(p)


def _read_image(path) -> AnnotatedSample:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return AnnotatedSample(arr, [], 0)


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _dump_config(cfg: Config, path: Path) -> None:
    path.write_text(yaml.safe_dump(json.loads(json.dumps(cfg.to_dict())), sort_keys=True))


# ----------------------------------------------------------------- commands

def cmd_generate_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.data.root)
    seed = cfg.train.seed if args.seed is None else args.seed
    coco = synth_generate(cfg.synth, seed, out)
    for split, data in coco.items():
        print(f"{split}: {len(data['images'])} images, {len(data['annotations'])} instances -> {out / split}")
    return 0


def _train_one(cfg: Config, switches: Switches, out: Path, vocab_path=None, resume=None) -> Checkpoint:
    vocab = resolve_vocab(cfg, vocab_path)
    index = load_split(cfg, "train", vocab, filter_rare=True)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg, index, switches=switches, log_path=out / LOG_NAME, resume=resume,
                   progress_every=max(1, cfg.train.iterations // 20))
    result.checkpoint.save(out / CHECKPOINT_NAME)
    return result.checkpoint


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out or "runs/train")
    resume = _load_checkpoint(args.resume) if args.resume else None
    switches = Switches.parse(args.switch)
    _train_one(cfg, switches, out, args.vocab, resume)
    _dump_config(cfg, out / "config.yaml")
    print(f"checkpoint written to {out / CHECKPOINT_NAME}")
    return 0


def _evaluate(ckpt: Checkpoint, cfg: Config, switches: Switches, split: str, class_agnostic: bool,
              vocab_path=None) -> EvalResult:
    vocab = resolve_vocab(cfg, vocab_path)
    index = load_split(cfg, split, vocab)
    model = load_model(ckpt, cfg, switches)
    return evaluate(model, index, text_embeddings(cfg, vocab), cfg, class_agnostic=class_agnostic)


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ckpt, args)
    result = _evaluate(ckpt, cfg, Switches.parse(args.switch), args.split, not args.class_aware, args.vocab)
    print("| Method | AP | AP50 | AP75 |")
    print("|---|---|---|---|")
    print(result.table_row("camoseg"))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(result.to_json() + "\n")
    return 0


def cmd_infer(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ckpt, args)
    vocab = resolve_vocab(cfg, args.vocab)
    model = load_model(ckpt, cfg)
    tes = text_embeddings(cfg, vocab)
    out = Path(args.out or "runs/infer")
    out.mkdir(parents=True, exist_ok=True)
    for path in args.image:
        sample = _read_image(path)
        dets = detect(model, [sample], tes, cfg, args.threshold)[0]
        stem = Path(path).stem
        _write_json(out / f"{stem}.json", detections_json(dets, vocab, Path(path).name, sample.height, sample.width))
        Image.fromarray(overlay(sample.image, dets)).save(out / f"{stem}_overlay.png")
        print(f"{path}: {len(dets)} instances")
    return 0


def cmd_visualize(args) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(ckpt, args)
    vocab = resolve_vocab(cfg, args.vocab)
    model = load_model(ckpt, cfg)
    sample = _read_image(args.image)
    seed = cfg.train.seed if args.seed is None else args.seed
    views = feature_views(model, sample, text_embeddings(cfg, vocab), cfg, args.k, seed)
    out = Path(args.out or "runs/visualize")
    out.mkdir(parents=True, exist_ok=True)
    for name, blob in render_views(views, args.top).items():
        (out / name).write_bytes(blob)
    print(f"{len(np.unique(views.clusters))} clusters; files in {out}")
    return 0


def ablation_report(rows: list[dict]) -> str:
    """Markdown table with deltas against the full-setting row (always first)."""
    full = rows[0]
    lines = ["| Setting | Reconfiguration | AP | AP50 | AP75 | dAP |", "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['setting']} | {r['reconfiguration']} | {100 * r['ap']:.1f} | {100 * r['ap50']:.1f} "
                     f"| {100 * r['ap75']:.1f} | {100 * (r['ap'] - full['ap']):+.1f} |")
    return "\n".join(lines) + "\n"


def run_ablation(cfg: Config, switch_names: list[str], out: Path, vocab_path=None, split: str = "val") -> list[dict]:
    variants = [("full", Switches())] + [(n, Switches.parse([n])) for n in switch_names]
    rows = []
    for name, sw in variants:
        ckpt = _train_one(cfg, sw, out / name, vocab_path)
        res = _evaluate(ckpt, cfg, sw, split, True, vocab_path)
        rows.append({"setting": name, "reconfiguration": sw.describe(), "ap": res.ap, "ap50": res.ap50,
                     "ap75": res.ap75})
    for r in rows:
        r["delta_ap"] = r["ap"] - rows[0]["ap"]
    return rows


def cmd_ablate(args) -> int:
    cfg = _config(args)
    names = [n for chunk in (args.switches or []) for n in chunk.split(",") if n]
    Switches.parse(names)  # fail fast on unknown names
    out = Path(args.out or "runs/ablate")
    rows = run_ablation(cfg, list(dict.fromkeys(names)), out, args.vocab, args.split)
    table = ablation_report(rows)
    (out / "report.md").write_text(table)
    _write_json(out / "report.json", rows)
    print(table, end="")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="camoseg", description="Open-vocabulary camouflaged instance segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="YAML configuration overriding the desk preset")
        p.add_argument("--seed", type=int)
        p.add_argument("--vocab", help="vocabulary JSON (default: <data.root>/vocab.json)")
        p.add_argument("--out")
        p.add_argument("--data-root", help="override data.root")
        p.add_argument("--no-prompt-ensemble", action="store_true", help="classify with primary names only")

    p = sub.add_parser("generate-data", help="write the seeded synthetic camouflage dataset")
    common(p)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train on <data.root>/train")
    common(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--switch", action="append", choices=SWITCHES, help="ablation switch (repeatable)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="mask AP of a checkpoint on a split")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--class-aware", action="store_true")
    p.add_argument("--switch", action="append", choices=SWITCHES)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="segment images, writing JSON and overlays")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("image", nargs="+")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("visualize", help="k-means feature clusters and attention maps")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--top", type=int, default=3)
    p.add_argument("image")
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("ablate", help="train and evaluate the full model and each switched variant")
    common(p)
    p.add_argument("--switches", action="append", help="comma-separated subset of " + ",".join(SWITCHES))
    p.add_argument("--split", default="val")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CamoSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

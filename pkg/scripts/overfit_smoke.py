"""Train the desk model on the 8-image synthetic set and report AP.

    python scripts/overfit_smoke.py --out runs/overfit [--iterations 2000] [--num-train 8]

Prints train AP/AP50, held-out AP/AP50 and held-out AP with text zeroed, and
writes checkpoint.bin, train_log.jsonl and metrics.json under --out.
"""
import argparse
import json
import logging
import time
from pathlib import Path

from camoseg.config import load_config
from camoseg.data.synth import synth_generate
from camoseg.inference import evaluate
from camoseg.model import Switches
from camoseg.pipeline import load_split, resolve_vocab, text_embeddings
from camoseg.train import load_model, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/overfit")
    p.add_argument("--iterations", type=int)
    p.add_argument("--num-train", type=int)
    p.add_argument("--num-val", type=int)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    out = Path(args.out)
    cfg.data.root = str(out / "data")
    cfg.train.seed = args.seed
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.num_train is not None:
        cfg.synth.num_train = args.num_train
    if args.num_val is not None:
        cfg.synth.num_val = args.num_val
    cfg.validate()

    synth_generate(cfg.synth, args.seed, cfg.data.root)
    vocab = resolve_vocab(cfg)
    train_index = load_split(cfg, "train", vocab, filter_rare=True)
    val_index = load_split(cfg, "val", vocab)
    tes = text_embeddings(cfg, vocab)

    t0 = time.perf_counter()
    result = train(cfg, train_index, log_path=out / "train_log.jsonl", progress_every=max(1, cfg.train.iterations // 10))
    minutes = (time.perf_counter() - t0) / 60
    result.checkpoint.save(out / "checkpoint.bin")

    metrics = {"minutes": minutes}
    metrics["train"] = json.loads(evaluate(result.model, train_index, tes, cfg).to_json())
    metrics["val"] = json.loads(evaluate(result.model, val_index, tes, cfg).to_json())
    blind = load_model(result.checkpoint, cfg, Switches(no_text=True))
    metrics["val_no_text"] = json.loads(evaluate(blind, val_index, tes, cfg).to_json())
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    for name in ("train", "val", "val_no_text"):
        print(f"{name:12s} AP {metrics[name]['ap']:.4f}  AP50 {metrics[name]['ap50']:.4f}")
    print(f"training took {minutes:.1f} min")


if __name__ == "__main__":
    main()

"""Train and evaluate the full model and each ablation switch, writing a comparison table.

    python scripts/ablation.py --out runs/ablate --switches no_text,skip_msff,skip_cin,skip_tva
"""
import argparse
import json
import logging
from pathlib import Path

from camoseg.cli import ablation_report, run_ablation
from camoseg.config import load_config
from camoseg.data.synth import synth_generate
from camoseg.model import SWITCHES


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config")
    p.add_argument("--out", default="runs/ablate")
    p.add_argument("--switches", default=",".join(SWITCHES))
    p.add_argument("--iterations", type=int)
    p.add_argument("--num-train", type=int)
    p.add_argument("--split", default="val")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = load_config(args.config)
    out = Path(args.out)
    cfg.data.root = str(out / "data")
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.num_train is not None:
        cfg.synth.num_train = args.num_train
    cfg.validate()
    synth_generate(cfg.synth, cfg.train.seed, cfg.data.root)

    names = [n for n in args.switches.split(",") if n]
    rows = run_ablation(cfg, names, out)
    table = ablation_report(rows)
    (out / "report.md").write_text(table)
    (out / "report.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    print(table, end="")


if __name__ == "__main__":
    main()

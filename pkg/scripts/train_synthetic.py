"""Synthesize a corpus, train, evaluate and show a few generations via the CLI.

    python scripts/train_synthetic.py --out runs/demo --epochs 60
"""

import argparse
from pathlib import Path

from repsnet.cli import cmd_eval, cmd_generate, cmd_synth, cmd_train
from repsnet.config import format_config, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()

    out = Path(args.out)
    data = cmd_synth(out / "data", seed=args.seed)
    cfg_path = data / "config.txt"
    cfg = load_config(cfg_path).with_(epochs=args.epochs, lr=args.lr)
    cfg_path.write_text(format_config(cfg))
    ckpt = cmd_train(cfg_path, out / "run")
    print(f"checkpoint: {ckpt}")
    cmd_eval(ckpt, data / "eval.jsonl")
    cmd_generate(ckpt, data / "eval.jsonl", out=out / "run" / "generations.txt")


if __name__ == "__main__":
    main()

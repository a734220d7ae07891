#!/usr/bin/env python3
"""Toy pretraining with and without visual deltas, then paired evaluation.

Trains the acceptance config twice (weights-conditioned and image-blind),
evaluates held-out perplexity for both and for shuffled image pairing.
Takes roughly 6-7 minutes on one CPU core.

    python scripts/acceptance_run.py [--out runs/acceptance] [--seed 0]
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def cli(*args) -> str:
    cmd = [sys.executable, "-m", "paramalign.cli", *args]
    return subprocess.run(cmd, check=True, capture_output=True, text=True).stdout


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "runs" / "acceptance"))
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int)
    args = ap.parse_args(argv)
    cfg = str(ROOT / "configs" / "acceptance.yaml")
    extra = ["--steps", str(args.steps)] if args.steps else []

    summaries = {}
    for label, flags in (("full", []), ("blind", ["--blind"])):
        out = Path(args.out) / label
        summaries[label] = json.loads(cli("train", "--config", cfg, "--out", str(out), "--seed", str(args.seed), *extra, *flags))
        print(f"{label:>5}: initial loss {summaries[label]['initial_loss']:.3f}, "
              f"final-100 mean {summaries[label]['final_loss_mean100']:.3f}")  # fmt: skip

    full = json.loads(cli("eval", "--checkpoint", str(Path(args.out) / "full" / "model.ckpt")))
    blind = json.loads(cli("eval", "--checkpoint", str(Path(args.out) / "blind" / "model.ckpt")))
    print(f"ppl matched       {full['ppl']:.2f}")
    print(f"ppl shuffled      {full['ppl_shuffled_images']:.2f}")
    print(f"ppl zero deltas   {full['ppl_zero_deltas']:.2f}")
    print(f"ppl blind-trained {blind['ppl_blind_trained']:.2f}")
    s = summaries["full"]
    ok = (
        s["final_loss_mean100"] <= 0.5 * s["initial_loss"]
        and full["ppl"] <= 0.8 * blind["ppl_blind_trained"]
        and full["ppl"] <= 0.8 * full["ppl_shuffled_images"]
    )
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(run())

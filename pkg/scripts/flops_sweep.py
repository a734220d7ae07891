#!/usr/bin/env python3
"""FLOPs of the LM part vs visual-token count, plus the 7B-class table.

    python scripts/flops_sweep.py [--out results/flops.csv]
"""

import argparse
import sys
from pathlib import Path

from paramalign.cli import main

ROOT = Path(__file__).resolve().parent.parent


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "results" / "flops.csv"))
    args = ap.parse_args(argv)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    cfg = str(ROOT / "configs" / "cost_7b.yaml")
    code = main(["flops", "--config", cfg, "--table1"])
    return code or main(["flops", "--config", cfg, "--out", args.out])


if __name__ == "__main__":
    sys.exit(run())

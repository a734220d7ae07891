#!/usr/bin/env python3
"""Short toy runs over weight-type sets, ranks and generator depths.

Each run uses the acceptance config with fewer steps; results are one JSON
line per run in ``<out>/ablations.jsonl``. Toy-scale numbers only show the
axes are wired up, not the published benchmark trends.

    python scripts/ablations.py [--steps 300] [--axis kinds|rank|depth]
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
AXES = {
    "kinds": [["--ablate-kinds", k] for k in ("qkvom", "qkvm", "qkv", "qko", "qk")],
    "rank": [["--rank", str(r)] for r in (16, 32, 64, 128)],
    "depth": [["--pwg-blocks", str(n)] for n in (4, 8, 12)],
}


def cli(*args) -> str:
    cmd = [sys.executable, "-m", "paramalign.cli", *args]
    return subprocess.run(cmd, check=True, capture_output=True, text=True).stdout


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(ROOT / "runs" / "ablations"))
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--axis", choices=sorted(AXES), action="append")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    cfg = str(ROOT / "configs" / "acceptance.yaml")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablations.jsonl", "w") as sink:
        for axis in args.axis or sorted(AXES):
            for flags in AXES[axis]:
                tag = f"{axis}_{flags[-1]}"
                run_dir = out / tag
                summary = json.loads(cli("train", "--config", cfg, "--out", str(run_dir), "--seed", str(args.seed), "--steps", str(args.steps), *flags))
                rec = {"axis": axis, "value": flags[-1], **summary}
                sink.write(json.dumps(rec) + "\n")
                print(f"{tag:<14} final-100 loss {summary['final_loss_mean100']:.3f}  eval ppl {summary['eval_ppl']:.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(run())

"""Command-line entry point: ``paramalign {flops,verify,train,eval}``.

Exit codes: 0 success, 1 verification failure, 2 usage or config error.
The seed falls back to the ``VLORA_SEED`` environment variable, then 0.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import checkpoint, cost
from .config import ConfigError, RunConfig, load_config
from .deltas import ABLATION_SETS
from .model import init_model
from .tensor import Rng
from .train import eval_perplexity, make_dataset, train_loop

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("paramalign")


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    env = os.environ.get("VLORA_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"VLORA_SEED={env!r} is not an integer") from None


def dump_config(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    for section in ("vision", "generator"):
        d[section].pop("dtype", None)
    return yaml.safe_dump(d, sort_keys=False)


def build_data(cfg: RunConfig):
    rng = Rng(cfg.train.data_seed)
    vc = cfg.vision
    train = make_dataset(rng.child("train"), cfg.train.n_train, vc.grid, vc.alphabet)
    held = make_dataset(rng.child("eval"), cfg.train.n_eval, vc.grid, vc.alphabet)
    return train, held


def build_model(cfg: RunConfig, seed: int):
    return init_model(cfg.llm, cfg.vision, cfg.generator, cfg.kinds, seed)


# --------------------------------------------------------------------------


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    p = cfg.cost.params()
    if args.table1:
        print(f"{'model':<14}{'L':>6}{'GFLOPs':>12}{'printed':>9}{'rel err':>10}")
        for row in cost.table1_rows(p):
            print(f"{row['model']:<14}{row['L']:>6}{row['gflops']:>12.1f}{row['printed']:>9}{row['rel_err']:>10.2%}")
    L_values = args.L if args.L is not None else cfg.cost.L_values
    if not L_values:
        print("error: empty L list", file=sys.stderr)
        return EXIT_USAGE
    rows = cost.sweep(p, L_values)
    if args.out:
        try:
            cost.write_csv(rows, args.out)
        except OSError as e:
            print(f"error: cannot write {args.out}: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"wrote {len(rows)} rows to {args.out}")
    elif not args.table1:
        w = csv.writer(sys.stdout)
        w.writerow(cost.CSV_HEADER)
        for r in rows:
            w.writerow([r[k] for k in cost.CSV_HEADER])
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(resolve_seed(args.seed), "float64" if args.float64 else "float32", args.fault)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def _train_overrides(args) -> dict:
    o = {}
    if args.stage is not None:
        o["train.stage"] = args.stage
    if args.ablate_kinds is not None:
        o["injection.kinds"] = args.ablate_kinds
    if args.rank is not None:
        o["generator.r"] = args.rank
    if args.pwg_blocks is not None:
        o["generator.N"] = args.pwg_blocks
    if args.steps is not None:
        o["train.steps"] = args.steps
    if args.data_seed is not None:
        o["train.data_seed"] = args.data_seed
    if args.blind:
        o["train.blind"] = True
    return o


def cmd_train(args) -> int:
    cfg = load_config(args.config, _train_overrides(args))
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))
    except OSError as e:
        print(f"error: cannot write to {out}: {e}", file=sys.stderr)
        return EXIT_USAGE
    model = build_model(cfg, seed)
    model.save(out / "init.ckpt")
    train, held = build_data(cfg)
    log.info(
        "training stage=%s kinds=%s deltas/step=%d rank=%d N=%d steps=%d",
        cfg.train.stage, cfg.injection.kinds, model.plan.deltas_per_step(),
        cfg.generator.r, cfg.generator.N, cfg.train.steps,
    )  # fmt: skip
    result = train_loop(model, train, cfg.train, out_dir=out, shuffle_seed=seed)
    ppl = eval_perplexity(model, held, blind=cfg.train.blind)
    summary = {
        "seed": seed,
        "initial_loss": result.losses[0],
        "final_loss_mean100": sum(result.losses[-100:]) / len(result.losses[-100:]),
        "eval_ppl": ppl,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    cfg_path = args.config or ckpt.parent / "config.yaml"
    cfg = load_config(cfg_path, {"train.data_seed": args.data_seed} if args.data_seed is not None else None)
    model = build_model(cfg, 0)
    model.load_state_dict(checkpoint.load(ckpt))
    _, held = build_data(cfg)
    report = {"checkpoint": str(ckpt)}
    if cfg.train.blind:
        report["ppl_blind_trained"] = eval_perplexity(model, held, blind=True)
    else:
        report["ppl"] = eval_perplexity(model, held)
        report["ppl_shuffled_images"] = eval_perplexity(model, held, shuffle_images=True)
        report["ppl_zero_deltas"] = eval_perplexity(model, held, blind=True)
    print(json.dumps(report, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="paramalign", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flops", help="closed-form FLOPs sweep over visual-token counts")
    p.add_argument("--config")
    p.add_argument("--L", type=int, nargs="+", help="visual token counts")
    p.add_argument("--out", help="CSV output path (stdout if omitted)")
    p.add_argument("--table1", action="store_true", help="print the 7B-class GFLOPs next to the published values")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("verify", help="run invariant suites on the tiny config")
    p.add_argument("--seed", type=int)
    p.add_argument("--float64", action="store_true", help="run in 64-bit; gradcheck tolerance 1e-6")
    p.add_argument("--fault", choices=["flip_ws"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="synthetic captioning run")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--stage", choices=["pretrain", "finetune"])
    p.add_argument("--ablate-kinds", choices=ABLATION_SETS)
    p.add_argument("--rank", type=_positive)
    p.add_argument("--pwg-blocks", type=_positive)
    p.add_argument("--blind", action="store_true", help="image-blind control (no deltas)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="held-out perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="defaults to config.yaml next to the checkpoint")
    p.add_argument("--data-seed", type=int)
    p.set_defaults(func=cmd_eval)
    return ap


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, checkpoint.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

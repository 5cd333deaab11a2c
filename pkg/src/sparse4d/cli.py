"""``sparse4d`` command line: gen-scenes, train, eval, grad-check, bench.

Exit codes: 0 success, 1 validation error (bad config, flag or file),
2 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as config_mod
from .errors import ConfigError, ContractError, NumericalError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("sparse4d")


class UsageError(Exception):
    """Bad flag values caught after argument parsing."""


def load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if args.config else config_mod.toy_config()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out_dir=str(args.out))
    return cfg


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if args.out is not None else Path(cfg.out_dir)


def _writable(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from exc
    return path


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_scenes(args) -> int:
    from .training.scene import generate_scene, render_feature_maps, save_scene

    cfg = load_config(args)
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    out = _writable(_out_dir(args, cfg))
    base = args.seed if args.seed is not None else cfg.eval.seed_offset
    for i in range(args.count):
        seed = base + i
        scene = generate_scene(cfg, seed)
        queue = render_feature_maps(scene, cfg) if args.with_features else None
        path = out / f"scene_{seed:012d}.json"
        save_scene(scene, path, queue)
        print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    from .training.train import train

    cfg = load_config(args)
    if args.dry_run:
        result = train(cfg, write=False, steps=1)
        rec = result.records[0]
        print(f"dry run ok: seed={cfg.seed} parameters={sum(p.size for p in result.decoder.parameters())} "
              f"loss={rec['total']:.4f}")
        return EXIT_OK
    out = _writable(_out_dir(args, cfg))
    cfg.save(out / "config.toml")
    t0 = time.perf_counter()
    result = train(cfg, out_dir=out)
    last = result.records[-1]
    print(f"trained {len(result.records)} steps in {time.perf_counter() - t0:.1f}s seed={cfg.seed} "
          f"final loss={last['total']:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics log: {result.log_path}")
    return EXIT_OK


def _eval_scenes(args, cfg):
    from .training.scene import generate_scene, load_cached_queue, load_scene, render_feature_maps

    if args.scenes is None:
        scenes = [generate_scene(cfg, cfg.eval.seed_offset + i) for i in range(cfg.eval.num_scenes)]
        return scenes, None
    folder = Path(args.scenes)
    if not folder.is_dir():
        raise FileNotFoundError(f"scene directory not found: {folder}")
    scenes, queues = [], []
    for path in sorted(folder.glob("*.json")):
        scene, raw = load_scene(path)
        scenes.append(scene)
        queue = load_cached_queue(path, raw, scene)
        queues.append(queue if queue is not None else render_feature_maps(scene, cfg))
    return scenes, queues


def cmd_eval(args) -> int:
    from .training.evaluate import evaluate, format_table
    from .training.train import load_checkpoint

    if args.checkpoint is None:
        raise UsageError("eval needs --checkpoint")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    decoder, cfg, meta = load_checkpoint(ckpt)
    if args.config:
        # evaluation settings may be overridden; the model comes from the checkpoint
        cfg = cfg.replace(eval=config_mod.load(args.config).eval)
    scenes, queues = _eval_scenes(args, cfg)
    metrics = evaluate(decoder, scenes, cfg, queues)
    metrics["checkpoint"] = str(ckpt)
    metrics["seed"] = meta.get("seed")
    print(format_table(metrics))
    out = _writable(Path(args.out) if args.out is not None else ckpt.parent)
    path = out / "eval_metrics.json"
    path.write_text(json.dumps(metrics, indent=1, sort_keys=True))
    print(f"metrics: {path}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import CHECKS, run_check

    names = list(CHECKS)
    if args.op:
        unknown = [n for n in args.op if n not in CHECKS]
        if unknown:
            print(f"unknown op {', '.join(unknown)}; valid ops: {', '.join(names)}", file=sys.stderr)
            return EXIT_INVALID
        names = args.op
    seed = args.seed if args.seed is not None else 0
    tol = 1e-5
    failed = []
    print(f"{'op':<20} {'trials':>6} {'max rel err':>12} {'time':>7}")
    for name in names:
        r = run_check(name, seed)
        status = "ok" if r.passed(tol) else "FAIL"
        print(f"{name:<20} {r.trials:>6} {r.max_error:>12.3e} {r.seconds:>6.2f}s {status}", flush=True)
        if not r.passed(tol):
            failed.append(name)
    if failed:
        print(f"{len(failed)} check(s) above {tol:g}: {', '.join(failed)}")
        return EXIT_RUNTIME
    print(f"all {len(names)} checks below {tol:g}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .flops import SWEEP_AXES, linear_fit_residual, rows_to_csv, sweep

    cfg = load_config(args)
    if args.axis not in SWEEP_AXES:
        raise ConfigError("bench.axis", f"unknown sweep axis {args.axis!r}; choose from {', '.join(SWEEP_AXES)}")
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"--values must be comma-separated integers, got {args.values!r}") from exc
    if not values:
        raise UsageError("--values is empty")
    rows = sweep(cfg, args.axis, values, seed=cfg.seed, repeats=args.repeats)
    text = rows_to_csv(rows)
    print(text, end="")
    if len(values) >= 2:
        res = linear_fit_residual(values, [r.counted_flops for r in rows])
        print(f"linear fit of counted aggregation FLOPs vs {args.axis}: max relative residual {res:.3e}")
    out = _writable(_out_dir(args, cfg))
    path = out / f"bench_{args.axis}.csv"
    path.write_text(text)
    print(f"csv: {path}")
    return EXIT_OK


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config (default: built-in toy config)")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (default 1)")
    common.add_argument("--dry-run", action="store_true", help="validate and run a single step only")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sparse4d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-scenes", parents=[common], help="write synthetic scene files")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--with-features", action="store_true", help="also cache rendered feature maps")
    sub.add_parser("train", parents=[common], help="train and write checkpoint + metrics log")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on held-out scenes")
    p.add_argument("--checkpoint")
    p.add_argument("--scenes", help="directory of scene files (default: generate held-out scenes)")
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--op", action="append", help="run only this check (repeatable)")
    p = sub.add_parser("bench", parents=[common], help="FLOP counts and timing over a sweep")
    p.add_argument("--axis", default="T")
    p.add_argument("--values", default="1,2,4")
    p.add_argument("--repeats", type=int, default=3)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalError, ContractError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

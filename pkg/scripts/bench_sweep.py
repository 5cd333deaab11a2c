"""Aggregation FLOPs and timing along every sweep axis, one CSV per axis.

    python scripts/bench_sweep.py --out runs/bench
"""
import argparse
from pathlib import Path

from sparse4d import config
from sparse4d.flops import linear_fit_residual, rows_to_csv, sweep

AXES = {
    "M": [8, 16, 32, 64],
    "K": [7, 9, 11, 13],
    "T": [1, 2, 3, 4, 5],
    "N": [1, 2, 3, 4],
    "S": [1, 2, 3],
    "C": [24, 32, 48, 64],
    "stages": [1, 2, 4, 6],
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.toml")
    ap.add_argument("--out", default="runs/bench")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    cfg = config.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for axis, values in AXES.items():
        rows = sweep(cfg, axis, values, seed=cfg.seed, repeats=args.repeats)
        (out / f"bench_{axis}.csv").write_text(rows_to_csv(rows))
        # the counted column is one stage's aggregation; stage count only shows in the whole decoder
        counted = [r.decoder_flops if axis == "stages" else r.counted_flops for r in rows]
        res = linear_fit_residual(values, counted)
        step = [b - a for a, b in zip(counted, counted[1:])]
        print(f"{axis:<7} flops {counted}  increments {step}  linear residual {res:.2e}")


if __name__ == "__main__":
    main()

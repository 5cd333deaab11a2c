"""Train the toy decoder and evaluate it on the held-out scenes.

    python scripts/train_toy.py --config configs/toy.toml --out runs/toy
"""
import argparse
import json
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from sparse4d import config
from sparse4d.training.evaluate import evaluate, format_table
from sparse4d.training.scene import generate_scene
from sparse4d.training.train import train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.toml")
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()

    cfg = config.load(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    out = Path(args.out)
    t0 = time.perf_counter()
    with threadpool_limits(limits=cfg.threads):
        result = train(cfg, seed=seed, out_dir=out, steps=args.steps)
        scenes = [generate_scene(cfg, cfg.eval.seed_offset + i) for i in range(cfg.eval.num_scenes)]
        metrics = evaluate(result.decoder, scenes, cfg)
    metrics.update(seed=seed, seconds=time.perf_counter() - t0)
    (out / "eval_metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    print(format_table(metrics))
    print(f"{metrics['seconds']:.0f} s, results in {out}")


if __name__ == "__main__":
    main()

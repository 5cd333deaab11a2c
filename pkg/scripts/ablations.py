"""Toy ablations on identical training and evaluation seeds.

Each variant overrides one config section; results go to one JSON file per
variant plus a summary table on stdout.

    python scripts/ablations.py --out runs/ablations --variants temporal single_frame no_ego
"""
import argparse
import json
from pathlib import Path

from threadpoolctl import threadpool_limits

from sparse4d import config
from sparse4d.training.evaluate import evaluate
from sparse4d.training.scene import generate_scene
from sparse4d.training.train import train

VARIANTS = {
    "temporal": {},
    "single_frame": {"scene": {"num_frames": 1}},
    "no_ego": {"model": {"ego_compensation": False}},
    "no_velocity": {"model": {"velocity_compensation": False}},
    "no_reweight": {"model": {"depth_reweight": False}},
    "sigmoid_weights": {"model": {"weight_norm": "sigmoid"}},
    "fixed_keypoints_only": {"model": {"num_learnable_keypoints": 0}},
}


def run(cfg, name: str, out: Path) -> dict:
    for section, values in VARIANTS[name].items():
        cfg = cfg.replace(**{section: values})
    result = train(cfg, out_dir=out / name)
    scenes = [generate_scene(cfg, cfg.eval.seed_offset + i) for i in range(cfg.eval.num_scenes)]
    metrics = evaluate(result.decoder, scenes, cfg)
    (out / name / "eval_metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/toy.toml")
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--variants", nargs="+", default=["temporal", "single_frame", "no_ego"],
                    choices=sorted(VARIANTS))
    args = ap.parse_args()

    cfg = config.load(args.config)
    out = Path(args.out)
    print(f"{'variant':<22} {'AP@2m':>7} {'center':>8} {'velocity':>9}  stage L1")
    with threadpool_limits(limits=cfg.threads):
        for name in args.variants:
            m = run(cfg, name, out)
            ap2 = m["thresholds"][str(float(cfg.eval.error_threshold))]["ap"]
            l1 = " ".join(f"{v:.3f}" for v in m["stage_l1"])
            print(f"{name:<22} {ap2:>7.3f} {m['center_error']:>8.3f} {m['velocity_error']:>9.3f}  {l1}",
                  flush=True)


if __name__ == "__main__":
    main()

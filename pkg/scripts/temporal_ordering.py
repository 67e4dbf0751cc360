"""Train FF and Ours stylizers per seed and compare temporal error on held-out sequences.

Training frames: five panning "shapes" sequences (50 frames, 40x40).  Style
target: a "stripes" image.  Evaluation: four held-out sequences of other
patterns with exact flow and seam masks.  Lower E_temporal wins; a seed is a
vote for Ours when its mean is strictly lower.

    python scripts/temporal_ordering.py --seeds 0 1 2 --out runs/temporal
"""

import argparse
import json
from pathlib import Path

import torch

from shiftgan.imaging import render_synthetic_sequence
from shiftgan.metrics import compare_variants, write_ranking_csv
from shiftgan.networks import random_taps
from shiftgan.training import preset, train_style

VARIANTS = ("FF", "Ours")
EVAL_PATTERNS = ("shapes", "noise", "checker", "shapes")


def training_frames():
    frames = []
    for s in range(5):
        frames += render_synthetic_sequence("shapes", 10, (1, 1), size=(40, 40), seed=100 + s)[0]
    return frames


def eval_sequences():
    return [render_synthetic_sequence(p, 6, (1, 0), size=(32, 32), seed=500 + s, strict=True)
            for s, p in enumerate(EVAL_PATTERNS)]


def run(seeds=(0, 1, 2), steps=None, out=None):
    frames = training_frames()
    style = render_synthetic_sequence("stripes", 2, (0, 0), size=(40, 40), seed=7)[0][0]
    taps = random_taps(seed=0, width_divisor=8)
    sequences = eval_sequences()
    per_seed = []
    for seed in seeds:
        models = {}
        for variant in VARIANTS:
            cfg = preset("desk-style")
            cfg.seed, cfg.style_variant = seed, variant
            if steps is not None:
                cfg.steps = steps
            models[variant] = train_style(cfg, frames, style, taps).stylizer
        rows = compare_variants(models, sequences)
        scores = {name: score for name, score, _ in rows}
        per_seed.append({"seed": seed, **scores, "ours_wins": scores["Ours"] < scores["FF"]})
        if out:
            write_ranking_csv(rows, Path(out) / f"ranking_seed{seed}.csv")
    wins = sum(r["ours_wins"] for r in per_seed)
    summary = {"per_seed": per_seed, "ours_wins": wins, "majority": wins * 2 > len(per_seed)}
    if out:
        (Path(out) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--steps", type=int)
    parser.add_argument("--out")
    args = parser.parse_args()
    torch.set_num_threads(1)
    summary = run(args.seeds, args.steps, args.out)
    for row in summary["per_seed"]:
        print(f"seed {row['seed']}: FF={row['FF']:.5f} Ours={row['Ours']:.5f}")
    print(f"Ours wins {summary['ours_wins']}/{len(summary['per_seed'])}")


if __name__ == "__main__":
    main()

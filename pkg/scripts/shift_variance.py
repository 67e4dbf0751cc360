"""Twin adaptation runs with and without the shift loss, then a shift-probe comparison.

Both runs share the seed, data and schedule (desk-adapt preset); only the
shift weight differs.  Each trained pair is probed on held-out frames of both
domains (sim frames through G_R, real frames through G_S), along x and y,
under the overlap-crop policy, and the mean discrepancy over shifts 1..K-1 is
reported.

    python scripts/shift_variance.py --steps 2000 --out runs/shift_variance
"""

import argparse
import json
from pathlib import Path

import numpy as np
import torch

from shiftgan import shiftops
from shiftgan.imaging import render_two_palette_corpus
from shiftgan.networks import pixel_accuracy, pretrain_segmenter, toy_segmenter
from shiftgan.training import preset, train_adapt


def probe_mean(models, sim_frames, real_frames, k):
    shifts = list(range(1, k))
    values = []
    for gen, frames in ((models.g_r, sim_frames), (models.g_s, real_frames)):
        for x in frames:
            for axis in ("x", "y"):
                result = shiftops.probe_shift_invariance(gen, x, k - 1, axis=axis, policy=shiftops.OVERLAP_CROP)
                values.append(result.mean_discrepancy(shifts))
    return float(np.mean(values)), values


def run(steps=2000, seed=0, train_count=30, heldout=20, size=72, shift_weight=1000.0, out=None, progress=None):
    sim, sim_labels, real, _ = render_two_palette_corpus(train_count + heldout, size, seed=seed)
    train_sim, train_real = sim[:train_count], real[:train_count]
    test_sim, test_real = sim[train_count:], real[train_count:]

    seg = pretrain_segmenter(toy_segmenter(3, seed=seed), torch.stack(train_sim),
                             torch.stack(sim_labels[:train_count]), seed=seed)
    summary = {"steps": steps, "seed": seed, "heldout_per_domain": heldout,
               "segmenter_accuracy": pixel_accuracy(seg, torch.stack(test_sim), torch.stack(sim_labels[train_count:]))}
    for name, weight in (("baseline", 0.0), ("shift", shift_weight)):
        cfg = preset("desk-adapt")
        cfg.seed, cfg.steps, cfg.decay_start = seed, steps, steps // 2
        cfg.weights.shift = weight
        run_dir = Path(out) / name if out else None
        result = train_adapt(cfg, train_sim, train_real, segmenter=seg, out_dir=run_dir, progress=progress)
        mean, values = probe_mean(result.models, test_sim, test_real, cfg.generator.k)
        cyc = np.array(result.log.column("cyc_s")) + np.array(result.log.column("cyc_r"))
        summary[name] = {"shift_weight": weight, "probe_mean": mean, "probe_values": values,
                         "cycle_at_50": float(cyc[min(50, len(cyc) - 1)]),
                         "cycle_final": float(cyc[-20:].mean())}
    summary["ratio"] = summary["shift"]["probe_mean"] / summary["baseline"]["probe_mean"]
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--heldout", type=int, default=20)
    parser.add_argument("--out")
    args = parser.parse_args()
    torch.set_num_threads(1)
    s = run(args.steps, args.seed, heldout=args.heldout, out=args.out)
    for name in ("baseline", "shift"):
        print(f"{name:8s} probe={s[name]['probe_mean']:.6g} cycle@50={s[name]['cycle_at_50']:.4f} "
              f"cycle_final={s[name]['cycle_final']:.4f}")
    print(f"ratio={s['ratio']:.4f}")


if __name__ == "__main__":
    main()

"""Pretrain the toy sim-domain segmenter and report its accuracy on both domains.

The accuracy drop on the real palette is the domain gap the adaptation
generators are meant to close.

    python scripts/pretrain_segmenter.py --out runs/segmenter.pt
"""

import argparse

import torch

from shiftgan.imaging import render_two_palette_corpus
from shiftgan.networks import pixel_accuracy, pretrain_segmenter, toy_segmenter


def run(count=60, size=72, steps=300, seed=0):
    sim, sim_labels, real, real_labels = render_two_palette_corpus(count, size, seed=seed)
    half = count // 2
    seg = pretrain_segmenter(toy_segmenter(3, seed=seed), torch.stack(sim[:half]), torch.stack(sim_labels[:half]),
                             steps=steps, seed=seed)
    return seg, {"sim_heldout": pixel_accuracy(seg, torch.stack(sim[half:]), torch.stack(sim_labels[half:])),
                 "real_heldout": pixel_accuracy(seg, torch.stack(real[half:]), torch.stack(real_labels[half:]))}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--steps", type=int, default=300)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out")
    args = parser.parse_args()
    seg, acc = run(steps=args.steps, seed=args.seed)
    print(f"pixel accuracy: sim {acc['sim_heldout']:.4f}  real {acc['real_heldout']:.4f}")
    if args.out:
        torch.save({"num_classes": seg.num_classes, "state": seg.model.state_dict()}, args.out)


if __name__ == "__main__":
    main()

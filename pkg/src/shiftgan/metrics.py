"""Temporal consistency of stylized or translated sequences under ground-truth flow."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from shiftgan.errors import ContractError
from shiftgan.imaging import save_image, warp


@dataclass
class TemporalReport:
    e_temporal: float
    per_transition: list
    error_maps: list = field(repr=False, default_factory=list)
    frames: int = 0
    elements: int = 0

    def to_dict(self):
        return {
            "e_temporal": self.e_temporal,
            "per_transition": list(self.per_transition),
            "frames": self.frames,
            "elements": self.elements,
        }


@torch.no_grad()
def temporal_error(outputs, flows, masks):
    """RMS over transitions of occlusion-masked warping residuals.

    ``outputs`` is a list of T ``(C, H, W)`` frames; ``flows`` and ``masks``
    hold T-1 ``(2, H, W)`` flows and ``(H, W)`` masks, flow t mapping frame
    t+1 onto frame t.  The normaliser is ``(T - 1) * M`` with
    ``M = C * H * W``, independent of the masks.

    ``per_transition`` holds each transition's mean masked squared error and
    ``error_maps`` the per-pixel masked squared error summed over channels.
    """
    t_len = len(outputs)
    if t_len < 2:
        raise ContractError("need at least two frames")
    if len(flows) != t_len - 1 or len(masks) != t_len - 1:
        raise ContractError(f"{t_len} frames need {t_len - 1} flows and masks, "
                            f"got {len(flows)} and {len(masks)}")
    shape = outputs[0].shape
    if any(o.shape != shape for o in outputs):
        raise ContractError("all frames must share one shape")
    elements = math.prod(shape)
    # float64 accumulation, transitions reduced in order
    total = 0.0
    per_transition, maps = [], []
    for t in range(t_len - 1):
        prev = outputs[t].double()
        warped = warp(outputs[t + 1].double(), flows[t].double())
        err = masks[t].double().unsqueeze(0) * (prev - warped) ** 2
        s = float(err.sum())
        total += s
        per_transition.append(s / elements)
        maps.append(err.sum(dim=0).float())
    e = math.sqrt(total / ((t_len - 1) * elements))
    return TemporalReport(e, per_transition, maps, t_len, elements)


def render_error_maps(maps, out_dir, prefix="error"):
    """Write error maps as grayscale PNGs, linear from 0 to the 99th percentile.

    Returns the scale (the value mapped to white).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = torch.cat([m.flatten() for m in maps]).numpy()
    scale = float(np.percentile(values, 99)) if values.size else 0.0
    denom = scale if scale > 0 else 1.0
    for k, m in enumerate(maps):
        gray = (m / denom).clamp(0, 1) * 2 - 1
        save_image(gray.unsqueeze(0), out_dir / f"{prefix}_{k:04d}.png")
    (out_dir / f"{prefix}_scale.json").write_text(json.dumps({"white": scale, "black": 0.0}))
    return scale


@torch.no_grad()
def compare_variants(stylizers, sequences):
    """Mean temporal error of each stylizer over evaluation sequences, best first.

    ``stylizers`` maps a name to a callable on ``(N, C, H, W)`` batches;
    ``sequences`` is a list of ``(frames, flows, masks)``.  Returns a list of
    ``(name, mean_e_temporal, reports)`` sorted by score.
    """
    rows = []
    for name, model in stylizers.items():
        reports = []
        for frames, flows, masks in sequences:
            outs = model(torch.stack(frames))
            reports.append(temporal_error(list(outs), flows, masks))
        rows.append((name, float(np.mean([r.e_temporal for r in reports])), reports))
    rows.sort(key=lambda row: row[1])
    return rows


def write_ranking_csv(rows, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "checkpoint", "mean_e_temporal"])
        for rank, (name, score, _) in enumerate(rows, start=1):
            writer.writerow([rank, name, f"{score:.10g}"])

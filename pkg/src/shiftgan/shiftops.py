"""Integer image shifts, shift sampling, the shift loss, and the shift-invariance probe.

A shift by ``(i, j)`` moves content ``i`` pixels along X (columns) and ``j``
pixels along Y (rows): ``out[..., y, x] = in[..., y - j, x - i]``.

Two boundary policies are supported:

``circular``
    wrap-around (``torch.roll``); exact, full size, used for equivariance tests.
``overlap-crop``
    never invents content.  The shifted view of a region ``x`` is another crop
    of the same region; generator outputs are only compared where both crops
    see the same pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from shiftgan.errors import ContractError

CIRCULAR = "circular"
OVERLAP_CROP = "overlap-crop"
POLICIES = (CIRCULAR, OVERLAP_CROP)


def check_policy(policy):
    if policy not in POLICIES:
        raise ContractError(f"unknown shift policy {policy!r}; choose from {POLICIES}")
    return policy


def shift(image, offset, policy=CIRCULAR):
    """Shift ``image`` (``(..., H, W)``) by ``offset = (i, j)``.

    Circular policy returns the rolled image.  Overlap-crop returns
    ``(shifted, valid)`` where the band that has no source pixel is zero in
    ``shifted`` and 0 in the ``(H, W)`` ``valid`` mask.
    """
    i, j = (int(v) for v in offset)
    height, width = image.shape[-2:]
    if abs(i) >= width or abs(j) >= height:
        raise ContractError(f"shift {(i, j)} is not smaller than image extent {(width, height)}")
    check_policy(policy)
    if policy == CIRCULAR:
        if i == 0 and j == 0:
            return image.clone()
        return torch.roll(image, shifts=(j, i), dims=(-2, -1))
    out = torch.zeros_like(image)
    valid = torch.zeros(height, width, dtype=image.dtype, device=image.device)
    dst_y, src_y = _band(j, height)
    dst_x, src_x = _band(i, width)
    out[..., dst_y, dst_x] = image[..., src_y, src_x]
    valid[dst_y, dst_x] = 1
    return out, valid


def _band(offset, extent):
    if offset >= 0:
        return slice(offset, extent), slice(0, extent - offset)
    return slice(0, extent + offset), slice(-offset, extent)


def sample_shift(k, rng):
    """Draw ``(i, j)`` independently and uniformly from ``{1, ..., k - 1}``."""
    if k < 2:
        raise ContractError(f"downsampling factor must be >= 2, got {k}")
    i, j = rng.integers(1, k, size=2)
    return int(i), int(j)


def overlap_crops(x, offset, size=None):
    """Split region ``x`` into a base crop and its ``offset``-shifted twin.

    Returns ``(base, shifted, overlap)`` where ``shifted == shift(base, offset)``
    wherever ``overlap`` is 1, and both crops are genuine pixels of ``x``.
    ``size`` defaults to the largest crop that fits, ``(H - |j|, W - |i|)``.
    """
    i, j = (int(v) for v in offset)
    height, width = x.shape[-2:]
    if size is None:
        size = (height - abs(j), width - abs(i))
    h, w = size
    if h + abs(j) > height or w + abs(i) > width:
        raise ContractError(f"region {(height, width)} too small for crop {size} shifted by {(i, j)}")
    if abs(i) >= w or abs(j) >= h:
        raise ContractError(f"shift {(i, j)} leaves no overlap inside a {size} crop")
    # shifted(y, x) = base(y - j, x - i): the base crop sits (j, i) further into the region
    by, sy = (j, 0) if j >= 0 else (0, -j)
    bx, sx = (i, 0) if i >= 0 else (0, -i)
    base = x[..., by:by + h, bx:bx + w]
    shifted = x[..., sy:sy + h, sx:sx + w]
    overlap = torch.zeros(h, w, dtype=x.dtype, device=x.device)
    overlap[_band(j, h)[0], _band(i, w)[0]] = 1
    return base, shifted, overlap


def shift_loss(generator, x, offset, policy=CIRCULAR, size=None, shifted_output=None):
    """Mean squared mismatch between ``shift(G(x))`` and ``G(shift(x))``.

    Under ``overlap-crop``, ``x`` is the sampling region (see
    :func:`overlap_crops`) and the mean runs over the overlap only.
    ``shifted_output`` may carry an already computed ``G`` of the shifted view
    (``G(x)`` itself under the circular policy) to save a forward pass.
    """
    check_policy(policy)
    if policy == CIRCULAR:
        out = generator(x) if shifted_output is None else shifted_output
        return torch.mean((shift(out, offset) - generator(shift(x, offset))) ** 2)
    base, shifted, overlap = overlap_crops(x, offset, size)
    if overlap.sum() == 0:
        raise ContractError("empty comparison region")
    moved, _ = shift(generator(base), offset, OVERLAP_CROP)
    target = generator(shifted) if shifted_output is None else shifted_output
    diff2 = (moved - target) ** 2 * overlap
    count = overlap.sum() * diff2.numel() / overlap.numel()
    return diff2.sum() / count


@dataclass
class ProbeResult:
    axis: str
    policy: str
    shifts: list = field(default_factory=list)
    discrepancies: list = field(default_factory=list)
    # (shift(G(x)), G(shift(x))) per shift, cropped to the compared region
    outputs: list = field(default_factory=list)

    def mean_discrepancy(self, shifts=None):
        pick = [d for s, d in zip(self.shifts, self.discrepancies) if shifts is None or s in shifts]
        return float(np.mean(pick))

    def to_csv(self):
        lines = ["shift,axis,policy,discrepancy"]
        lines += [f"{s},{self.axis},{self.policy},{d:.10g}" for s, d in zip(self.shifts, self.discrepancies)]
        return "\n".join(lines) + "\n"


@torch.no_grad()
def probe_shift_invariance(generator, x, max_shift, axis="x", policy=CIRCULAR, include_zero=True):
    """Measure shift discrepancy for every integer shift ``0..max_shift`` along one axis.

    ``x`` is a ``(C, H, W)`` or ``(N, C, H, W)`` image.  Under ``overlap-crop``
    all shifts use one crop size, ``extent - max_shift``, so only the offset
    varies between rows of the table.
    """
    check_policy(policy)
    axis = axis.lower()
    if axis not in ("x", "y"):
        raise ContractError(f"axis must be 'x' or 'y', got {axis!r}")
    if x.dim() == 3:
        x = x.unsqueeze(0)
    height, width = x.shape[-2:]
    extent = width if axis == "x" else height
    if max_shift >= extent:
        raise ContractError(f"max_shift {max_shift} must be below the image extent {extent}")
    size = None
    if policy == OVERLAP_CROP:
        size = (height, width - max_shift) if axis == "x" else (height - max_shift, width)
    result = ProbeResult(axis=axis, policy=policy)
    base_out = generator(x) if policy == CIRCULAR else None
    for d in range(0 if include_zero else 1, max_shift + 1):
        offset = (d, 0) if axis == "x" else (0, d)
        if policy == CIRCULAR:
            moved = shift(base_out, offset)
            target = generator(shift(x, offset))
            disc = torch.mean((moved - target) ** 2)
        else:
            base, shifted, overlap = overlap_crops(x, offset, size)
            moved, _ = shift(generator(base), offset, OVERLAP_CROP)
            target = generator(shifted)
            rows = overlap.sum(dim=1) > 0
            cols = overlap.sum(dim=0) > 0
            moved = moved[..., rows, :][..., cols]
            target = target[..., rows, :][..., cols]
            disc = torch.mean((moved - target) ** 2)
        result.shifts.append(d)
        result.discrepancies.append(float(disc))
        result.outputs.append((moved[0].clone(), target[0].clone()))
    return result

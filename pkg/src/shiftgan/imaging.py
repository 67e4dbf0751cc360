"""Image, flow and label I/O, flow warping, and synthetic data.

In-memory conventions used across the package:

* images are float32 tensors shaped ``(C, H, W)`` (or batched ``(N, C, H, W)``)
  with values in [-1, 1];
* flows are float32 tensors shaped ``(2, H, W)`` (or ``(N, 2, H, W)``), channel 0
  holding dx and channel 1 holding dy, in pixels.  A flow annotating the pair
  (t, t+1) maps frame t+1 coordinates back onto frame t content, so that
  ``warp(frame[t + 1], flow)`` lines up with ``frame[t]``;
* label maps are int64 tensors ``(H, W)``; occlusion masks float32 ``(H, W)``.

``.flo`` files are read and written as numpy ``(H, W, 2)`` arrays, the layout
they have on disk; :func:`flow_to_tensor` / :func:`flow_to_array` convert.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage
from scipy import ndimage

from shiftgan.errors import ContractError, FormatError

FLO_MAGIC = 202021.25
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


# ---------------------------------------------------------------------------
# images, labels, masks


def load_image(path):
    """Load an 8-bit grayscale or RGB file as a ``(C, H, W)`` tensor in [-1, 1]."""
    path = Path(path)
    try:
        pil = PILImage.open(path)
        pil.load()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if pil.mode == "P":
        pil = pil.convert("RGB")
    if pil.mode not in ("L", "RGB"):
        raise FormatError(f"{path}: unsupported image mode {pil.mode!r} (need 8-bit L or RGB)")
    arr = np.asarray(pil, dtype=np.uint8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return uint8_to_tensor(arr)


def uint8_to_tensor(arr):
    """Map an ``(H, W, C)`` uint8 array linearly from [0, 255] to [-1, 1]."""
    data = np.asarray(arr, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)
    return torch.from_numpy(np.ascontiguousarray(data.transpose(2, 0, 1)))


def tensor_to_uint8(image):
    """Inverse of :func:`uint8_to_tensor`, with rounding and clipping."""
    arr = image.detach().cpu().float().numpy().transpose(1, 2, 0)
    arr = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255)
    return arr.astype(np.uint8)


def save_image(image, path):
    arr = tensor_to_uint8(image)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path)


def load_label_map(path, num_classes=None):
    arr = np.asarray(PILImage.open(path))
    if arr.ndim != 2:
        raise FormatError(f"{path}: label map must be single-channel")
    labels = torch.from_numpy(arr.astype(np.int64))
    if num_classes is not None and int(labels.max()) >= num_classes:
        raise FormatError(f"{path}: label {int(labels.max())} >= num_classes={num_classes}")
    return labels


def save_label_map(labels, path):
    arr = np.asarray(labels, dtype=np.int64)
    if arr.min() < 0 or arr.max() > 255:
        raise ContractError("label indices must fit in 8 bits")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr.astype(np.uint8), mode="L").save(path)


def load_mask(path):
    arr = np.asarray(PILImage.open(path).convert("L"), dtype=np.float32) / np.float32(255.0)
    return torch.from_numpy(arr)


def save_mask(mask, path):
    arr = np.clip(np.rint(np.asarray(mask, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# Middlebury .flo


def read_flo(path):
    """Read a Middlebury ``.flo`` file into a float32 ``(H, W, 2)`` array."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated .flo header")
    (magic,) = struct.unpack("<f", raw[:4])
    if magic != FLO_MAGIC:
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    width, height = struct.unpack("<ii", raw[4:12])
    if width < 1 or height < 1:
        raise FormatError(f"{path}: invalid .flo dimensions {width}x{height}")
    expected = width * height * 2 * 4
    if len(raw) - 12 != expected:
        raise FormatError(f"{path}: .flo payload is {len(raw) - 12} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width, 2)
    return data.astype(np.float32)


def write_flo(flow, path):
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ContractError(f"flow must be (H, W, 2), got {flow.shape}")
    height, width = flow.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<f", FLO_MAGIC))
        fh.write(struct.pack("<ii", width, height))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def flow_to_tensor(flow):
    """``(H, W, 2)`` array -> ``(2, H, W)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(flow, dtype=np.float32).transpose(2, 0, 1)))


def flow_to_array(flow):
    """``(2, H, W)`` tensor -> ``(H, W, 2)`` float32 array."""
    return np.ascontiguousarray(flow.detach().cpu().numpy().transpose(1, 2, 0)).astype(np.float32)


# ---------------------------------------------------------------------------
# warping


def warp(image, flow):
    """Bilinearly resample ``image`` at ``(y + dy, x + dx)`` with border clamping.

    ``image`` is ``(C, H, W)`` or ``(N, C, H, W)``; ``flow`` is ``(2, H, W)`` or
    ``(N, 2, H, W)``.  Differentiable in both arguments (almost everywhere).
    """
    squeeze = image.dim() == 3
    if squeeze:
        image = image.unsqueeze(0)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    if image.dim() != 4 or flow.dim() != 4 or flow.shape[1] != 2:
        raise ContractError(f"bad warp shapes: image {tuple(image.shape)}, flow {tuple(flow.shape)}")
    if image.shape[-2:] != flow.shape[-2:]:
        raise ContractError(f"flow {tuple(flow.shape[-2:])} does not match image {tuple(image.shape[-2:])}")
    if flow.shape[0] != image.shape[0]:
        flow = flow.expand(image.shape[0], -1, -1, -1)
    n, c, h, w = image.shape
    flow = flow.to(image.dtype)
    ys = torch.arange(h, dtype=image.dtype, device=image.device).view(1, h, 1)
    xs = torch.arange(w, dtype=image.dtype, device=image.device).view(1, 1, w)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)
    x0f = sx.detach().floor()
    y0f = sy.detach().floor()
    wx = (sx - x0f).unsqueeze(1)
    wy = (sy - y0f).unsqueeze(1)
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = image.reshape(n, c, h * w)

    def gather(yi, xi):
        idx = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, idx).view(n, c, h, w)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# synthetic data

PATTERNS = ("noise", "checker", "stripes", "shapes")


def _base_canvas(pattern, height, width, channels, rng):
    if pattern == "noise":
        field = rng.standard_normal((height, width, channels))
        field = ndimage.gaussian_filter(field, sigma=(1.2, 1.2, 0), mode="wrap")
        field /= field.std() + 1e-8
        return np.tanh(field)
    if pattern == "checker":
        cell = 4
        colors = rng.uniform(-1, 1, size=(2, channels))
        yy, xx = np.mgrid[0:height, 0:width]
        parity = ((yy // cell) + (xx // cell)) % 2
        canvas = colors[parity]
        return np.clip(canvas + 0.1 * rng.standard_normal(canvas.shape), -1, 1)
    if pattern == "stripes":
        xx = np.arange(width)[None, :, None]
        yy = np.arange(height)[:, None, None]
        phase = rng.uniform(0, 2 * np.pi, size=(1, 1, channels))
        # integer wave numbers keep the canvas periodic
        kx, ky = rng.integers(1, 4, size=2)
        canvas = np.sin(2 * np.pi * (kx * xx / width + ky * yy / height) + phase)
        return np.broadcast_to(canvas, (height, width, channels)).copy()
    if pattern == "shapes":
        image, _ = render_shapes(height, width, rng, palette=0)
        if channels == 1:
            image = image.mean(axis=2, keepdims=True)
        return image
    raise ContractError(f"unknown pattern {pattern!r}; choose from {PATTERNS}")


def render_synthetic_sequence(pattern, frames, velocity, size=(32, 32), channels=3, seed=0, strict=False):
    """Render a textured circular canvas panned by ``velocity`` pixels per frame.

    Frame t shows the canvas with the viewport moved by ``t * velocity``, so
    frame t+1 is frame t circularly shifted by ``-velocity`` and the exact
    ground-truth flow is the constant field ``(-dx, -dy)``.  Returns
    ``(frames, flows, masks)`` with ``frames - 1`` flows and masks.  Masks are
    all ones unless ``strict``, in which case the border band whose warp
    samples would be clamped (the wrap seam) is zeroed.
    """
    if frames < 2:
        raise ContractError("need at least two frames")
    dx, dy = (int(v) for v in velocity)
    if (dx, dy) != tuple(velocity):
        raise ContractError("synthetic velocities must be integer pixels")
    height, width = size
    rng = np.random.default_rng(seed)
    canvas = _base_canvas(pattern, height, width, channels, rng).astype(np.float32)
    seq = []
    for t in range(frames):
        rolled = np.roll(canvas, shift=(-t * dy, -t * dx), axis=(0, 1))
        seq.append(torch.from_numpy(np.ascontiguousarray(rolled.transpose(2, 0, 1))))
    flow = torch.empty(2, height, width, dtype=torch.float32)
    flow[0] = -dx
    flow[1] = -dy
    mask = torch.ones(height, width, dtype=torch.float32)
    if strict:
        mask = seam_mask(height, width, -dx, -dy)
    flows = [flow.clone() for _ in range(frames - 1)]
    masks = [mask.clone() for _ in range(frames - 1)]
    return seq, flows, masks


def seam_mask(height, width, flow_dx, flow_dy):
    """Mask that zeroes pixels whose constant-flow sample falls outside the frame."""
    ys = torch.arange(height).view(-1, 1) + flow_dy
    xs = torch.arange(width).view(1, -1) + flow_dx
    valid = (ys >= 0) & (ys <= height - 1) & (xs >= 0) & (xs <= width - 1)
    return valid.float()


# colours per palette: background, class 1, class 2
PALETTES = (
    np.array([[-0.7, -0.7, -0.6], [0.9, -0.5, -0.6], [-0.6, -0.3, 0.9]]),
    np.array([[0.6, 0.5, 0.2], [0.2, 0.9, -0.4], [-0.7, 0.1, -0.2]]),
)


def render_shapes(height, width, rng, palette=0, max_shapes=4):
    """Random discs and boxes on a textured background.

    Returns an ``(H, W, 3)`` float image in [-1, 1] and the ``(H, W)`` label map
    (0 background, 1 and 2 the two object classes).  Class identity is carried
    by colour, so a small per-pixel classifier can learn it.
    """
    colors = PALETTES[palette]
    labels = np.zeros((height, width), dtype=np.int64)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(1, max_shapes + 1))):
        cls = int(rng.integers(1, 3))
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        r = rng.uniform(min(height, width) / 10, min(height, width) / 4)
        if rng.random() < 0.5:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r**2
        else:
            inside = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.5, 1.5))
        labels[inside] = cls
    image = colors[labels]
    texture = ndimage.gaussian_filter(rng.standard_normal((height, width)), 1.0, mode="wrap")
    image = image + 0.15 * texture[:, :, None]
    return np.clip(image, -1, 1).astype(np.float32), labels


# ---------------------------------------------------------------------------
# datasets


def _images_in(directory):
    if not directory.is_dir():
        return []
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


class DomainDataset:
    """Images of one domain under ``root/<domain>/``.

    Optional companions: ``root/sem<X>/<stem>.png`` label maps (X is the last
    letter of the domain directory, e.g. ``trainA`` -> ``semA``), and
    per-sequence ``root/flow/*.flo`` plus ``root/occ/*.png`` where flow k
    annotates the consecutive pair (k, k+1) of the sorted frames.
    """

    def __init__(self, root, domain="trainA", seed=0, num_classes=None):
        self.root = Path(root)
        self.domain = domain
        self.seed = seed
        self.num_classes = num_classes
        self.images = _images_in(self.root / domain)
        self.sem_dir = self.root / f"sem{domain[-1]}"
        flow_dir = self.root / "flow"
        self.flow_files = sorted(flow_dir.glob("*.flo")) if flow_dir.is_dir() else []
        self.occ_files = _images_in(self.root / "occ")
        self._rng = np.random.default_rng(seed)
        self._cache = {}

    def __len__(self):
        return len(self.images)

    def __getitem__(self, index):
        if index not in self._cache:
            self._cache[index] = load_image(self.images[index])
        return self._cache[index]

    @property
    def has_labels(self):
        return bool(self.images) and (self.sem_dir / (self.images[0].stem + ".png")).exists()

    @property
    def has_flow(self):
        return len(self.images) >= 2 and len(self.flow_files) >= len(self.images) - 1

    def labels(self, index):
        path = self.sem_dir / (self.images[index].stem + ".png")
        if not path.exists():
            return None
        return load_label_map(path, self.num_classes)

    def flow(self, index):
        """Flow annotating frames (index, index + 1), as a ``(2, H, W)`` tensor."""
        flow = flow_to_tensor(read_flo(self.flow_files[index]))
        image = self[index]
        if flow.shape[-2:] != image.shape[-2:]:
            raise FormatError(f"{self.flow_files[index]}: flow size {tuple(flow.shape[-2:])} "
                              f"does not match frame size {tuple(image.shape[-2:])}")
        return flow

    def mask(self, index):
        if index < len(self.occ_files):
            return load_mask(self.occ_files[index])
        return torch.ones(self[index].shape[-2:])

    def sample_index(self):
        if not self.images:
            raise ContractError(f"no images under {self.root / self.domain}")
        return int(self._rng.integers(len(self.images)))

    def sample(self):
        return self[self.sample_index()]

    def reseed(self, seed):
        self.seed = seed
        self._rng = np.random.default_rng(seed)


def render_two_palette_corpus(count, size=72, seed=0):
    """Unpaired toy corpus: ``count`` palette-0 (sim) and palette-1 (real) shape images.

    Returns ``(sim, sim_labels, real, real_labels)`` as lists of tensors.
    """
    rng = np.random.default_rng(seed)
    out = ([], [], [], [])
    for palette in (0, 1):
        for _ in range(count):
            image, labels = render_shapes(size, size, rng, palette=palette)
            out[2 * palette].append(torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))))
            out[2 * palette + 1].append(torch.from_numpy(labels))
    return out

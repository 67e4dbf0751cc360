"""Training drivers for unpaired adaptation and feed-forward stylization."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from shiftgan import losses, shiftops
from shiftgan.errors import ConfigError, ContractError, TrainingDiverged
from shiftgan.networks import (DiscriminatorSpec, GeneratorSpec, build_discriminator,
                               build_generator)

CHECKPOINT_VERSION = 1
STYLE_VARIANTS = ("FF", "FF+flow", "Ours")


@dataclass
class TrainConfig:
    mode: str = "adapt"
    data_root: str = ""
    style_image: str = ""
    crop_size: int = 64
    steps: int = 2000
    learning_rate: float = 2e-4
    betas: tuple = (0.5, 0.999)
    lr_schedule: str = "constant"
    decay_start: int = 0
    batch_size: int = 1
    seed: int = 0
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    policy: str = shiftops.OVERLAP_CROP
    fake_buffer_size: int = 50
    style_variant: str = "FF"
    gan_mode: str = "lsgan"
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    num_classes: int = 3
    segmenter_steps: int = 300
    perceptual: str = "random"
    perceptual_width_divisor: int = 8
    # style mode: pixel-space terms (shift, flow, spatial) are measured as if
    # images spanned [0, pixel_range], the units the published weights assume
    pixel_range: float = 255.0
    checkpoint_every: int = 0

    def validate(self):
        if self.mode not in ("adapt", "style"):
            raise ConfigError(f"mode must be 'adapt' or 'style', got {self.mode!r}")
        if self.style_variant not in STYLE_VARIANTS:
            raise ConfigError(f"style_variant must be one of {STYLE_VARIANTS}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ConfigError("lr_schedule must be 'constant' or 'linear'")
        if self.lr_schedule == "linear" and not 0 <= self.decay_start < self.steps:
            raise ConfigError("decay_start must lie in [0, steps)")
        if self.steps < 1 or self.batch_size < 1 or self.crop_size < 1:
            raise ConfigError("steps, batch_size and crop_size must be positive")
        if self.fake_buffer_size < 0:
            raise ConfigError("fake_buffer_size must be >= 0")
        try:
            shiftops.check_policy(self.policy)
            self.generator.validate()
        except ContractError as exc:
            raise ConfigError(str(exc)) from exc
        if self.mode == "adapt" and self.crop_size < self.discriminator.receptive_field:
            raise ConfigError(f"crop {self.crop_size} is smaller than the discriminator's "
                              f"{self.discriminator.receptive_field}px receptive field")
        return self

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["generator"] = self.generator.to_dict()
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        nested = {"weights": losses.LossWeights, "generator": GeneratorSpec,
                  "discriminator": DiscriminatorSpec}
        for key, kind in nested.items():
            if key in data and isinstance(data[key], dict):
                sub_known = {f.name for f in fields(kind)}
                bad = set(data[key]) - sub_known
                if bad:
                    raise ConfigError(f"unknown {key} keys: {sorted(bad)}")
                data[key] = kind(**data[key])
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        return cls(**data)


def preset(name):
    """Named configurations; ``desk-*`` run on a CPU, ``full-*`` follow the published setup."""
    if name == "desk-adapt":
        return TrainConfig(
            mode="adapt", crop_size=64, steps=2000, lr_schedule="linear", decay_start=1000,
            weights=losses.LossWeights(cyc=10.0, sem=1.0, shift=1000.0),
            generator=GeneratorSpec(base_width=16, n_residual=6),
            discriminator=DiscriminatorSpec(base_width=16, n_layers=2),
            fake_buffer_size=50)
    if name == "full-adapt":
        # 100 + 100 epochs of 256x256 crops; steps are per-image iterations
        return TrainConfig(
            mode="adapt", crop_size=256, steps=200, lr_schedule="linear", decay_start=100,
            weights=losses.LossWeights(cyc=10.0, sem=1.0, shift=1000.0),
            generator=GeneratorSpec(base_width=64, n_residual=9))
    if name == "desk-style":
        return TrainConfig(
            mode="style", crop_size=32, steps=400, learning_rate=1e-3, style_variant="Ours",
            generator=GeneratorSpec(base_width=8, n_residual=2), perceptual_width_divisor=8)
    if name == "full-style":
        return TrainConfig(
            mode="style", crop_size=256, steps=40000, learning_rate=1e-3, style_variant="Ours",
            generator=GeneratorSpec(base_width=32, n_residual=5), perceptual_width_divisor=1)
    raise ConfigError(f"unknown preset {name!r}")


def lr_at(config, step):
    """Learning rate for 0-based ``step``; linear decay hits exactly 0 at the last step."""
    base = config.learning_rate
    if config.lr_schedule == "constant" or step < config.decay_start:
        return base
    span = config.steps - 1 - config.decay_start
    if span <= 0:
        return 0.0
    return base * max(0.0, 1.0 - (step - config.decay_start) / span)


# ---------------------------------------------------------------------------
# sampling helpers


class FakeBuffer:
    """History of generated images replayed to the discriminator."""

    def __init__(self, capacity=50, rng=None):
        self.capacity = capacity
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.images = []

    def __len__(self):
        return len(self.images)

    def query(self, batch):
        if self.capacity == 0:
            return batch
        out = []
        for image in batch.detach():
            image = image.clone()
            if len(self.images) < self.capacity:
                self.images.append(image)
                out.append(image)
            elif self.rng.random() < 0.5:
                k = int(self.rng.integers(self.capacity))
                out.append(self.images[k])
                self.images[k] = image
            else:
                out.append(image)
        return torch.stack(out)


class PairedCropSampler:
    """Crops both domains from the same random window each iteration."""

    def __init__(self, sim, real, crop, margin=0, seed=0):
        self.sim = sim
        self.real = real
        self.crop = crop
        self.margin = margin
        self.rng = np.random.default_rng(seed)

    def sample(self):
        """Return ``(sim_region, real_region, sim_index, (y, x))``."""
        a_idx = int(self.rng.integers(len(self.sim)))
        b_idx = int(self.rng.integers(len(self.real)))
        a, b = self.sim[a_idx], self.real[b_idx]
        size = self.crop + self.margin
        height = min(a.shape[-2], b.shape[-2])
        width = min(a.shape[-1], b.shape[-1])
        if height < size or width < size:
            raise ContractError(f"images of {height}x{width} cannot hold a {size}px crop")
        y = int(self.rng.integers(height - size + 1))
        x = int(self.rng.integers(width - size + 1))
        return a[:, y:y + size, x:x + size], b[:, y:y + size, x:x + size], a_idx, (y, x)


# ---------------------------------------------------------------------------
# logging and checkpoints


class LossLog:
    """CSV loss log; values are written with ``repr`` so reruns compare bitwise."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        self._fh = None
        self._writer = None

    def append(self, row):
        self.rows.append(row)
        if self.path is None:
            return
        if self._writer is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=list(row))
            self._writer.writeheader()
        self._writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def column(self, name):
        return [row[name] for row in self.rows]


def save_checkpoint(path, kind, config, modules, iteration, extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config.to_dict(),
        "seed": config.seed,
        "policy": config.policy,
        "weights": config.weights.to_dict(),
        "iteration": iteration,
        "state": {name: m.state_dict() for name, m in modules.items()},
    }
    if extra:
        payload.update(extra)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Return ``(payload, config, generators)``; generators are rebuilt in eval mode."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    config = TrainConfig.from_dict(payload["config"])
    nets = {}
    for name, state in payload["state"].items():
        if name.startswith("g"):
            net = build_generator(config.generator)
            net.load_state_dict(state)
            nets[name] = net.eval()
    return payload, config, nets


def _finite_or_raise(step, scalars, snapshot):
    bad = [k for k, v in scalars.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDiverged(f"non-finite loss at step {step}: {', '.join(bad)}", snapshot=snapshot)


def _set_lr(optimizers, lr):
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr


# ---------------------------------------------------------------------------
# domain adaptation


@dataclass
class AdaptResult:
    models: losses.TranslationModels
    log: LossLog
    checkpoint: Path = None


def train_adapt(config, sim, real, segmenter=None, out_dir=None, progress=None):
    """Alternate generator and discriminator updates on paired crops.

    ``sim`` and ``real`` are indexable image collections (``DomainDataset``
    or lists of ``(C, H, W)`` tensors).
    """
    config.validate()
    if len(sim) == 0 or len(real) == 0:
        raise ContractError("both domains need at least one image")
    torch.manual_seed(config.seed)
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    sampler_rng, shift_rng, buf_rng_r, buf_rng_s = (np.random.default_rng(s) for s in seeds)

    gspec, dspec = config.generator, config.discriminator
    models = losses.TranslationModels(
        g_r=build_generator(gspec, seed=config.seed * 4 + 0),
        g_s=build_generator(gspec, seed=config.seed * 4 + 1),
        d_r=build_discriminator(dspec, seed=config.seed * 4 + 2),
        d_s=build_discriminator(dspec, seed=config.seed * 4 + 3),
        segmenter=segmenter,
    )
    if segmenter is not None and not segmenter.frozen:
        segmenter.freeze()
    losses.check_semantic_config(config.weights, models)

    k = gspec.k
    overlap = config.policy == shiftops.OVERLAP_CROP
    sampler = PairedCropSampler(sim, real, config.crop_size, margin=k if overlap else 0)
    sampler.rng = sampler_rng
    buffer_r = FakeBuffer(config.fake_buffer_size, buf_rng_r)
    buffer_s = FakeBuffer(config.fake_buffer_size, buf_rng_s)
    opt_g = torch.optim.Adam(list(models.g_r.parameters()) + list(models.g_s.parameters()),
                             lr=config.learning_rate, betas=tuple(config.betas))
    opt_d = torch.optim.Adam(list(models.d_r.parameters()) + list(models.d_s.parameters()),
                             lr=config.learning_rate, betas=tuple(config.betas))

    out_dir = Path(out_dir) if out_dir else None
    log = LossLog(out_dir / "train_log.csv" if out_dir else None)
    c = config.crop_size
    try:
        for step in range(config.steps):
            lr = lr_at(config, step)
            _set_lr((opt_g, opt_d), lr)
            regions_s, regions_r, origins = [], [], []
            for _ in range(config.batch_size):
                a, b, _, origin = sampler.sample()
                regions_s.append(a)
                regions_r.append(b)
                origins.append(origin)
            sim_region = torch.stack(regions_s)
            real_region = torch.stack(regions_r)
            batch = losses.TranslationBatch(
                sim=sim_region[..., :c, :c], real=real_region[..., :c, :c],
                sim_region=sim_region, real_region=real_region,
                shift_r=shiftops.sample_shift(k, shift_rng), shift_s=shiftops.sample_shift(k, shift_rng))

            for d in (models.d_r, models.d_s):
                d.requires_grad_(False)
            breakdown, fake_r, fake_s = losses.full_objective(
                models, batch, config.weights, config.policy, config.gan_mode)
            opt_g.zero_grad()
            breakdown.total.backward()
            opt_g.step()

            for d in (models.d_r, models.d_s):
                d.requires_grad_(True)
            loss_d_r = losses.gan_loss_d(models.d_r, batch.real, buffer_r.query(fake_r), config.gan_mode)
            loss_d_s = losses.gan_loss_d(models.d_s, batch.sim, buffer_s.query(fake_s), config.gan_mode)
            opt_d.zero_grad()
            (loss_d_r + loss_d_s).backward()
            opt_d.step()

            row = {"step": step, "lr": float(lr), "crop_y": origins[0][0], "crop_x": origins[0][1],
                   "offset_r": f"{batch.shift_r[0]}:{batch.shift_r[1]}",
                   "offset_s": f"{batch.shift_s[0]}:{batch.shift_s[1]}"}
            scalars = breakdown.scalars()
            scalars["d_r"] = float(loss_d_r.detach())
            scalars["d_s"] = float(loss_d_s.detach())
            _finite_or_raise(step, scalars, {"step": step, "batch": batch, "row": row})
            row.update(scalars)
            log.append(row)
            if progress is not None:
                progress(step, row)
            if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                _save_adapt(out_dir / f"checkpoint_{step + 1:07d}.pt", config, models, step + 1)
    finally:
        log.close()
    result = AdaptResult(models=models, log=log)
    if out_dir:
        result.checkpoint = out_dir / "checkpoint.pt"
        _save_adapt(result.checkpoint, config, models, config.steps)
    for net in (models.g_r, models.g_s):
        net.eval()
    return result


def _save_adapt(path, config, models, iteration):
    save_checkpoint(path, "adapt", config,
                    {"g_r": models.g_r, "g_s": models.g_s, "d_r": models.d_r, "d_s": models.d_s},
                    iteration)


# ---------------------------------------------------------------------------
# feed-forward stylization


@dataclass
class StyleResult:
    stylizer: torch.nn.Module
    log: LossLog
    checkpoint: Path = None


def train_style(config, frames, style_image, taps, out_dir=None, flows=None, masks=None, progress=None):
    """Train a single-image stylizer as FF, FF+flow or Ours.

    ``frames`` is an indexable sequence of ``(C, H, W)`` frames in temporal
    order.  FF+flow needs ``flows`` / ``masks`` for every consecutive pair
    (callables or lists indexed by the first frame of the pair).
    """
    config.validate()
    variant = config.style_variant
    if len(frames) == 0:
        raise ContractError("no training frames")
    if variant == "FF+flow":
        if flows is None or len(frames) < 2:
            raise ConfigError("FF+flow needs sequential frames with optical flow files")
    torch.manual_seed(config.seed)
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    crop_rng, shift_rng = (np.random.default_rng(s) for s in seeds)

    stylizer = build_generator(config.generator, seed=config.seed)
    opt = torch.optim.Adam(stylizer.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))
    k = config.generator.k
    w = config.weights
    px = (config.pixel_range / 2.0) ** 2
    with torch.no_grad():
        style_targets = taps(style_image)

    out_dir = Path(out_dir) if out_dir else None
    log = LossLog(out_dir / "train_log.csv" if out_dir else None)
    c = config.crop_size
    size = c + k
    try:
        for step in range(config.steps):
            lr = lr_at(config, step)
            _set_lr((opt,), lr)
            # identical draws for every variant keep FF and a zero-weight Ours in lockstep
            n = len(frames) - 1 if variant == "FF+flow" else len(frames)
            idx = int(crop_rng.integers(n))
            frame = frames[idx]
            height, width = frame.shape[-2:]
            if height < size or width < size:
                raise ContractError(f"frames of {height}x{width} cannot hold a {size}px crop")
            y = int(crop_rng.integers(height - size + 1))
            x = int(crop_rng.integers(width - size + 1))
            offset = shiftops.sample_shift(k, shift_rng)
            region = frame[:, y:y + size, x:x + size].unsqueeze(0)
            base = region[..., :c, :c]
            out = stylizer(base)
            breakdown = losses.style_losses(taps, out, base, None, w, style_targets=style_targets)
            breakdown.weights["spatial"] *= px
            if variant == "Ours" and w.style_shift > 0:
                if config.policy == shiftops.CIRCULAR:
                    term = shiftops.shift_loss(stylizer, base, offset, config.policy, shifted_output=out)
                else:
                    term = shiftops.shift_loss(stylizer, region, offset, config.policy,
                                               size=(c, c), shifted_output=out)
                breakdown.add("shift", term, w.style_shift * px)
            if variant == "FF+flow" and w.flow > 0:
                nxt = frames[idx + 1][:, y:y + c, x:x + c].unsqueeze(0)
                flow = _item(flows, idx)[:, y:y + c, x:x + c]
                mask = _item(masks, idx)[y:y + c, x:x + c] if masks is not None else torch.ones(c, c)
                breakdown.add("flow", losses.flow_temporal_loss(out, stylizer(nxt), flow, mask), w.flow * px)
            opt.zero_grad()
            breakdown.total.backward()
            opt.step()

            row = {"step": step, "lr": float(lr), "frame": idx, "crop_y": y, "crop_x": x}
            scalars = breakdown.scalars()
            _finite_or_raise(step, scalars, {"step": step, "row": row})
            row.update(scalars)
            log.append(row)
            if progress is not None:
                progress(step, row)
            if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                save_checkpoint(out_dir / f"checkpoint_{step + 1:07d}.pt", "style", config,
                                {"g": stylizer}, step + 1)
    finally:
        log.close()
    result = StyleResult(stylizer=stylizer.eval(), log=log)
    if out_dir:
        result.checkpoint = out_dir / "checkpoint.pt"
        save_checkpoint(result.checkpoint, "style", config, {"g": stylizer}, config.steps)
    return result


def _item(source, index):
    return source(index) if callable(source) else source[index]

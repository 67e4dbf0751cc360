"""Adversarial, cycle, semantic, perceptual and temporal losses plus the full objective.

Every reduction is an arithmetic mean over elements unless stated otherwise,
so loss weights do not depend on crop size.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F

from shiftgan import shiftops
from shiftgan.errors import ConfigError, ContractError
from shiftgan.imaging import warp


@dataclass
class LossWeights:
    # domain adaptation
    cyc: float = 10.0
    sem: float = 1.0
    shift: float = 0.0
    # feed-forward stylization
    content: float = 1e5
    style: float = 2.0
    spatial: float = 1e-7
    flow: float = 10.0
    style_shift: float = 100.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value >= 0:
                raise ConfigError(f"loss weight {name}={value} must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    """Named unweighted terms, their weights, and the weighted total."""

    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def add(self, name, value, weight=1.0):
        self.terms[name] = value
        self.weights[name] = float(weight)
        return self

    @property
    def total(self):
        total = torch.zeros(())
        for name, value in self.terms.items():
            total = total + self.weights[name] * value
        return total

    def scalars(self):
        out = {n: float(torch.as_tensor(v).detach()) for n, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


# ---------------------------------------------------------------------------
# adversarial


def _check_batch(*tensors):
    for t in tensors:
        if t.numel() == 0 or t.shape[0] == 0:
            raise ContractError("empty batch")


def gan_loss_d(discriminator, real, fake, mode="lsgan"):
    """Discriminator loss; ``fake`` is detached from the generator graph."""
    _check_batch(real, fake)
    pred_real = discriminator(real)
    pred_fake = discriminator(fake.detach())
    if mode == "lsgan":
        return torch.mean((pred_real - 1) ** 2) + torch.mean(pred_fake**2)
    if mode == "log":
        return (F.binary_cross_entropy_with_logits(pred_real, torch.ones_like(pred_real))
                + F.binary_cross_entropy_with_logits(pred_fake, torch.zeros_like(pred_fake)))
    raise ConfigError(f"unknown gan mode {mode!r}")


def gan_loss_g(discriminator, fake, mode="lsgan"):
    _check_batch(fake)
    pred = discriminator(fake)
    if mode == "lsgan":
        return torch.mean((pred - 1) ** 2)
    if mode == "log":
        return F.binary_cross_entropy_with_logits(pred, torch.ones_like(pred))
    raise ConfigError(f"unknown gan mode {mode!r}")


# ---------------------------------------------------------------------------
# translation terms


def cycle_loss(x, reconstructed):
    return torch.mean(torch.abs(reconstructed - x))


def semantic_loss(segmenter, x, translated):
    """Cross-entropy of the segmenter on ``translated`` against its argmax labels on ``x``."""
    with torch.no_grad():
        ref = segmenter(x)
        pseudo = ref.argmax(dim=-3)
    logits = segmenter(translated)
    if logits.shape[-3] != ref.shape[-3] or logits.shape[-3] != segmenter.num_classes:
        raise ContractError(f"segmenter produced {logits.shape[-3]} classes, expected {segmenter.num_classes}")
    if logits.dim() == 3:
        logits, pseudo = logits.unsqueeze(0), pseudo.unsqueeze(0)
    return F.cross_entropy(logits, pseudo)


# ---------------------------------------------------------------------------
# perceptual terms


def gram(features):
    """Gram matrix of ``(C, H, W)`` or ``(N, C, H, W)`` features, divided by C*H*W."""
    squeeze = features.dim() == 3
    if squeeze:
        features = features.unsqueeze(0)
    n, c, h, w = features.shape
    flat = features.reshape(n, c, h * w)
    g = flat @ flat.transpose(1, 2) / (c * h * w)
    return g[0] if squeeze else g


def content_loss(feat, target):
    return torch.mean((feat - target) ** 2)


def style_loss(feats, targets, taps):
    """Sum over style taps of the squared Frobenius distance between Gram matrices."""
    total = 0.0
    for name in taps:
        g = gram(feats[name])
        t = gram(targets[name]).expand_as(g)
        total = total + torch.sum((g - t) ** 2) / g.shape[0]
    return total


def total_variation(image):
    """Sum of squared forward differences along both axes (per batch item, averaged)."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    dx = image[..., :, 1:] - image[..., :, :-1]
    dy = image[..., 1:, :] - image[..., :-1, :]
    return (torch.sum(dx**2) + torch.sum(dy**2)) / image.shape[0]


def style_losses(taps, stylized, content_ref, style_ref, weights, style_targets=None):
    """Content, style and spatial (TV) terms for a stylized image."""
    feats = taps(stylized)
    with torch.no_grad():
        content_feats = taps(content_ref)
        if style_targets is None:
            style_targets = taps(style_ref)
    out = LossBreakdown()
    out.add("content", content_loss(feats[taps.content_tap], content_feats[taps.content_tap]), weights.content)
    out.add("style", style_loss(feats, style_targets, taps.style_taps), weights.style)
    out.add("spatial", total_variation(stylized), weights.spatial)
    return out


def flow_temporal_loss(prev_out, next_out, flow, mask):
    """Mean of ``mask * (prev_out - warp(next_out, flow))**2`` over all elements."""
    warped = warp(next_out, flow)
    diff2 = (prev_out - warped) ** 2
    return torch.mean(mask.to(diff2.dtype).unsqueeze(-3) * diff2)


# ---------------------------------------------------------------------------
# full objective


@dataclass
class TranslationModels:
    """``g_r`` maps S->R, ``g_s`` maps R->S; ``d_r`` judges R, ``d_s`` judges S.

    ``segmenter`` is the frozen S-domain segmenter; it labels both domains.
    """

    g_r: torch.nn.Module
    g_s: torch.nn.Module
    d_r: torch.nn.Module
    d_s: torch.nn.Module
    segmenter: object = None


@dataclass
class TranslationBatch:
    """Paired crops of the two domains.

    ``sim`` and ``real`` are the base crops.  With the overlap-crop policy,
    ``sim_region`` / ``real_region`` are the enclosing super-crops (base crop
    at their origin).  ``shift_r`` / ``shift_s`` are the offsets sampled for
    the two shift terms.
    """

    sim: torch.Tensor
    real: torch.Tensor
    sim_region: torch.Tensor = None
    real_region: torch.Tensor = None
    shift_r: tuple = (1, 1)
    shift_s: tuple = (1, 1)


def check_semantic_config(weights, models):
    if weights.sem > 0 and models.segmenter is None:
        raise ConfigError("semantic weight > 0 requires a segmenter (set sem: 0 to drop the semantic constraint)")


def _shift_term(generator, base, region, offset, fake, policy):
    if policy == shiftops.CIRCULAR:
        return shiftops.shift_loss(generator, base, offset, policy, shifted_output=fake)
    size = tuple(base.shape[-2:])
    # the base crop is the shifted view of the region (it sits at the origin)
    return shiftops.shift_loss(generator, region, offset, policy, size=size, shifted_output=fake)


def full_objective(models, batch, weights, policy=shiftops.OVERLAP_CROP, gan_mode="lsgan"):
    """Generator-side objective; returns the breakdown and the generated images.

    The breakdown total is the quantity the generators minimise.  The
    discriminators are trained separately with :func:`gan_loss_d` on the
    returned fakes.
    """
    check_semantic_config(weights, models)
    s, r = batch.sim, batch.real
    fake_r = models.g_r(s)
    fake_s = models.g_s(r)
    out = LossBreakdown()
    out.add("gan_r", gan_loss_g(models.d_r, fake_r, gan_mode))
    out.add("gan_s", gan_loss_g(models.d_s, fake_s, gan_mode))
    if weights.cyc > 0:
        out.add("cyc_r", cycle_loss(r, models.g_r(fake_s)), weights.cyc)
        out.add("cyc_s", cycle_loss(s, models.g_s(fake_r)), weights.cyc)
    if weights.sem > 0:
        out.add("sem_r", semantic_loss(models.segmenter, r, fake_s), weights.sem)
        out.add("sem_s", semantic_loss(models.segmenter, s, fake_r), weights.sem)
    if weights.shift > 0:
        out.add("shift_r", _shift_term(models.g_r, s, batch.sim_region, batch.shift_r, fake_r, policy), weights.shift)
        out.add("shift_s", _shift_term(models.g_s, r, batch.real_region, batch.shift_s, fake_s, policy), weights.shift)
    return out, fake_r, fake_s

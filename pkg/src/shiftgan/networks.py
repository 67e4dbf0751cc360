"""Generator, patch discriminator, toy segmenter and perceptual feature taps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from shiftgan.errors import ContractError

PADDING_MODES = ("reflect", "circular", "zero")
INIT_STD = 0.02


def _pad(mode, amount):
    if amount == 0:
        return nn.Identity()
    if mode == "reflect":
        return nn.ReflectionPad2d(amount)
    if mode == "circular":
        return nn.CircularPad2d(amount)
    return nn.ZeroPad2d(amount)


def init_weights(module, generator):
    """Normal(0, 0.02) conv weights, zero biases, unit norm scales (CycleGAN init)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, INIT_STD, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.weight is not None:
            with torch.no_grad():
                m.weight.normal_(1.0, INIT_STD, generator=generator)
                m.bias.zero_()


def _torch_generator(seed):
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


# ---------------------------------------------------------------------------
# generator


@dataclass
class GeneratorSpec:
    """ResNet-style translator: c7s1-w, strided downs, residual blocks, ups, c7s1-out.

    ``down_strides`` are the encoder strides; their product is the
    downsampling factor K.  ``up_factors`` must multiply back to K.
    """

    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 64
    down_strides: tuple = (2, 2)
    up_factors: tuple = (2, 2)
    n_residual: int = 6
    padding: str = "reflect"
    norm: str = "instance"

    def __post_init__(self):
        self.down_strides = tuple(int(s) for s in self.down_strides)
        self.up_factors = tuple(int(s) for s in self.up_factors)

    @property
    def k(self):
        return math.prod(self.down_strides)

    def validate(self):
        if self.padding not in PADDING_MODES:
            raise ContractError(f"padding must be one of {PADDING_MODES}")
        if self.norm not in ("instance", "none"):
            raise ContractError("norm must be 'instance' or 'none'")
        if math.prod(self.up_factors) != self.k:
            raise ContractError(
                f"decoder factors {self.up_factors} cannot undo encoder strides {self.down_strides}")
        if len(self.up_factors) != len(self.down_strides):
            raise ContractError("decoder needs one upsampling stage per encoder stage")

    def to_dict(self):
        d = asdict(self)
        d["down_strides"] = list(self.down_strides)
        d["up_factors"] = list(self.up_factors)
        return d


def _norm(kind, channels):
    if kind == "instance":
        return nn.InstanceNorm2d(channels, affine=True)
    return nn.Identity()


class ResidualBlock(nn.Module):
    def __init__(self, channels, padding, norm):
        super().__init__()
        self.body = nn.Sequential(
            _pad(padding, 1), nn.Conv2d(channels, channels, 3), _norm(norm, channels), nn.ReLU(True),
            _pad(padding, 1), nn.Conv2d(channels, channels, 3), _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Upsample(nn.Module):
    """Nearest-neighbour resize to an exact target size followed by a 3x3 conv.

    Resize-convolution keeps every padding mode available (transposed
    convolutions only support zero padding) and restores odd sizes exactly.
    """

    def __init__(self, cin, cout, padding, norm):
        super().__init__()
        self.conv = nn.Sequential(_pad(padding, 1), nn.Conv2d(cin, cout, 3), _norm(norm, cout), nn.ReLU(True))

    def forward(self, x, size):
        return self.conv(F.interpolate(x, size=size, mode="nearest"))


class Generator(nn.Module):
    def __init__(self, spec):
        super().__init__()
        spec.validate()
        self.spec = spec
        w, p = spec.base_width, spec.padding
        self.stem = nn.Sequential(
            _pad(p, 3), nn.Conv2d(spec.in_channels, w, 7), _norm(spec.norm, w), nn.ReLU(True))
        downs = []
        for stride in spec.down_strides:
            downs.append(nn.Sequential(
                _pad(p, 1), nn.Conv2d(w, 2 * w, 3, stride=stride), _norm(spec.norm, 2 * w), nn.ReLU(True)))
            w *= 2
        self.downs = nn.ModuleList(downs)
        self.blocks = nn.Sequential(*[ResidualBlock(w, p, spec.norm) for _ in range(spec.n_residual)])
        ups = []
        for _ in spec.up_factors:
            ups.append(Upsample(w, w // 2, p, spec.norm))
            w //= 2
        self.ups = nn.ModuleList(ups)
        self.head = nn.Sequential(_pad(p, 3), nn.Conv2d(w, spec.out_channels, 7), nn.Tanh())

    @property
    def k(self):
        return self.spec.k

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        h = self.stem(x)
        sizes = []
        for down in self.downs:
            sizes.append(h.shape[-2:])
            h = down(h)
        h = self.blocks(h)
        for up, size in zip(self.ups, reversed(sizes)):
            h = up(h, size)
        out = self.head(h)
        return out.squeeze(0) if squeeze else out


def build_generator(spec, seed=0):
    """Build a generator with deterministic N(0, 0.02) initialisation."""
    net = Generator(spec)
    init_weights(net, _torch_generator(seed))
    return net


# ---------------------------------------------------------------------------
# discriminator


@dataclass
class DiscriminatorSpec:
    """PatchGAN: ``n_layers`` stride-2 4x4 convs, one stride-1 conv, 1-channel head.

    ``n_layers=3`` is the 70x70 patch classifier.
    """

    in_channels: int = 3
    base_width: int = 64
    n_layers: int = 3
    norm: str = "instance"

    def layers(self):
        """``(kernel, stride, padding)`` of every conv, input to output."""
        return [(4, 2, 1)] * self.n_layers + [(4, 1, 1), (4, 1, 1)]

    @property
    def receptive_field(self):
        rf = 1
        for kernel, stride, _ in reversed(self.layers()):
            rf = rf * stride + (kernel - stride)
        return rf

    def output_size(self, size):
        for kernel, stride, padding in self.layers():
            size = (size + 2 * padding - kernel) // stride + 1
        return size

    def to_dict(self):
        return asdict(self)


class Discriminator(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        seq = [nn.Conv2d(spec.in_channels, w, 4, 2, 1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, spec.n_layers):
            prev, mult = mult, min(2**n, 8)
            seq += [nn.Conv2d(w * prev, w * mult, 4, 2, 1), _norm(spec.norm, w * mult), nn.LeakyReLU(0.2, True)]
        prev, mult = mult, min(2**spec.n_layers, 8)
        seq += [nn.Conv2d(w * prev, w * mult, 4, 1, 1), _norm(spec.norm, w * mult), nn.LeakyReLU(0.2, True)]
        seq += [nn.Conv2d(w * mult, 1, 4, 1, 1)]
        self.model = nn.Sequential(*seq)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        rf = self.spec.receptive_field
        if min(x.shape[-2:]) < rf:
            raise ContractError(f"input {tuple(x.shape[-2:])} is smaller than the {rf}px receptive field")
        return self.model(x)


def build_discriminator(spec, seed=0):
    net = Discriminator(spec)
    init_weights(net, _torch_generator(seed))
    return net


# ---------------------------------------------------------------------------
# segmenter


class ToySegmenter(nn.Module):
    """Small fully convolutional per-pixel classifier (3x3 convs, same size output)."""

    def __init__(self, num_classes, in_channels=3, width=16):
        super().__init__()
        if num_classes < 2:
            raise ContractError("a segmenter needs at least two classes")
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, padding=1, padding_mode="reflect"), nn.ReLU(True),
            nn.Conv2d(width, width, 3, padding=1, padding_mode="reflect"), nn.ReLU(True),
            nn.Conv2d(width, num_classes, 1),
        )

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        out = self.net(x)
        return out.squeeze(0) if squeeze else out


@dataclass
class SegmenterHandle:
    """A frozen per-pixel classifier producing ``(N, num_classes, H, W)`` logits."""

    model: nn.Module
    num_classes: int
    frozen: bool = False

    def freeze(self):
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def __call__(self, x):
        return self.model(x)


def toy_segmenter(num_classes, seed=0, width=16):
    model = ToySegmenter(num_classes, width=width)
    gen = _torch_generator(seed)
    for m in model.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                nn.init.kaiming_normal_(m.weight, generator=gen)
                m.bias.zero_()
    return SegmenterHandle(model=model, num_classes=num_classes)


def pretrain_segmenter(handle, images, labels, steps=300, lr=1e-2, batch_size=8, seed=0):
    """Fit the segmenter to ``images`` ``(N, C, H, W)`` / ``labels`` ``(N, H, W)`` then freeze it."""
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(handle.model.parameters(), lr=lr)
    handle.model.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(len(images), size=batch_size))
        loss = F.cross_entropy(handle.model(images[idx]), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return handle.freeze()


@torch.no_grad()
def pixel_accuracy(handle, images, labels):
    pred = handle(images).argmax(dim=1)
    return float((pred == labels).float().mean())


# ---------------------------------------------------------------------------
# perceptual taps

VGG19_CONFIG = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M",
                512, 512, 512, 512, "M"]
CONTENT_TAP = "relu2_2"
STYLE_TAPS = ("relu1_2", "relu2_2", "relu3_2", "relu4_2")


def _vgg_layer_names(config):
    names, block, idx = [], 1, 1
    for v in config:
        if v == "M":
            names.append(f"pool{block}")
            block, idx = block + 1, 1
        else:
            names += [f"conv{block}_{idx}", f"relu{block}_{idx}"]
            idx += 1
    return names


@dataclass
class PerceptualTaps:
    """Frozen VGG-19-layout feature extractor exposing named ReLU activations."""

    features: nn.Sequential
    names: list
    content_tap: str = CONTENT_TAP
    style_taps: tuple = STYLE_TAPS
    # ImageNet statistics are applied to inputs mapped from [-1, 1] to [0, 1]
    mean: torch.Tensor = field(default_factory=lambda: torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
    std: torch.Tensor = field(default_factory=lambda: torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def __post_init__(self):
        self.features.eval()
        for p in self.features.parameters():
            p.requires_grad_(False)
        wanted = {self.content_tap, *self.style_taps}
        self._last = max(self.names.index(n) for n in wanted)

    def __call__(self, image):
        """Return ``{tap name: (N, C, H, W) activation}`` for content and style taps."""
        x = image.unsqueeze(0) if image.dim() == 3 else image
        x = ((x + 1) / 2 - self.mean) / self.std
        wanted = {self.content_tap, *self.style_taps}
        out = {}
        for i, layer in enumerate(self.features):
            if i > self._last:
                break
            x = layer(x)
            if self.names[i] in wanted:
                out[self.names[i]] = x
        return out


def _vgg_features(width_divisor=1, max_block=4):
    config = []
    block = 1
    for v in VGG19_CONFIG:
        if block > max_block:
            break
        if v == "M":
            block += 1
        config.append(v if v == "M" else max(1, v // width_divisor))
    layers, cin = [], 3
    for v in config:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(cin, v, 3, padding=1), nn.ReLU(inplace=False)]
            cin = v
    return nn.Sequential(*layers), _vgg_layer_names(config)


def random_taps(seed=0, width_divisor=8):
    """VGG-19 layout with fixed-seed random weights, narrowed by ``width_divisor``."""
    features, names = _vgg_features(width_divisor)
    gen = _torch_generator(seed)
    for m in features.modules():
        if isinstance(m, nn.Conv2d):
            with torch.no_grad():
                nn.init.kaiming_normal_(m.weight, generator=gen)
                m.bias.zero_()
    return PerceptualTaps(features=features, names=names)


def vgg19_taps(weights_path):
    """Load published VGG-19 weights (a torchvision ``vgg19`` state dict) from disk."""
    features, names = _vgg_features(1, max_block=4)
    state = torch.load(weights_path, map_location="cpu", weights_only=True)
    state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
    own = features.state_dict()
    features.load_state_dict({k: state[k] for k in own})
    return PerceptualTaps(features=features, names=names)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())

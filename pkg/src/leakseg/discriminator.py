"""U-Net discriminator with K+1-class pixel outputs and a leak switch.

The network scores every pixel over K real classes; the (K+1)-th "fake"
logit is structurally clamped to 0, so only K logits are stored. Four
contracting blocks (3x3 convs, stride-2 max-pooling) encode a 64x64 patch
down to a 4x4 bottleneck; a symmetric expanding path with skip
concatenations restores resolution.

When leaking is enabled, selected decoder levels fuse the concatenation
[alpha * G_l, beta * skip_l] of a generator ladder map and the level's own
skip. Fusion is a bias-free 3x3 convolution whose output is summed into
the level's first convolution before normalization; this is exactly the
partitioned-kernel form of concatenating the leak into that convolution,
and it vanishes identically when the switch is off or alpha = beta = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import torch
from torch import nn

from .data import PATCH_SIZE
from .errors import ConfigError
from .generator import GeneratorActivations, LADDER_SIZES
from .weights import dcgan_init

BACKGROUND_CLASS = 0
VESSEL_CLASS = 1


@dataclass(frozen=True)
class LeakConfig:
    """Switch and scalings of the information-leaking module.

    ``layers`` selects which decoder levels inject (1 -> 8x8 ... 4 -> 64x64);
    ``alpha``/``beta`` scale the generator map and the skip inside the leak,
    one entry per selected layer. ``enabled=False`` makes the forward pass
    bit-identical to a plain U-Net with the same weights.
    """

    enabled: bool = False
    layers: tuple[int, ...] = (1,)
    alpha: tuple[float, ...] = (1.0,)
    beta: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if any(l not in (1, 2, 3, 4) for l in self.layers):
            raise ConfigError(f"leak layers must be a subset of {{1,2,3,4}}, got {self.layers}")
        if len(set(self.layers)) != len(self.layers):
            raise ConfigError(f"duplicate leak layers in {self.layers}")
        if len(self.alpha) != len(self.layers) or len(self.beta) != len(self.layers):
            raise ConfigError("alpha and beta need one entry per selected leak layer")
        if any(a < 0 for a in self.alpha) or any(b < 0 for b in self.beta):
            raise ConfigError("leak scalings must be nonnegative")

    @classmethod
    def uniform(cls, enabled: bool, layers: tuple[int, ...] = (1,),
                alpha: float = 1.0, beta: float = 1.0) -> "LeakConfig":
        return cls(enabled=enabled, layers=tuple(layers),
                   alpha=(alpha,) * len(layers), beta=(beta,) * len(layers))

    def scaling_for(self, layer: int) -> tuple[float, float]:
        i = self.layers.index(layer)
        return self.alpha[i], self.beta[i]


@dataclass
class SegLogits:
    """The K free per-pixel logits; the fake-class logit is identically 0."""

    logits: torch.Tensor  # (B, K, H, W)

    FAKE_LOGIT = 0.0  # structural clamp of the (K+1)-th output

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]


@dataclass
class EncoderFeatures:
    """Contracting-path activations: 4x4 bottleneck plus the skip maps."""

    bottleneck: torch.Tensor
    skip_maps: list[torch.Tensor]


def _norm(channels: int) -> nn.GroupNorm:
    # eps bounds the 1/sigma amplification on near-constant inputs (e.g.
    # early-training generator output); negligible for healthy activations
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels, eps=1e-3)


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        _norm(out_ch),
        nn.LeakyReLU(0.2, inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        _norm(out_ch),
        nn.LeakyReLU(0.2, inplace=True),
    )


class _DecoderLevel(nn.Module):
    """Upsample, concatenate the skip, run the level's double conv.

    ``leak_add``, when given, is summed into the first convolution's output
    before normalization (partitioned-kernel leak fusion).
    """

    def __init__(self, in_below: int, width: int, skip_ch: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_below, width, 2, stride=2)
        self.conv1 = nn.Conv2d(width + skip_ch, width, 3, padding=1)
        self.post1 = nn.Sequential(_norm(width), nn.LeakyReLU(0.2, inplace=True))
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.post2 = nn.Sequential(_norm(width), nn.LeakyReLU(0.2, inplace=True))

    def forward(self, below, skip, leak_add=None):
        z = self.conv1(torch.cat([self.up(below), skip], dim=1))
        if leak_add is not None:
            z = z + leak_add
        return self.post2(self.conv2(self.post1(z)))


class UNetDiscriminator(nn.Module):
    """Fully-convolutional K+1-class discriminator over 64x64 patches.

    Encoder widths are (w, 2w, 4w, 8w) for ``base_width`` w; the default
    w=64 encodes to the 4x4x512 bottleneck, and the decoder mirrors the
    encoder. ``gen_ladder_channels`` must be given when leak layers are
    configured so the leak convolutions can be sized.
    """

    def __init__(
        self,
        in_channels: int = 1,
        num_classes: int = 2,
        base_width: int = 64,
        leak: LeakConfig = LeakConfig(),
        gen_ladder_channels: Optional[tuple[int, int, int, int]] = None,
    ):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"need at least 2 real classes, got {num_classes}")
        if leak.enabled and gen_ladder_channels is None:
            raise ConfigError("leak enabled but generator ladder channels not given")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.base_width = base_width
        self.leak = leak
        w = base_width
        self._level_width = {1: 8 * w, 2: 4 * w, 3: 2 * w, 4: w}

        self.enc1 = _double_conv(in_channels, w)        # 64x64
        self.enc2 = _double_conv(w, 2 * w)              # 32x32
        self.enc3 = _double_conv(2 * w, 4 * w)          # 16x16
        self.enc4 = _double_conv(4 * w, 8 * w)          # 8x8
        self.pool = nn.MaxPool2d(2)
        self.bottom = _double_conv(8 * w, 8 * w)        # 4x4 bottleneck
        self.dec1 = _DecoderLevel(8 * w, 8 * w, 8 * w)  # 8x8
        self.dec2 = _DecoderLevel(8 * w, 4 * w, 4 * w)  # 16x16
        self.dec3 = _DecoderLevel(4 * w, 2 * w, 2 * w)  # 32x32
        self.dec4 = _DecoderLevel(2 * w, w, w)          # 64x64
        self.head = nn.Conv2d(w, num_classes, 1)

        # Registered last so base parameters draw identically with or
        # without the leak module under a fixed init seed.
        self.leak_convs = nn.ModuleDict()
        if gen_ladder_channels is not None:
            for layer in leak.layers:
                in_ch = gen_ladder_channels[layer - 1] + self._level_width[layer]
                self.leak_convs[str(layer)] = nn.Conv2d(
                    in_ch, self._level_width[layer], 3, padding=1, bias=False
                )

    def init_weights(self, generator: torch.Generator) -> None:
        dcgan_init(self, generator)

    def set_leak_enabled(self, enabled: bool) -> None:
        if enabled and not self.leak_convs:
            raise ConfigError("cannot enable leaking: module built without leak convolutions")
        self.leak = replace(self.leak, enabled=enabled)

    def _leak_map(self, layer: int, leak: GeneratorActivations, skip: torch.Tensor) -> torch.Tensor:
        gen_map = leak.intermediates[layer - 1]
        if gen_map.shape[-1] != LADDER_SIZES[layer - 1] or gen_map.shape[-2] != LADDER_SIZES[layer - 1]:
            raise ValueError(
                f"leak ladder level {layer} is {tuple(gen_map.shape[-2:])}, "
                f"expected {LADDER_SIZES[layer - 1]} square"
            )
        if gen_map.shape[0] != skip.shape[0]:
            raise ValueError(
                f"leak batch {gen_map.shape[0]} does not match input batch {skip.shape[0]}"
            )
        alpha, beta = self.leak.scaling_for(layer)
        return torch.cat([alpha * gen_map, beta * skip], dim=1)

    def forward(
        self,
        x: torch.Tensor,
        leak: Optional[GeneratorActivations] = None,
        use_leak: Optional[bool] = None,
    ) -> tuple[SegLogits, EncoderFeatures]:
        if x.shape[-2:] != (PATCH_SIZE, PATCH_SIZE):
            raise ValueError(
                f"training-path input must be {PATCH_SIZE}x{PATCH_SIZE} "
                f"(full images go through evaluation stitching), got {tuple(x.shape[-2:])}"
            )
        leaking = self.leak.enabled if use_leak is None else use_leak
        if leaking and leak is None:
            raise ValueError("leaking enabled but no generator activations supplied")
        if leaking and len(leak.intermediates) != len(LADDER_SIZES):
            raise ValueError(f"leak ladder must have {len(LADDER_SIZES)} levels")

        s1 = self.enc1(x)
        s2 = self.enc2(self.pool(s1))
        s3 = self.enc3(self.pool(s2))
        s4 = self.enc4(self.pool(s3))
        bottleneck = self.bottom(self.pool(s4))

        skips = {1: s4, 2: s3, 3: s2, 4: s1}
        h = bottleneck
        for layer, dec in ((1, self.dec1), (2, self.dec2), (3, self.dec3), (4, self.dec4)):
            leak_add = None
            if leaking and layer in self.leak.layers:
                leak_add = self.leak_convs[str(layer)](self._leak_map(layer, leak, skips[layer]))
            h = dec(h, skips[layer], leak_add)

        logits = self.head(h)
        return SegLogits(logits=logits), EncoderFeatures(
            bottleneck=bottleneck, skip_maps=[s1, s2, s3, s4]
        )


def class_probabilities(s: SegLogits) -> torch.Tensor:
    """Softmax posterior over K+1 classes, the fake logit clamped to 0.

    Returns (B, K+1, H, W); channel K is the fake class.
    """
    zeros = s.logits.new_zeros(s.logits[:, :1].shape)
    return torch.softmax(torch.cat([s.logits, zeros], dim=1), dim=1)


def realness_score(s: SegLogits) -> torch.Tensor:
    """Per-pixel D(x) = Z/(Z+1) with Z the sum of exponentiated real logits.

    Computed as sigmoid(logsumexp) so extreme logits stay stable; equals
    1 - p(fake) from :func:`class_probabilities`.
    """
    return torch.sigmoid(torch.logsumexp(s.logits, dim=1))


def renormalized_posterior(s: SegLogits) -> torch.Tensor:
    """Posterior over the K real classes given the pixel is not fake."""
    return torch.softmax(s.logits, dim=1)


def predict_mask(s: SegLogits, threshold: float) -> torch.Tensor:
    """Boolean vessel mask: renormalized vessel posterior strictly above threshold.

    A pixel exactly at the threshold is background (documented tie-break).
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    return renormalized_posterior(s)[:, VESSEL_CLASS] > threshold

"""DCGAN-style patch generator exposing its upsampling activation ladder.

A 100-length normal noise vector passes through a fully-connected layer
reshaped to an 8x8 grid, then six convolution layers: three stride-2
transposed convolutions (8 -> 16 -> 32 -> 64) interleaved with same-size
convolutions, batch-normalized with LeakyReLU activations, ending in a
tanh image layer. The four post-activation feature maps at 8, 16, 32 and
64 pixels form the ladder available for leaking into the discriminator.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .data import PatchBatch
from .errors import ConfigError
from .weights import dcgan_init

Z_LENGTH = 100
LADDER_SIZES = (8, 16, 32, 64)


@dataclass
class NoiseBatch:
    """Latent input batch; z is (batch, 100) standard normal."""

    z: torch.Tensor

    def __post_init__(self):
        if self.z.ndim != 2 or self.z.shape[1] != Z_LENGTH:
            raise ValueError(f"noise must be (B, {Z_LENGTH}), got {tuple(self.z.shape)}")

    def __len__(self) -> int:
        return self.z.shape[0]


@dataclass
class GeneratorActivations:
    """Fake image plus the four leakable feature maps (8/16/32/64 px)."""

    intermediates: list[torch.Tensor]
    fake_image: PatchBatch

    def spatial_sizes(self) -> tuple[int, ...]:
        return tuple(t.shape[-1] for t in self.intermediates)


def sample_noise(batch: int, seed: int, dtype: torch.dtype = torch.float32) -> NoiseBatch:
    """Draw (batch, 100) i.i.d. standard normal entries, deterministic per seed."""
    if batch < 1:
        raise ConfigError(f"noise batch size must be >= 1, got {batch}")
    gen = torch.Generator().manual_seed(int(seed))
    return NoiseBatch(z=torch.randn(batch, Z_LENGTH, generator=gen, dtype=dtype))


def _bn_lrelu(channels: int) -> nn.Sequential:
    return nn.Sequential(nn.BatchNorm2d(channels), nn.LeakyReLU(0.2, inplace=True))


class PatchGenerator(nn.Module):
    """Maps (B, 100) noise to (B, C, 64, 64) images in [-1, 1].

    ``base_width`` is the channel count at the 8x8 grid; it halves at each
    upsampling, so the ladder carries (base, base/2, base/4, base/8)
    channels. The default 512 yields the 512-256-128-64 progression.
    """

    def __init__(self, out_channels: int = 1, base_width: int = 512):
        super().__init__()
        if base_width < 8 or base_width % 8:
            raise ConfigError(f"generator base width must be a positive multiple of 8, got {base_width}")
        self.out_channels = out_channels
        self.base_width = base_width
        w = base_width
        self.fc = nn.Linear(Z_LENGTH, w * 8 * 8)
        self.fc_post = _bn_lrelu(w)
        self.up16 = nn.ConvTranspose2d(w, w // 2, 4, stride=2, padding=1)
        self.up16_post = _bn_lrelu(w // 2)
        self.conv16 = nn.Conv2d(w // 2, w // 2, 3, padding=1)
        self.conv16_post = _bn_lrelu(w // 2)
        self.up32 = nn.ConvTranspose2d(w // 2, w // 4, 4, stride=2, padding=1)
        self.up32_post = _bn_lrelu(w // 4)
        self.conv32 = nn.Conv2d(w // 4, w // 4, 3, padding=1)
        self.conv32_post = _bn_lrelu(w // 4)
        self.up64 = nn.ConvTranspose2d(w // 4, w // 8, 4, stride=2, padding=1)
        self.up64_post = _bn_lrelu(w // 8)
        self.to_image = nn.Conv2d(w // 8, out_channels, 3, padding=1)

    @property
    def ladder_channels(self) -> tuple[int, int, int, int]:
        w = self.base_width
        return (w, w // 2, w // 4, w // 8)

    def init_weights(self, generator: torch.Generator) -> None:
        dcgan_init(self, generator)

    def forward(self, noise: NoiseBatch) -> GeneratorActivations:
        z = noise.z
        h8 = self.fc_post(self.fc(z).view(z.shape[0], self.base_width, 8, 8))
        h16 = self.conv16_post(self.conv16(self.up16_post(self.up16(h8))))
        h32 = self.conv32_post(self.conv32(self.up32_post(self.up32(h16))))
        h64 = self.up64_post(self.up64(h32))
        fake = torch.tanh(self.to_image(h64))
        return GeneratorActivations(
            intermediates=[h8, h16, h32, h64],
            fake_image=PatchBatch.synthetic(fake),
        )

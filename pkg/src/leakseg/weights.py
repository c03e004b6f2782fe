"""Weight initialization shared by the generator and discriminator."""

from __future__ import annotations

import torch
from torch import nn


def dcgan_init(module: nn.Module, generator: torch.Generator) -> None:
    """Normal(0, 0.02) conv/linear weights, Normal(1, 0.02) norm scales.

    Walks submodules in definition order so a fixed generator seed gives a
    reproducible parameter draw regardless of global RNG state.
    """
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.normal_(0.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm2d, nn.GroupNorm)):
                if m.weight is not None:
                    m.weight.normal_(1.0, 0.02, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()

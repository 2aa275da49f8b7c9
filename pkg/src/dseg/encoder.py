"""Shared 3D encoder with a dual bottleneck.

A shared trunk of conv/batchnorm/ReLU blocks halves the spatial side at each
level and emits the skip features; two separate branch heads then map the
trunk output to the healthy and disease bottleneck latents, which have equal
shapes and disjoint parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, NumericError, ValidationError


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 1
    base_channels: int = 8
    n_levels: int = 4
    latent_channels: int | None = None
    branch_blocks: int = 1

    def validate(self) -> None:
        if self.n_levels < 2:
            raise ValidationError("n_levels must be >= 2")
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValidationError("channel counts must be >= 1")
        if self.branch_blocks < 1:
            raise ValidationError("branch_blocks must be >= 1")
        if self.latent_channels is not None and self.latent_channels < 1:
            raise ValidationError("latent_channels must be >= 1")

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2**level)

    def resolved_latent_channels(self) -> int:
        if self.latent_channels is not None:
            return self.latent_channels
        return self.level_channels(self.n_levels - 1)


def conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    """Encoding block: 3D convolution, batch normalization, ReLU."""
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, stride=stride, padding=1),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    """Maps a volume to (z_h, z_d, skips); skips are highest resolution first."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        blocks = [conv_block(cfg.in_channels, cfg.base_channels, stride=1)]
        for level in range(1, cfg.n_levels):
            blocks.append(
                conv_block(cfg.level_channels(level - 1), cfg.level_channels(level), stride=2)
            )
        self.trunk = nn.ModuleList(blocks)
        latent = cfg.resolved_latent_channels()
        trunk_out = cfg.level_channels(cfg.n_levels - 1)

        def branch() -> nn.Sequential:
            mods = [conv_block(trunk_out, latent, stride=2)]
            mods += [conv_block(latent, latent, stride=1) for _ in range(cfg.branch_blocks - 1)]
            return nn.Sequential(*mods)

        self.head_h = branch()
        self.head_d = branch()

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, list[Tensor]]:
        if x.dim() != 5:
            raise ConfigurationError(f"expected (B, C, D, H, W) input, got rank {x.dim()}")
        side = x.shape[-1]
        if x.shape[2:] != (side, side, side):
            raise ConfigurationError(f"expected a cubic volume, got {tuple(x.shape[2:])}")
        if side % (2**self.cfg.n_levels) != 0:
            raise ConfigurationError(
                f"grid side {side} not divisible by 2^{self.cfg.n_levels}"
            )
        skips = []
        f = x
        for block in self.trunk:
            f = block(f)
            skips.append(f)
        z_h = self.head_h(f)
        z_d = self.head_d(f)
        if not (torch.isfinite(z_h).all() and torch.isfinite(z_d).all()):
            raise NumericError("non-finite encoder activations")
        return z_h, z_d, skips

    def latent_side(self, grid_side: int) -> int:
        return grid_side // (2**self.cfg.n_levels)


def _fill_parameters(module: nn.Module, gen: torch.Generator) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv3d):
                fan_in = m.weight.shape[1] * math.prod(m.kernel_size)
            elif isinstance(m, nn.ConvTranspose3d):
                fan_in = m.weight.shape[0] * math.prod(m.kernel_size)
            elif isinstance(m, nn.Linear):
                fan_in = m.in_features
            elif isinstance(m, (nn.BatchNorm3d, nn.BatchNorm1d)):
                m.reset_running_stats()
                if m.weight is not None:
                    m.weight.fill_(1.0)
                    m.bias.fill_(0.0)
                continue
            else:
                continue
            # He fan-in rule: std = sqrt(2 / fan_in).
            m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
            if m.bias is not None:
                m.bias.zero_()


def init_params(module: nn.Module, seed: int) -> nn.Module:
    """Deterministically (re)initialize all parameters of a model in place.

    Uses a private generator, so the global torch RNG state is untouched.
    """
    gen = torch.Generator().manual_seed(int(seed))
    _fill_parameters(module, gen)
    return module


def build_encoder(cfg: EncoderConfig, seed: int) -> Encoder:
    return init_params(Encoder(cfg), seed)

"""Segmentation decoder and mask-conditioned image decoder.

The segmentation decoder is a standard transposed-conv UNet decoder over the
disease latent and all skip features. The image decoder upsamples the healthy
latent, keeps skip concatenation only in its deepest blocks, and injects the
(average-pooled) segmentation mask at every level through spatially adaptive
modulation of standardized features. Decoding with an all-zero mask yields
the pseudo-healthy pathway.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .encoder import EncoderConfig, conv_block
from .errors import ConfigurationError, ValidationError

RECON_FULL = "full_reconstruction"
RECON_PSEUDO_HEALTHY = "pseudo_healthy"

STANDARDIZE_EPS = 1e-5


@dataclass(frozen=True)
class SegDecoderConfig:
    base_channels: int = 8
    n_levels: int = 4
    latent_channels: int = 64

    @classmethod
    def from_encoder(cls, enc: EncoderConfig) -> "SegDecoderConfig":
        return cls(
            base_channels=enc.base_channels,
            n_levels=enc.n_levels,
            latent_channels=enc.resolved_latent_channels(),
        )

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2**level)

    def validate(self) -> None:
        if self.n_levels < 2 or self.base_channels < 1 or self.latent_channels < 1:
            raise ValidationError("invalid segmentation decoder configuration")


@dataclass(frozen=True)
class SpadeDecoderConfig:
    base_channels: int = 8
    n_levels: int = 4
    latent_channels: int = 64
    skip_drop_count: int = 3
    spade_hidden_channels: int = 16
    use_spade: bool = True

    @classmethod
    def from_encoder(
        cls,
        enc: EncoderConfig,
        skip_drop_count: int = 3,
        spade_hidden_channels: int = 16,
        use_spade: bool = True,
    ) -> "SpadeDecoderConfig":
        return cls(
            base_channels=enc.base_channels,
            n_levels=enc.n_levels,
            latent_channels=enc.resolved_latent_channels(),
            skip_drop_count=skip_drop_count,
            spade_hidden_channels=spade_hidden_channels,
            use_spade=use_spade,
        )

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2**level)

    def validate(self) -> None:
        if self.n_levels < 2 or self.base_channels < 1 or self.latent_channels < 1:
            raise ValidationError("invalid image decoder configuration")
        if not 0 <= self.skip_drop_count <= self.n_levels:
            raise ValidationError(
                f"skip_drop_count must lie in [0, {self.n_levels}], got {self.skip_drop_count}"
            )
        if self.spade_hidden_channels < 1:
            raise ValidationError("spade_hidden_channels must be >= 1")


@dataclass(frozen=True)
class ReconOutput:
    image: Tensor
    kind: str  # RECON_FULL or RECON_PSEUDO_HEALTHY


def standardize(features: Tensor, eps: float = STANDARDIZE_EPS) -> Tensor:
    """Parameter-free per-sample, per-channel standardization over space."""
    dims = tuple(range(2, features.dim()))
    mean = features.mean(dim=dims, keepdim=True)
    var = features.var(dim=dims, unbiased=False, keepdim=True)
    return (features - mean) / torch.sqrt(var + eps)


def downsample_mask(mask: Tensor, target_side: int) -> Tensor:
    """Average-pool a mask to a cube of the given side (soft occupancy)."""
    squeeze = mask.dim() == 3
    m = mask[None, None] if squeeze else mask
    side = m.shape[-1]
    if side % target_side != 0:
        raise ConfigurationError(f"mask side {side} not divisible by target {target_side}")
    factor = side // target_side
    if factor > 1:
        m = F.avg_pool3d(m.float(), kernel_size=factor, stride=factor)
    else:
        m = m.float()
    return m[0, 0] if squeeze else m


class SpadeBlock(nn.Module):
    """Standardize, then modulate with mask-conditioned scale and shift.

    With the gamma/beta maps at zero the block reduces to the plain
    standardization.
    """

    def __init__(self, channels: int, hidden: int, mask_channels: int = 1):
        super().__init__()
        self.shared = nn.Sequential(
            nn.Conv3d(mask_channels, hidden, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.gamma = nn.Conv3d(hidden, channels, kernel_size=3, padding=1)
        self.beta = nn.Conv3d(hidden, channels, kernel_size=3, padding=1)

    def forward(self, features: Tensor, mask: Tensor) -> Tensor:
        if features.shape[2:] != mask.shape[2:]:
            raise ConfigurationError(
                f"mask spatial shape {tuple(mask.shape[2:])} != "
                f"feature spatial shape {tuple(features.shape[2:])}"
            )
        normalized = standardize(features)
        actv = self.shared(mask)
        return normalized * (1.0 + self.gamma(actv)) + self.beta(actv)


class SegDecoder(nn.Module):
    """Transposed-conv decoder from z_d and all skips to a probability mask."""

    def __init__(self, cfg: SegDecoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ups, convs = [], []
        cin = cfg.latent_channels
        for level in range(cfg.n_levels - 1, -1, -1):
            cout = cfg.level_channels(level)
            ups.append(nn.ConvTranspose3d(cin, cout, kernel_size=2, stride=2))
            convs.append(conv_block(2 * cout, cout, stride=1))
            cin = cout
        self.ups = nn.ModuleList(ups)
        self.convs = nn.ModuleList(convs)
        self.head = nn.Conv3d(cfg.base_channels, 1, kernel_size=1)

    def forward(self, z_d: Tensor, skips: list[Tensor]) -> Tensor:
        if len(skips) != self.cfg.n_levels:
            raise ConfigurationError(
                f"expected {self.cfg.n_levels} skip levels, got {len(skips)}"
            )
        f = z_d
        for stage, (up, conv) in enumerate(zip(self.ups, self.convs)):
            f = up(f)
            skip = skips[self.cfg.n_levels - 1 - stage]
            if skip.shape[2:] != f.shape[2:]:
                raise ConfigurationError(
                    f"skip level {self.cfg.n_levels - 1 - stage} spatial shape "
                    f"{tuple(skip.shape[2:])} does not match decoder {tuple(f.shape[2:])}"
                )
            f = conv(torch.cat([f, skip], dim=1))
        return torch.sigmoid(self.head(f))


class ImageDecoder(nn.Module):
    """Decoder from z_h (and pruned skips) to an image, conditioned on a mask.

    The deepest ``n_levels - skip_drop_count`` blocks concatenate skips; the
    remaining blocks run without lateral input so fine detail can enter only
    through the mask. With ``use_spade`` off the mask is ignored and plain
    batch normalization is used (ablation path).
    """

    def __init__(self, cfg: SpadeDecoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        ups, convs, norms = [], [], []
        cin = cfg.latent_channels
        for stage in range(cfg.n_levels):
            level = cfg.n_levels - 1 - stage
            cout = cfg.level_channels(level)
            ups.append(nn.ConvTranspose3d(cin, cout, kernel_size=2, stride=2))
            conv_in = 2 * cout if self._stage_uses_skip(stage) else cout
            if cfg.use_spade:
                convs.append(nn.Conv3d(conv_in, cout, kernel_size=3, padding=1))
                norms.append(SpadeBlock(cout, cfg.spade_hidden_channels))
            else:
                convs.append(nn.Conv3d(conv_in, cout, kernel_size=3, padding=1))
                norms.append(nn.BatchNorm3d(cout))
            cin = cout
        self.ups = nn.ModuleList(ups)
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.act = nn.ReLU(inplace=True)
        self.head = nn.Conv3d(cfg.base_channels, 1, kernel_size=1)

    def _stage_uses_skip(self, stage: int) -> bool:
        return stage < self.cfg.n_levels - self.cfg.skip_drop_count

    def forward(self, z_h: Tensor, skips: list[Tensor], mask: Tensor) -> Tensor:
        if len(skips) != self.cfg.n_levels:
            raise ConfigurationError(
                f"expected {self.cfg.n_levels} skip levels, got {len(skips)}"
            )
        if mask.dim() != 5:
            raise ConfigurationError("mask must be a (B, 1, D, H, W) tensor")
        f = z_h
        for stage in range(self.cfg.n_levels):
            f = self.ups[stage](f)
            if self._stage_uses_skip(stage):
                skip = skips[self.cfg.n_levels - 1 - stage]
                if skip.shape[2:] != f.shape[2:]:
                    raise ConfigurationError(
                        f"skip level {self.cfg.n_levels - 1 - stage} does not match "
                        f"decoder shape {tuple(f.shape[2:])}"
                    )
                f = torch.cat([f, skip], dim=1)
            f = self.convs[stage](f)
            if self.cfg.use_spade:
                f = self.norms[stage](f, downsample_mask(mask, f.shape[-1]))
            else:
                f = self.norms[stage](f)
            f = self.act(f)
        return self.head(f)


def decode_segmentation(decoder: SegDecoder, z_d: Tensor, skips: list[Tensor]) -> Tensor:
    """Per-voxel lesion probabilities at full input resolution."""
    return decoder(z_d, skips)


def decode_image(
    decoder: ImageDecoder, z_h: Tensor, skips: list[Tensor], mask: Tensor
) -> ReconOutput:
    """Decode an image; an identically-zero mask marks the output as the
    pseudo-healthy estimate."""
    image = decoder(z_h, skips, mask)
    kind = RECON_PSEUDO_HEALTHY if bool((mask == 0).all()) else RECON_FULL
    return ReconOutput(image=image, kind=kind)

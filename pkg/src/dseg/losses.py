"""Segmentation, reconstruction, and overall objective terms.

All functions accept either a single volume (rank <= 3) or a batch whose
leading dimension indexes samples; per-sample reductions (Dice) are averaged
over the batch, voxelwise reductions (CE, reconstruction) over everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .errors import DataError, ValidationError

CE_CLAMP = 1e-7
DICE_EPS = 1e-5


@dataclass(frozen=True)
class LossWeights:
    w_s: float = 100.0
    w_r: float = 10.0
    w_ph: float = 1e-3
    dice_eps: float = DICE_EPS

    def validate(self) -> None:
        if min(self.w_s, self.w_r, self.w_ph) < 0:
            raise ValidationError("loss weights must be nonnegative")
        if self.dice_eps <= 0:
            raise ValidationError("dice_eps must be positive")


def _check_shapes(pred: Tensor, gt: Tensor) -> None:
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")


def _sample_dims(t: Tensor) -> tuple[int, ...]:
    # Rank >= 4 means dim 0 is a batch dimension.
    return tuple(range(1, t.dim())) if t.dim() >= 4 else tuple(range(t.dim()))


def dice_loss(pred: Tensor, gt: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Soft Dice over the whole volume: 1 - (2*sum(p*g)+eps)/(sum p + sum g + eps).

    The smoothing term makes the empty-prediction/empty-target case come out
    at exactly 0 loss.
    """
    _check_shapes(pred, gt)
    dims = _sample_dims(pred)
    gt = gt.to(pred.dtype)
    inter = (pred * gt).sum(dim=dims)
    denom = pred.sum(dim=dims) + gt.sum(dim=dims)
    return (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()


def cross_entropy_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Voxel-mean binary cross entropy with probability clamping."""
    _check_shapes(pred, gt)
    gt = gt.to(pred.dtype)
    p = pred.clamp(CE_CLAMP, 1.0 - CE_CLAMP)
    return -(gt * torch.log(p) + (1.0 - gt) * torch.log1p(-p)).mean()


def combo_loss(pred: Tensor, gt: Tensor, eps: float = DICE_EPS) -> Tensor:
    """Sum of soft Dice and cross-entropy losses."""
    return dice_loss(pred, gt, eps) + cross_entropy_loss(pred, gt)


def recon_loss(x: Tensor, r: Tensor) -> Tensor:
    """Voxel-mean absolute error plus voxel-mean squared error."""
    _check_shapes(x, r)
    diff = x - r
    return diff.abs().mean() + (diff * diff).mean()


def overall_loss(l_seg, l_recon, l_ph, weights: LossWeights):
    """Weighted sum of the generator-side terms."""
    return weights.w_s * l_seg + weights.w_r * l_recon + weights.w_ph * l_ph


LOG_COLUMNS = (
    "step",
    "l_seg",
    "l_dice",
    "l_ce",
    "l_recon",
    "l_pseudo_healthy",
    "l_critic",
    "l_overall",
)


@dataclass(frozen=True)
class LossReport:
    """Per-step scalar record; l_overall is recomputed from the logged
    components in float64 so the weighted-sum identity holds exactly."""

    step: int
    l_seg: float
    l_dice: float
    l_ce: float
    l_recon: float
    l_pseudo_healthy: float
    l_critic: float
    l_overall: float

    @classmethod
    def build(
        cls,
        step: int,
        l_dice: float,
        l_ce: float,
        l_recon: float,
        l_pseudo_healthy: float,
        l_critic: float,
        weights: LossWeights,
    ) -> "LossReport":
        l_seg = float(l_dice) + float(l_ce)
        l_overall = float(
            overall_loss(l_seg, float(l_recon), float(l_pseudo_healthy), weights)
        )
        return cls(
            step=int(step),
            l_seg=l_seg,
            l_dice=float(l_dice),
            l_ce=float(l_ce),
            l_recon=float(l_recon),
            l_pseudo_healthy=float(l_pseudo_healthy),
            l_critic=float(l_critic),
            l_overall=l_overall,
        )

    def is_finite(self) -> bool:
        return all(
            math.isfinite(getattr(self, c)) for c in LOG_COLUMNS if c != "step"
        )

    def check_consistency(self, weights: LossWeights, tol: float = 1e-9) -> None:
        expected = overall_loss(self.l_seg, self.l_recon, self.l_pseudo_healthy, weights)
        if not self.is_finite():
            raise ValidationError(f"non-finite loss report at step {self.step}")
        if abs(expected - self.l_overall) > tol:
            raise ValidationError(
                f"l_overall {self.l_overall} != weighted sum {expected} at step {self.step}"
            )

    def tsv_line(self) -> str:
        return "\t".join(
            str(self.step) if c == "step" else repr(getattr(self, c)) for c in LOG_COLUMNS
        )

    @staticmethod
    def tsv_header() -> str:
        return "\t".join(LOG_COLUMNS)

"""Evaluation: Dice and false-positive metrics per case, grouped summaries,
lesion suppression in the pseudo-healthy image, and slice montages."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import ValidationError  # noqa: E402
from .phantom import CaseRecord  # noqa: E402
from .trainer import DisentangleModel  # noqa: E402

THRESHOLD = 0.5


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    """Strict comparison: exactly-threshold probabilities count as background."""
    return prob > threshold


def dice_metric(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap Dice on binary masks. Both empty scores 1.0: predicting
    nothing on a healthy case is a perfect answer, unlike in the loss."""
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def false_positive_voxels(pred: np.ndarray, gt: np.ndarray) -> int:
    return int((pred.astype(bool) & ~gt.astype(bool)).sum())


def infer_case(model: DisentangleModel, volume: np.ndarray) -> dict[str, np.ndarray]:
    if volume.ndim != 3 or len(set(volume.shape)) != 1:
        raise ValidationError(f"expected cubic 3D volume, got shape {volume.shape}")
    x = torch.from_numpy(np.ascontiguousarray(volume, dtype=np.float32))[None, None]
    out = model.predict(x)
    return {k: v[0, 0].numpy() for k, v in out.items()}


@dataclass(frozen=True)
class CaseResult:
    case_id: str
    label: str
    dice: float
    fp_voxels: int
    rp_mae: float | None
    lesion_suppression: float | None


def _mean_std(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=0))


@dataclass(frozen=True)
class EvalReport:
    threshold: float
    cases: tuple[CaseResult, ...]

    def group(self, which: str) -> list[CaseResult]:
        if which == "overall":
            return list(self.cases)
        return [c for c in self.cases if c.label == which]

    def summary(self) -> dict:
        out: dict = {}
        for which in ("healthy", "disease", "overall"):
            rows = self.group(which)
            stats: dict = {"n": len(rows)}
            for field in ("dice", "fp_voxels", "rp_mae", "lesion_suppression"):
                vals = [float(getattr(c, field)) for c in rows if getattr(c, field) is not None]
                mean, std = _mean_std(vals)
                stats[field] = {"mean": mean, "std": std, "n": len(vals)}
            out[which] = stats
        return out

    def to_json(self) -> str:
        payload = {
            "threshold": self.threshold,
            "cases": [asdict(c) for c in self.cases],
            "summary": self.summary(),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_text(self) -> str:
        def fmt(v, width=10):
            if v is None:
                return "-".rjust(width)
            if isinstance(v, int):
                return str(v).rjust(width)
            return f"{v:.4f}".rjust(width)

        lines = [
            f"{'case':<16}{'label':<10}{'dice':>10}{'fp_vox':>10}{'|R-P|':>10}{'suppr':>10}"
        ]
        for c in self.cases:
            lines.append(
                f"{c.case_id:<16}{c.label:<10}{fmt(c.dice)}{fmt(c.fp_voxels)}"
                f"{fmt(c.rp_mae)}{fmt(c.lesion_suppression)}"
            )
        summary = self.summary()
        for which in ("healthy", "disease", "overall"):
            s = summary[which]
            parts = [f"{which} (n={s['n']})"]
            for field in ("dice", "fp_voxels", "rp_mae", "lesion_suppression"):
                st = s[field]
                if st["mean"] is None:
                    continue
                parts.append(f"{field} {st['mean']:.4f} +/- {st['std']:.4f}")
            lines.append("  ".join(parts))
        return "\n".join(lines)


def evaluate_case(
    model: DisentangleModel, case: CaseRecord, threshold: float = THRESHOLD
) -> CaseResult:
    out = infer_case(model, case.volume)
    pred = binarize(out["mask_prob"], threshold)
    gt = case.gt_mask.astype(bool)
    dice = dice_metric(pred, gt)
    fp = false_positive_voxels(pred, gt)

    rp_mae = None
    suppression = None
    if "recon" in out:
        rp_mae = float(np.abs(out["recon"] - out["pseudo_healthy"]).mean())
        if gt.any():
            mean_r = float(out["recon"][gt].mean())
            mean_p = float(out["pseudo_healthy"][gt].mean())
            if abs(mean_r) > 1e-8:
                suppression = 1.0 - mean_p / mean_r
    return CaseResult(case.case_id, case.label, dice, fp, rp_mae, suppression)


def evaluate(
    model: DisentangleModel, cases: list[CaseRecord], threshold: float = THRESHOLD
) -> EvalReport:
    results = tuple(evaluate_case(model, c, threshold) for c in cases)
    return EvalReport(threshold=threshold, cases=results)


# ---------------------------------------------------------------------------
# rendering


def _central_slices(arr: np.ndarray) -> list[np.ndarray]:
    s = arr.shape[0]
    return [arr[s // 2, :, :], arr[:, s // 2, :], arr[:, :, s // 2]]


def render_case(
    model: DisentangleModel,
    case: CaseRecord,
    out_dir: Path | str,
    run_id: str,
    threshold: float = THRESHOLD,
) -> Path:
    """Write an axial/coronal/sagittal montage PNG; filename depends only on
    (run_id, case_id) so reruns overwrite rather than accumulate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = infer_case(model, case.volume)

    panels: list[tuple[str, np.ndarray, float]] = [
        ("X", case.volume, 1.0),
        ("M_gt", case.gt_mask.astype(np.float32), 1.0),
        ("M", out["mask_prob"], 1.0),
    ]
    if "recon" in out:
        diff = np.abs(out["recon"] - out["pseudo_healthy"])
        panels += [
            ("R", out["recon"], 1.0),
            ("P", out["pseudo_healthy"], 1.0),
            ("|R-P|", diff, max(1e-6, float(diff.max()))),
        ]

    row_names = ("axial", "coronal", "sagittal")
    fig, axes = plt.subplots(3, len(panels), figsize=(2.2 * len(panels), 6.8))
    axes = np.atleast_2d(axes)
    for col, (name, arr, vmax) in enumerate(panels):
        for row, sl in enumerate(_central_slices(arr)):
            ax = axes[row, col]
            ax.imshow(sl, cmap="gray", vmin=0.0, vmax=vmax, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(name, fontsize=9)
            if col == 0:
                ax.set_ylabel(row_names[row], fontsize=9)
    fig.suptitle(f"{case.case_id} ({case.label})", fontsize=10)
    fig.tight_layout()
    path = out_dir / f"{run_id}_{case.case_id}.png"
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path

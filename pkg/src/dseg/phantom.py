"""Synthetic lower-torso phantom volumes.

Every case carries a bright bladder-like blob near the volume centre plus a
configurable number of jittered flank organs (kidney-like). Disease cases
additionally contain lesion blobs whose centres are kept out of organ cores
but may abut them, so that healthy uptake and lesions remain visually
confusable. Blobs are Gaussian-profiled ellipsoids; ground-truth masks are
the thresholded ellipsoid supports of the lesions only.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, PlacementError, ValidationError

LABELS = ("healthy", "disease")
SPLITS = ("train", "val", "test")

# Gaussian profile exp(-PROFILE_DECAY * d^2); ~0.135 of peak at the support
# boundary d=1, which is also the mask threshold for lesions.
PROFILE_DECAY = 2.0
# Lesion centres must satisfy normalized organ distance > this margin.
ORGAN_CORE_MARGIN = 1.2
MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class PhantomSpec:
    """Free knobs of the generator; defaults target 32-voxel desk scale."""

    grid_size: int = 32
    n_healthy_organs: int = 3
    organ_intensity_range: tuple[float, float] = (0.6, 1.0)
    lesion_intensity_range: tuple[float, float] = (0.5, 0.9)
    lesion_count_range: tuple[int, int] = (1, 3)
    blob_radius_range: tuple[float, float] = (2.5, 5.0)
    noise_sigma: float = 0.03
    background_level: float = 0.05
    contrast_margin: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.grid_size < 16:
            raise ValidationError(f"grid_size must be >= 16, got {self.grid_size}")
        if self.n_healthy_organs < 1:
            raise ValidationError("n_healthy_organs must be >= 1")
        for name, (lo, hi), lo_bound, hi_bound in (
            ("organ_intensity_range", self.organ_intensity_range, 0.0, 1.0),
            ("lesion_intensity_range", self.lesion_intensity_range, 0.0, 1.0),
        ):
            if not (lo_bound < lo <= hi <= hi_bound):
                raise ValidationError(f"{name} must be a nonempty interval within (0, 1]")
        c_lo, c_hi = self.lesion_count_range
        if not (1 <= c_lo <= c_hi):
            raise ValidationError("lesion_count_range must be a nonempty interval of counts >= 1")
        r_lo, r_hi = self.blob_radius_range
        if not (0.5 <= r_lo <= r_hi):
            raise ValidationError("blob_radius_range must be a nonempty interval of radii >= 0.5")
        if r_hi > self.grid_size / 4:
            raise ValidationError("blob_radius_range upper bound too large for the grid")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be nonnegative")
        if not (0.0 <= self.background_level < 0.5):
            raise ValidationError("background_level must lie in [0, 0.5)")


@dataclass
class CaseRecord:
    """One generated or preprocessed case."""

    volume: np.ndarray
    gt_mask: np.ndarray
    label: str
    case_id: str
    split: str = "train"

    def validate(self) -> None:
        if self.label not in LABELS:
            raise ValidationError(f"unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split {self.split!r}")
        if self.volume.shape != self.gt_mask.shape:
            raise ValidationError(
                f"volume shape {self.volume.shape} != mask shape {self.gt_mask.shape}"
            )
        if not np.all(np.isfinite(self.volume)):
            raise ValidationError("volume contains non-finite values")
        if self.volume.min() < 0.0 or self.volume.max() > 1.0:
            raise ValidationError("volume values must lie in [0, 1]")
        mask_sum = int(np.count_nonzero(self.gt_mask))
        if self.label == "healthy" and mask_sum != 0:
            raise ValidationError("healthy case must have an empty ground-truth mask")
        if self.label == "disease" and mask_sum == 0:
            raise ValidationError("disease case must have a nonempty ground-truth mask")


@dataclass(frozen=True)
class _Blob:
    center: np.ndarray  # (z, y, x) voxel coordinates
    radii: np.ndarray   # semi-axes in voxels
    peak: float

    def normalized_dist2(self, coords: tuple[np.ndarray, ...]) -> np.ndarray:
        d2 = 0.0
        for ax in range(3):
            d2 = d2 + ((coords[ax] - self.center[ax]) / self.radii[ax]) ** 2
        return np.asarray(d2, dtype=np.float64)


def _grid_coords(size: int) -> tuple[np.ndarray, ...]:
    axes = np.ogrid[0:size, 0:size, 0:size]
    return tuple(a.astype(np.float64) for a in axes)


def _sample_center(rng: np.random.Generator, size: int, radii: np.ndarray) -> np.ndarray:
    lo = radii + 1.0
    hi = size - 1.0 - radii
    if np.any(hi <= lo):
        raise PlacementError("blob radii leave no room inside the grid")
    return rng.uniform(lo, hi)


def _place_organs(spec: PhantomSpec, rng: np.random.Generator) -> list[_Blob]:
    size = spec.grid_size
    r_lo, r_hi = spec.blob_radius_range
    r_mid = 0.5 * (r_lo + r_hi)
    organs: list[_Blob] = []

    # Bladder-like organ: pinned near the volume centre with small jitter,
    # sized at the top of the radius range.
    center = size / 2.0 + rng.uniform(-1.5, 1.5, size=3)
    radii = rng.uniform(0.85 * r_hi, r_hi, size=3)
    radii = np.clip(radii, r_lo, r_hi)
    peak = rng.uniform(*spec.organ_intensity_range)
    organs.append(_Blob(center, radii, peak))

    # Flank organs spread around the centre on a ring, with positional jitter
    # large enough that their locations cannot simply be memorized.
    ring = 0.28 * size
    for k in range(spec.n_healthy_organs - 1):
        angle = 2.0 * np.pi * (k / max(1, spec.n_healthy_organs - 1)) + rng.uniform(-0.4, 0.4)
        base = np.array(
            [
                size / 2.0 + rng.uniform(-0.12, 0.12) * size,
                size / 2.0 + ring * np.sin(angle),
                size / 2.0 + ring * np.cos(angle),
            ]
        )
        center = base + rng.uniform(-2.5, 2.5, size=3)
        radii = np.clip(rng.uniform(r_mid, r_hi, size=3), r_lo, r_hi)
        center = np.clip(center, radii + 1.0, size - 1.0 - radii)
        peak = rng.uniform(*spec.organ_intensity_range)
        organs.append(_Blob(center, radii, peak))
    return organs


def _place_lesions(
    spec: PhantomSpec, rng: np.random.Generator, organs: list[_Blob]
) -> list[_Blob]:
    r_lo, r_hi = spec.blob_radius_range
    lesion_r_hi = max(r_lo, min(r_hi, 0.85 * r_hi))
    n = int(rng.integers(spec.lesion_count_range[0], spec.lesion_count_range[1] + 1))
    lesions: list[_Blob] = []
    for _ in range(n):
        radii = rng.uniform(r_lo, lesion_r_hi, size=3)
        for attempt in range(MAX_PLACEMENT_TRIES):
            center = _sample_center(rng, spec.grid_size, radii)
            point = tuple(np.asarray(c, dtype=np.float64) for c in center)
            if all(o.normalized_dist2(point) > ORGAN_CORE_MARGIN**2 for o in organs):
                break
        else:
            raise PlacementError(
                f"could not place a lesion after {MAX_PLACEMENT_TRIES} tries"
            )
        peak = rng.uniform(*spec.lesion_intensity_range)
        lesions.append(_Blob(center, radii, peak))
    return lesions


def generate_case(spec: PhantomSpec, label: str, case_seed: int) -> CaseRecord:
    """Render one deterministic case.

    The RNG stream is keyed on (spec.seed, case_seed, label) so identical
    inputs reproduce bitwise-identical cases.
    """
    spec.validate()
    if label not in LABELS:
        raise ValidationError(f"unknown label {label!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence((spec.seed, int(case_seed), LABELS.index(label)))
    )
    size = spec.grid_size
    coords = _grid_coords(size)

    organs = _place_organs(spec, rng)
    lesions = _place_lesions(spec, rng, organs) if label == "disease" else []

    vol = np.full((size, size, size), spec.background_level, dtype=np.float64)
    if spec.noise_sigma > 0:
        vol += rng.normal(0.0, spec.noise_sigma, size=vol.shape)
    for blob in organs + lesions:
        vol += blob.peak * np.exp(-PROFILE_DECAY * blob.normalized_dist2(coords))
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)

    mask = np.zeros((size, size, size), dtype=np.uint8)
    for blob in lesions:
        mask |= (blob.normalized_dist2(coords) <= 1.0).astype(np.uint8)

    record = CaseRecord(
        volume=vol,
        gt_mask=mask,
        label=label,
        case_id=f"{label}_{case_seed:05d}",
    )
    record.validate()
    return record


def organ_support(spec: PhantomSpec, label: str, case_seed: int) -> np.ndarray:
    """Boolean support (d <= 1) of the healthy-organ blobs of a case.

    Recomputes the placement stream of :func:`generate_case`; used to check
    the organ/background contrast property without storing organ geometry.
    """
    spec.validate()
    rng = np.random.default_rng(
        np.random.SeedSequence((spec.seed, int(case_seed), LABELS.index(label)))
    )
    organs = _place_organs(spec, rng)
    coords = _grid_coords(spec.grid_size)
    support = np.zeros((spec.grid_size,) * 3, dtype=bool)
    for blob in organs:
        support |= blob.normalized_dist2(coords) <= 1.0
    return support


def _split_counts(n: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    # Cumulative-floor allocation: deterministic, exact for clean fractions.
    # The 1e-6 slack absorbs float error in fractions like 2/3 + 1/6 + 1/6.
    c1 = int(np.floor(n * fractions[0] + 1e-6))
    c2 = int(np.floor(n * (fractions[0] + fractions[1]) + 1e-6))
    return c1, c2 - c1, n - c2


def generate_dataset(
    spec: PhantomSpec,
    n_healthy: int,
    n_disease: int,
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> list[CaseRecord]:
    """Generate a stratified dataset: splits are allocated per label."""
    spec.validate()
    if n_healthy < 0 or n_disease < 0:
        raise ConfigurationError("case counts must be nonnegative")
    if len(split_fractions) != 3 or any(f < 0 for f in split_fractions):
        raise ConfigurationError("split_fractions must be three nonnegative numbers")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ConfigurationError(
            f"split_fractions must sum to 1, got {sum(split_fractions)}"
        )

    records: list[CaseRecord] = []
    for label, count, seed_base in (("healthy", n_healthy, 0), ("disease", n_disease, 1_000_000)):
        n_train, n_val, _ = _split_counts(count, tuple(split_fractions))
        for i in range(count):
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            rec = generate_case(spec, label, seed_base + i)
            records.append(dataclasses.replace(rec, split=split))
    return records

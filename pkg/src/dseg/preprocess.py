"""Preprocessing pipeline and the on-disk containers shared by all modules.

Array container (one 3D array per file, extension ``.dseg``)::

    magic   b"DSEG"
    version u16 little-endian (currently 1)
    dtype   u8 code (1=float32, 2=float64, 3=uint8, 4=int64)
    shape   3 x u32 little-endian (D, H, W)
    payload row-major array bytes, little-endian

Checkpoint container (named arrays of any rank, extension ``.ckpt``): same
framing preceded by a name table::

    magic   b"DSGK"
    version u16
    count   u32
    names   count x (u16 length + UTF-8 bytes)
    entries count x (u8 dtype code, u8 ndim, ndim x u32 dims, payload)

Both containers are strict: wrong magic, truncation, or trailing bytes raise
:class:`~dseg.errors.FormatError`.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ValidationError
from .phantom import CaseRecord

ARRAY_MAGIC = b"DSEG"
CHECKPOINT_MAGIC = b"DSGK"
FORMAT_VERSION = 1

_DTYPE_TO_CODE = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i8"): 4,
}
_CODE_TO_DTYPE = {v: k for k, v in _DTYPE_TO_CODE.items()}


# ---------------------------------------------------------------------------
# binary containers


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dtype_code(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _DTYPE_TO_CODE.get(np.dtype(dt))
    if code is None:
        raise DataError(f"unsupported array dtype {arr.dtype}")
    return code


def write_array(path: Path | str, arr: np.ndarray) -> None:
    """Write one 3D array in the portable container."""
    arr = np.asarray(arr)
    if arr.ndim != 3:
        raise DataError(f"array container holds 3D arrays, got ndim={arr.ndim}")
    code = _dtype_code(arr)
    arr = np.ascontiguousarray(arr.astype(_CODE_TO_DTYPE[code], copy=False))
    header = ARRAY_MAGIC + struct.pack("<HB3I", FORMAT_VERSION, code, *arr.shape)
    _atomic_write(Path(path), header + arr.tobytes())


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(f"{self.path}: truncated container")
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> None:
        if self.off != len(self.data):
            raise FormatError(f"{self.path}: {len(self.data) - self.off} trailing bytes")


def _read_header(r: _Reader, magic: bytes) -> None:
    if r.take(4) != magic:
        raise FormatError(f"{r.path}: bad magic, expected {magic!r}")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.path}: unsupported container version {version}")


def _read_payload(r: _Reader, code: int, shape: tuple[int, ...]) -> np.ndarray:
    dtype = _CODE_TO_DTYPE.get(code)
    if dtype is None:
        raise FormatError(f"{r.path}: unknown dtype code {code}")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    raw = r.take(count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def read_array(path: Path | str) -> np.ndarray:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _read_header(r, ARRAY_MAGIC)
    code, d, h, w = r.unpack("<B3I")
    arr = _read_payload(r, code, (d, h, w))
    r.done()
    return arr


def write_named_arrays(path: Path | str, arrays: dict[str, np.ndarray]) -> None:
    """Write a keyed flat map of arrays (checkpoint framing with name table)."""
    names = list(arrays.keys())
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", FORMAT_VERSION, len(names))]
    for name in names:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataError(f"array name too long: {name[:32]}...")
        parts.append(struct.pack("<H", len(raw)) + raw)
    for name in names:
        arr = np.asarray(arrays[name])
        code = _dtype_code(arr)
        # note: ascontiguousarray would promote 0-d entries to 1-d
        arr = np.asarray(arr.astype(_CODE_TO_DTYPE[code], copy=False), order="C")
        if arr.ndim > 8:
            raise DataError(f"{name}: rank {arr.ndim} arrays not supported")
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    _atomic_write(Path(path), b"".join(parts))


def read_named_arrays(path: Path | str) -> dict[str, np.ndarray]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    _read_header(r, CHECKPOINT_MAGIC)
    (count,) = r.unpack("<I")
    names = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        names.append(r.take(n).decode("utf-8"))
    arrays: dict[str, np.ndarray] = {}
    for name in names:
        code, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        arrays[name] = _read_payload(r, code, tuple(shape))
    r.done()
    return arrays


# ---------------------------------------------------------------------------
# preprocessing operations


@dataclass(frozen=True)
class PreprocessConfig:
    suv_clip: tuple[float, float] = (0.0, 15.0)
    crop_size: int = 128
    out_size: int = 64

    def validate(self) -> None:
        lo, hi = self.suv_clip
        if not (0.0 <= lo < hi):
            raise ValidationError(f"suv_clip must satisfy 0 <= lo < hi, got {self.suv_clip}")
        if self.out_size < 1 or self.crop_size < self.out_size:
            raise ValidationError("crop_size must be >= out_size >= 1")


def clip_normalize(raw: np.ndarray, clip: tuple[float, float]) -> np.ndarray:
    """Clip to ``[lo, hi]`` and rescale linearly onto [0, 1]."""
    lo, hi = float(clip[0]), float(clip[1])
    if not lo < hi:
        raise ValidationError(f"clip interval must satisfy lo < hi, got {clip}")
    raw = np.asarray(raw, dtype=np.float32)
    if np.isnan(raw).any():
        raise DataError("input volume contains NaN")
    return ((np.clip(raw, lo, hi) - lo) / (hi - lo)).astype(np.float32)


def crop_at_landmark(
    raw: np.ndarray, landmark: tuple[int, int, int], crop_size: int
) -> np.ndarray:
    """Cube of side ``crop_size`` centred at the landmark, zero-padded
    wherever it extends past the source volume."""
    raw = np.asarray(raw)
    if crop_size < 1:
        raise ValidationError("crop_size must be >= 1")
    out = np.zeros((crop_size,) * 3, dtype=raw.dtype)
    starts = [int(round(landmark[ax])) - crop_size // 2 for ax in range(3)]
    src, dst = [], []
    for ax in range(3):
        s0 = max(starts[ax], 0)
        s1 = min(starts[ax] + crop_size, raw.shape[ax])
        if s1 <= s0:
            return out
        src.append(slice(s0, s1))
        dst.append(slice(s0 - starts[ax], s1 - starts[ax]))
    out[tuple(dst)] = raw[tuple(src)]
    return out


def _resize_axis(arr: np.ndarray, axis: int, out_len: int, mode: str) -> np.ndarray:
    in_len = arr.shape[axis]
    # Half-pixel sample mapping with border clamping: output index i reads
    # source coordinate (i + 0.5) * in/out - 0.5.
    src = (np.arange(out_len, dtype=np.float64) + 0.5) * (in_len / out_len) - 0.5
    if mode == "nearest":
        idx = np.clip(np.floor(src + 0.5).astype(np.int64), 0, in_len - 1)
        return np.take(arr, idx, axis=axis)
    i0 = np.floor(src).astype(np.int64)
    w = src - i0
    lo = np.take(arr, np.clip(i0, 0, in_len - 1), axis=axis).astype(np.float64)
    hi = np.take(arr, np.clip(i0 + 1, 0, in_len - 1), axis=axis).astype(np.float64)
    shape = [1, 1, 1]
    shape[axis] = out_len
    w = w.reshape(shape)
    return lo * (1.0 - w) + hi * w


def resize(vol: np.ndarray, out_size: int, mode: str = "linear") -> np.ndarray:
    """Trilinear (``linear``) or nearest-neighbour resize to a cube.

    Linear output is a convex combination of inputs, so values stay within
    the input min/max. Nearest mode is used for masks to preserve binarity.
    """
    if mode not in ("linear", "nearest"):
        raise ValidationError(f"unknown resize mode {mode!r}")
    if out_size < 1:
        raise ValidationError("out_size must be >= 1")
    vol = np.asarray(vol)
    if vol.ndim != 3:
        raise DataError(f"resize expects a 3D volume, got ndim={vol.ndim}")
    out = vol
    for ax in range(3):
        out = _resize_axis(out, ax, out_size, mode)
    return out.astype(vol.dtype if mode == "nearest" else np.float32)


def preprocess_case(
    raw_volume: np.ndarray,
    raw_mask: np.ndarray | None,
    landmark: tuple[int, int, int],
    cfg: PreprocessConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the full pipeline: clip+normalize, landmark crop, resize."""
    cfg.validate()
    vol = clip_normalize(raw_volume, cfg.suv_clip)
    vol = crop_at_landmark(vol, landmark, cfg.crop_size)
    vol = resize(vol, cfg.out_size, mode="linear")
    vol = np.clip(vol, 0.0, 1.0).astype(np.float32)
    if raw_mask is None:
        mask = np.zeros((cfg.out_size,) * 3, dtype=np.uint8)
    else:
        if raw_mask.shape != np.asarray(raw_volume).shape:
            raise DataError(
                f"mask shape {raw_mask.shape} != volume shape {np.asarray(raw_volume).shape}"
            )
        mask = crop_at_landmark(np.asarray(raw_mask, dtype=np.uint8), landmark, cfg.crop_size)
        mask = resize(mask, cfg.out_size, mode="nearest").astype(np.uint8)
    return vol, mask


# ---------------------------------------------------------------------------
# case and dataset I/O

VOLUME_FILE = "volume.dseg"
MASK_FILE = "mask.dseg"
META_FILE = "meta.json"
MANIFEST_FILE = "manifest.tsv"


def write_case(record: CaseRecord, case_dir: Path | str) -> Path:
    """Persist one case; volume as float32, mask as uint8."""
    if record.volume.shape != record.gt_mask.shape:
        raise DataError("volume and mask shapes differ")
    record.validate()
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    write_array(case_dir / VOLUME_FILE, record.volume.astype(np.float32, copy=False))
    write_array(case_dir / MASK_FILE, record.gt_mask.astype(np.uint8, copy=False))
    meta = {"case_id": record.case_id, "label": record.label, "split": record.split}
    (case_dir / META_FILE).write_text(json.dumps(meta, sort_keys=True) + "\n")
    return case_dir


def read_case(case_dir: Path | str) -> CaseRecord:
    case_dir = Path(case_dir)
    try:
        meta = json.loads((case_dir / META_FILE).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{case_dir / META_FILE}: invalid JSON ({exc})") from exc
    volume = read_array(case_dir / VOLUME_FILE)
    mask = read_array(case_dir / MASK_FILE)
    if volume.shape != mask.shape:
        raise DataError(f"{case_dir}: volume/mask shape mismatch")
    record = CaseRecord(
        volume=volume.astype(np.float32, copy=False),
        gt_mask=mask.astype(np.uint8, copy=False),
        label=meta["label"],
        case_id=meta["case_id"],
        split=meta.get("split", "train"),
    )
    record.validate()
    return record


def write_manifest(path: Path | str, rows: list[dict], columns: list[str]) -> None:
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(str(row[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path | str) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    columns = lines[0].split("\t")
    rows = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != len(columns):
            raise FormatError(f"{path}:{i}: expected {len(columns)} fields, got {len(fields)}")
        rows.append(dict(zip(columns, fields)))
    return rows


def save_dataset(
    records: list[CaseRecord], out_dir: Path | str, landmarks: dict[str, tuple] | None = None
) -> Path:
    """Write one directory per case plus a manifest.

    ``landmarks`` optionally adds a ``landmark_zyx`` column (as ``z,y,x``) so
    the output can feed the preprocessing pipeline directly.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    columns = ["case_id", "label", "split", "volume_path", "mask_path"]
    if landmarks is not None:
        columns.append("landmark_zyx")
    for rec in records:
        write_case(rec, out_dir / rec.case_id)
        row = {
            "case_id": rec.case_id,
            "label": rec.label,
            "split": rec.split,
            "volume_path": f"{rec.case_id}/{VOLUME_FILE}",
            "mask_path": f"{rec.case_id}/{MASK_FILE}",
        }
        if landmarks is not None:
            row["landmark_zyx"] = ",".join(str(int(v)) for v in landmarks[rec.case_id])
        rows.append(row)
    manifest = out_dir / MANIFEST_FILE
    write_manifest(manifest, rows, columns)
    return manifest


def load_dataset(data_dir: Path | str) -> list[CaseRecord]:
    """Load every case listed in ``<data_dir>/manifest.tsv``."""
    data_dir = Path(data_dir)
    records = []
    for row in read_manifest(data_dir / MANIFEST_FILE):
        rec = read_case(data_dir / row["case_id"])
        if rec.case_id != row["case_id"]:
            raise DataError(f"case_id mismatch: manifest {row['case_id']}, meta {rec.case_id}")
        records.append(rec)
    return records


def _parse_landmark(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise FormatError(f"landmark_zyx must be 'z,y,x', got {text!r}")
    return tuple(int(round(float(p))) for p in parts)  # type: ignore[return-value]


def run_pipeline(manifest_path: Path | str, cfg: PreprocessConfig, out_dir: Path | str) -> Path:
    """Preprocess every manifest row and write a train-ready dataset.

    Input manifest columns: case_id, volume_path, mask_path, label,
    landmark_zyx; an optional split column is carried through.
    """
    cfg.validate()
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    records = []
    for row in read_manifest(manifest_path):
        raw_vol = read_array(base / row["volume_path"])
        raw_mask = read_array(base / row["mask_path"]) if row.get("mask_path") else None
        if "landmark_zyx" not in row:
            raise FormatError(
                f"{manifest_path}: row {row.get('case_id', '?')} lacks landmark_zyx"
            )
        landmark = _parse_landmark(row["landmark_zyx"])
        vol, mask = preprocess_case(raw_vol, raw_mask, landmark, cfg)
        rec = CaseRecord(
            volume=vol,
            gt_mask=mask,
            label=row["label"],
            case_id=row["case_id"],
            split=row.get("split", "train"),
        )
        rec.validate()
        records.append(rec)
    return save_dataset(records, out_dir)

import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_phantom_spec
from dseg.errors import DataError, FormatError, ValidationError
from dseg.phantom import CaseRecord, PhantomSpec, generate_dataset
from dseg.preprocess import (
    ARRAY_MAGIC,
    MANIFEST_FILE,
    PreprocessConfig,
    clip_normalize,
    crop_at_landmark,
    load_dataset,
    preprocess_case,
    read_array,
    read_case,
    read_manifest,
    read_named_arrays,
    resize,
    run_pipeline,
    save_dataset,
    write_array,
    write_case,
    write_manifest,
    write_named_arrays,
)

DTYPES = (np.float32, np.float64, np.uint8, np.int64)


class TestArrayContainer:
    @pytest.mark.parametrize("dtype", DTYPES)
    def test_round_trip_bit_exact(self, tmp_path, dtype):
        rng = np.random.default_rng(0)
        if np.issubdtype(dtype, np.floating):
            arr = rng.standard_normal((3, 4, 5)).astype(dtype)
        else:
            arr = rng.integers(0, 200, size=(3, 4, 5)).astype(dtype)
        write_array(tmp_path / "a.dseg", arr)
        back = read_array(tmp_path / "a.dseg")
        assert back.dtype == arr.dtype
        assert np.array_equal(back, arr)
        assert back.tobytes() == arr.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(
        shape=st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)),
        dtype=st.sampled_from(DTYPES),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_round_trip_property(self, shape, dtype, seed):
        rng = np.random.default_rng(seed)
        arr = (rng.standard_normal(shape) * 10).astype(dtype)
        with tempfile.TemporaryDirectory() as d:
            path = Path(d) / "a.dseg"
            write_array(path, arr)
            assert np.array_equal(read_array(path), arr)

    def test_non_3d_rejected(self, tmp_path):
        with pytest.raises(DataError):
            write_array(tmp_path / "a.dseg", np.zeros((2, 2)))

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "a.dseg"
        write_array(p, np.zeros((2, 2, 2), dtype=np.float32))
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_array(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "a.dseg"
        write_array(p, np.zeros((2, 2, 2), dtype=np.float32))
        p.write_bytes(p.read_bytes()[:-3])
        with pytest.raises(FormatError):
            read_array(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "a.dseg"
        write_array(p, np.zeros((2, 2, 2), dtype=np.float32))
        p.write_bytes(p.read_bytes() + b"x")
        with pytest.raises(FormatError):
            read_array(p)

    def test_unsupported_version(self, tmp_path):
        p = tmp_path / "a.dseg"
        write_array(p, np.zeros((2, 2, 2), dtype=np.float32))
        raw = bytearray(p.read_bytes())
        raw[4:6] = struct.pack("<H", 9)
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_array(p)

    def test_unknown_dtype_code(self, tmp_path):
        p = tmp_path / "a.dseg"
        write_array(p, np.zeros((2, 2, 2), dtype=np.float32))
        raw = bytearray(p.read_bytes())
        raw[6] = 99
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            read_array(p)

    def test_magic_is_dseg(self, tmp_path):
        p = tmp_path / "a.dseg"
        write_array(p, np.zeros((2, 2, 2), dtype=np.float32))
        assert p.read_bytes()[:4] == ARRAY_MAGIC == b"DSEG"


class TestNamedContainer:
    def test_round_trip_with_scalars(self, tmp_path):
        arrays = {
            "enc.w": np.arange(24, dtype=np.float32).reshape(2, 3, 4),
            "enc.b": np.zeros(3, dtype=np.float64),
            "meta.step": np.array(5, dtype=np.int64),
            "bytes": np.frombuffer(b"hello", dtype=np.uint8),
        }
        p = tmp_path / "c.ckpt"
        write_named_arrays(p, arrays)
        back = read_named_arrays(p)
        assert list(back.keys()) == list(arrays.keys())
        for k in arrays:
            assert back[k].dtype == arrays[k].dtype
            assert back[k].shape == arrays[k].shape
            assert np.array_equal(back[k], arrays[k])

    def test_trailing_bytes_rejected(self, tmp_path):
        p = tmp_path / "c.ckpt"
        write_named_arrays(p, {"a": np.zeros(2, dtype=np.float32)})
        p.write_bytes(p.read_bytes() + b"\0")
        with pytest.raises(FormatError):
            read_named_arrays(p)


class TestClipNormalize:
    def test_hand_values(self):
        out = clip_normalize(np.array([[[30.0, 7.5, -2.0]]]), (0.0, 15.0))
        assert out.dtype == np.float32
        assert np.allclose(out.ravel(), [1.0, 0.5, 0.0])

    def test_idempotent_on_unit_interval(self):
        rng = np.random.default_rng(1)
        x = rng.random((4, 4, 4)).astype(np.float32)
        once = clip_normalize(x, (0.0, 1.0))
        twice = clip_normalize(once, (0.0, 1.0))
        assert np.array_equal(once, twice)
        assert np.array_equal(once, x)

    def test_nan_rejected(self):
        x = np.zeros((2, 2, 2))
        x[0, 0, 0] = np.nan
        with pytest.raises(DataError):
            clip_normalize(x, (0.0, 15.0))

    def test_bad_interval(self):
        with pytest.raises(ValidationError):
            clip_normalize(np.zeros((2, 2, 2)), (5.0, 5.0))


class TestCrop:
    def test_interior_crop_matches_slicing(self):
        vol = np.arange(10 * 10 * 10, dtype=np.float32).reshape(10, 10, 10)
        out = crop_at_landmark(vol, (5, 5, 5), 4)
        assert np.array_equal(out, vol[3:7, 3:7, 3:7])

    def test_border_crop_zero_padded(self):
        vol = np.ones((6, 6, 6), dtype=np.float32)
        out = crop_at_landmark(vol, (0, 0, 0), 4)
        # landmark at the corner: half the window hangs outside
        assert out.shape == (4, 4, 4)
        assert np.array_equal(out[2:, 2:, 2:], np.ones((2, 2, 2), dtype=np.float32))
        assert float(out[:2].sum()) == 0.0

    def test_crop_of_padded_equals_original_crop(self):
        rng = np.random.default_rng(3)
        vol = rng.random((8, 8, 8)).astype(np.float32)
        k = 3
        padded = np.pad(vol, k)
        a = crop_at_landmark(vol, (4, 4, 4), 6)
        b = crop_at_landmark(padded, (4 + k, 4 + k, 4 + k), 6)
        assert np.array_equal(a, b)

    def test_fully_outside_is_zero(self):
        vol = np.ones((4, 4, 4), dtype=np.float32)
        out = crop_at_landmark(vol, (100, 100, 100), 4)
        assert float(out.sum()) == 0.0


class TestResize:
    def test_hand_frozen_trilinear_2_to_4(self):
        # half-pixel mapping: out i reads src (i+0.5)/2-0.5, so the 1D
        # weight profile for the corner value is [1, 0.75, 0.25, 0]
        vol = np.zeros((2, 2, 2), dtype=np.float32)
        vol[0, 0, 0] = 1.0
        out = resize(vol, 4, mode="linear")
        f = np.array([1.0, 0.75, 0.25, 0.0])
        expected = f[:, None, None] * f[None, :, None] * f[None, None, :]
        assert np.allclose(out, expected, atol=1e-6)
        assert abs(float(out[1, 1, 0]) - 0.5625) < 1e-6
        assert abs(float(out[1, 1, 1]) - 0.421875) < 1e-6

    def test_nearest_preserves_binarity_and_dtype(self):
        mask = np.zeros((2, 2, 2), dtype=np.uint8)
        mask[0, 0, 0] = 1
        out = resize(mask, 4, mode="nearest")
        assert out.dtype == np.uint8
        assert set(np.unique(out)) == {0, 1}
        assert np.array_equal(out[:2, :2, :2], np.ones((2, 2, 2), dtype=np.uint8))

    def test_constant_maps_to_constant(self):
        vol = np.full((4, 4, 4), 0.37, dtype=np.float32)
        out = resize(vol, 7, mode="linear")
        assert np.allclose(out, 0.37, atol=1e-6)

    def test_bounds_preserved(self):
        rng = np.random.default_rng(2)
        vol = rng.random((5, 5, 5)).astype(np.float32)
        out = resize(vol, 9, mode="linear")
        assert out.min() >= vol.min() - 1e-6
        assert out.max() <= vol.max() + 1e-6

    def test_downsize_then_upsize_round_shape(self):
        vol = np.zeros((8, 8, 8), dtype=np.float32)
        assert resize(vol, 4).shape == (4, 4, 4)
        assert resize(vol, 8).shape == (8, 8, 8)

    def test_bad_mode(self):
        with pytest.raises(ValidationError):
            resize(np.zeros((2, 2, 2)), 4, mode="cubic")


class TestPreprocessCase:
    def test_shapes_and_binarity(self):
        rng = np.random.default_rng(4)
        raw = (rng.random((40, 40, 40)) * 20).astype(np.float32)
        mask = (rng.random((40, 40, 40)) > 0.9).astype(np.uint8)
        cfg = PreprocessConfig(suv_clip=(0.0, 15.0), crop_size=32, out_size=16)
        vol, out_mask = preprocess_case(raw, mask, (20, 20, 20), cfg)
        assert vol.shape == out_mask.shape == (16, 16, 16)
        assert vol.dtype == np.float32 and out_mask.dtype == np.uint8
        assert 0.0 <= vol.min() and vol.max() <= 1.0
        assert set(np.unique(out_mask)).issubset({0, 1})

    def test_mask_shape_mismatch_is_data_error(self):
        cfg = PreprocessConfig(crop_size=8, out_size=8)
        raw = np.zeros((16, 16, 16), dtype=np.float32)
        bad = np.zeros((8, 8, 8), dtype=np.uint8)
        with pytest.raises(DataError):
            preprocess_case(raw, bad, (8, 8, 8), cfg)

    def test_missing_mask_means_healthy_empty(self):
        cfg = PreprocessConfig(crop_size=8, out_size=4)
        raw = np.ones((16, 16, 16), dtype=np.float32)
        _, mask = preprocess_case(raw, None, (8, 8, 8), cfg)
        assert mask.shape == (4, 4, 4) and mask.sum() == 0

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            PreprocessConfig(crop_size=2, out_size=4).validate()


class TestCaseIO:
    def test_case_round_trip(self, tmp_path, tiny_dataset):
        rec = tiny_dataset[0]
        write_case(rec, tmp_path / rec.case_id)
        back = read_case(tmp_path / rec.case_id)
        assert back.case_id == rec.case_id
        assert back.label == rec.label and back.split == rec.split
        assert np.array_equal(back.volume, rec.volume)
        assert np.array_equal(back.gt_mask, rec.gt_mask)

    def test_write_shape_mismatch_is_data_error(self, tmp_path):
        rec = CaseRecord(
            volume=np.zeros((4, 4, 4), dtype=np.float32),
            gt_mask=np.zeros((2, 2, 2), dtype=np.uint8),
            label="healthy",
            case_id="bad",
        )
        with pytest.raises(DataError):
            write_case(rec, tmp_path / "bad")

    def test_corrupt_meta_is_format_error(self, tmp_path, tiny_dataset):
        rec = tiny_dataset[0]
        case_dir = write_case(rec, tmp_path / rec.case_id)
        (case_dir / "meta.json").write_text("{not json")
        with pytest.raises(FormatError):
            read_case(case_dir)

    def test_dataset_round_trip(self, tmp_path, tiny_dataset):
        save_dataset(tiny_dataset, tmp_path)
        back = load_dataset(tmp_path)
        assert [c.case_id for c in back] == [c.case_id for c in tiny_dataset]
        assert [c.split for c in back] == [c.split for c in tiny_dataset]
        for a, b in zip(back, tiny_dataset):
            assert np.array_equal(a.volume, b.volume)

    def test_manifest_field_count_checked(self, tmp_path):
        p = tmp_path / MANIFEST_FILE
        write_manifest(p, [{"a": 1, "b": 2}], ["a", "b"])
        p.write_text(p.read_text() + "only_one_field\n")
        with pytest.raises(FormatError):
            read_manifest(p)


class TestPipeline:
    def test_run_pipeline_end_to_end(self, tmp_path):
        # raw 40-cube cases in a fake SUV range, full-volume crop, 16-out
        raw_dir = tmp_path / "raw"
        raw_dir.mkdir()
        spec = PhantomSpec(grid_size=40, blob_radius_range=(2.5, 3.5), seed=8)
        cases = generate_dataset(spec, 2, 2, (0.5, 0.25, 0.25))
        rows = []
        for rec in cases:
            scaled = CaseRecord(
                volume=(rec.volume * 15.0).astype(np.float32),
                gt_mask=rec.gt_mask,
                label=rec.label,
                case_id=rec.case_id,
                split=rec.split,
            )
            write_array(raw_dir / f"{rec.case_id}_vol.dseg", scaled.volume)
            write_array(raw_dir / f"{rec.case_id}_mask.dseg", rec.gt_mask)
            rows.append(
                {
                    "case_id": rec.case_id,
                    "volume_path": f"{rec.case_id}_vol.dseg",
                    "mask_path": f"{rec.case_id}_mask.dseg",
                    "label": rec.label,
                    "landmark_zyx": "20,20,20",
                    "split": rec.split,
                }
            )
        manifest = raw_dir / "raw_manifest.tsv"
        write_manifest(
            manifest, rows,
            ["case_id", "volume_path", "mask_path", "label", "landmark_zyx", "split"],
        )
        out_dir = tmp_path / "prep"
        cfg = PreprocessConfig(suv_clip=(0.0, 15.0), crop_size=40, out_size=16)
        out_manifest = run_pipeline(manifest, cfg, out_dir)
        assert out_manifest.exists()
        back = load_dataset(out_dir)
        assert len(back) == 4
        for rec in back:
            assert rec.volume.shape == (16, 16, 16)
            rec.validate()
        assert [c.split for c in back] == [c.split for c in cases]

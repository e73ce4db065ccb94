import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kpreid.coords import cell_to_pixel, pixel_to_cell
from kpreid.errors import (
    BoundsError,
    CategoryError,
    CheckpointIncompatibleError,
    DuplicateImageError,
    FormatError,
    MissingFeatureError,
    SplitContaminationError,
    ValidationError,
)
from kpreid.featureio import (
    DatasetIndex,
    FeatureMap,
    ImageRecord,
    Keypoint,
    KeypointSet,
    TrainingState,
    decode_checkpoint,
    decode_feature_map,
    encode_checkpoint,
    encode_feature_map,
    load_checkpoint,
    load_keypoints,
    load_manifest,
    read_feature_map,
    save_checkpoint,
    save_keypoints,
    save_manifest,
    write_feature_map,
)


def rec(image_id, identity="a", split="train", w=32, h=32):
    return ImageRecord(image_id, identity, split, w, h, f"features/{image_id}.fmap")


def random_map(rng, max_extent=6):
    shape = tuple(int(v) for v in rng.integers(1, max_extent + 1, size=3))
    kind = rng.integers(3)
    if kind == 0:
        vals = rng.standard_normal(shape)
    elif kind == 1:
        vals = rng.uniform(-3e38, 3e38, size=shape)
    else:
        # arbitrary finite bit patterns, including subnormals and -0.0
        bits = rng.integers(0, 2 ** 32, size=shape, dtype=np.uint64).astype(np.uint32)
        vals = bits.view(np.float32)
        vals = np.where(np.isfinite(vals), vals, np.float32(0.5))
    return np.asarray(vals, dtype=np.float32)


class TestFeatureMap:
    def test_fuzz_round_trip_1000(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            vals = random_map(rng)
            back = decode_feature_map(encode_feature_map(FeatureMap(vals))).values
            assert back.shape == vals.shape
            assert back.tobytes() == vals.tobytes()

    def test_file_round_trip(self, tmp_path):
        vals = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_feature_map(tmp_path / "x.fmap", FeatureMap(vals))
        assert read_feature_map(tmp_path / "x.fmap").values.tobytes() == vals.tobytes()
        assert not list(tmp_path.glob("*.tmp*"))

    def test_layout(self):
        raw = encode_feature_map(FeatureMap(np.array([[[1.0, 2.0]]], dtype=np.float32)))
        assert raw[:4] == b"FMAP"
        assert struct.unpack_from("<4I", raw, 4) == (1, 1, 1, 2)
        assert raw[20:] == struct.pack("<2f", 1.0, 2.0)

    def test_bad_magic(self):
        raw = bytearray(encode_feature_map(FeatureMap(np.ones((1, 1, 1), np.float32))))
        raw[:4] = b"NOPE"
        with pytest.raises(FormatError) as exc:
            decode_feature_map(bytes(raw))
        assert exc.value.offset == 0

    def test_bad_version(self):
        raw = bytearray(encode_feature_map(FeatureMap(np.ones((1, 1, 1), np.float32))))
        raw[4:8] = struct.pack("<I", 9)
        with pytest.raises(FormatError) as exc:
            decode_feature_map(bytes(raw))
        assert exc.value.offset == 4

    def test_truncated_payload(self):
        raw = encode_feature_map(FeatureMap(np.ones((2, 2, 2), np.float32)))
        with pytest.raises(FormatError, match="truncated") as exc:
            decode_feature_map(raw[:-3])
        assert exc.value.offset == 20 + 4 * 7

    def test_non_finite_rejected(self):
        with pytest.raises(ValidationError):
            FeatureMap(np.array([[[np.nan]]], dtype=np.float32))


class TestManifest:
    def test_round_trip(self, tmp_path):
        idx = DatasetIndex(8, ["kp0"], [rec("a0"), rec("b0", "b", "test")])
        save_manifest(tmp_path / "manifest.json", idx)
        back = load_manifest(tmp_path / "manifest.json")
        assert back.images == idx.images and back.patch_size == 8
        assert back.root == tmp_path

    def test_empty(self):
        with pytest.raises(ValidationError, match="empty"):
            DatasetIndex(8, [], [])

    def test_duplicate(self):
        with pytest.raises(DuplicateImageError):
            DatasetIndex(8, [], [rec("a0"), rec("a0")])

    def test_split_contamination(self):
        with pytest.raises(SplitContaminationError):
            DatasetIndex(8, [], [rec("a0"), rec("a1", split="test")])

    def test_size_must_be_patch_multiple(self):
        with pytest.raises(ValidationError, match="multiple"):
            DatasetIndex(8, [], [rec("a0", w=30)])

    def test_missing_feature_is_file_not_found(self, tmp_path):
        idx = DatasetIndex(8, [], [rec("a0")], tmp_path)
        with pytest.raises(FileNotFoundError):
            idx.load_features(idx.images[0])
        assert issubclass(MissingFeatureError, FileNotFoundError)

    def test_malformed_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{not json")
        with pytest.raises(ValidationError):
            load_manifest(tmp_path / "m.json")
        (tmp_path / "m.json").write_text(json.dumps({"patch_size": 8}))
        with pytest.raises(ValidationError):
            load_manifest(tmp_path / "m.json")


class TestKeypoints:
    def test_round_trip(self, tmp_path):
        ks = KeypointSet("a0", [Keypoint(3, 4, 0), Keypoint(31, 0, 1)])
        save_keypoints(tmp_path / "k.json", ks)
        assert load_keypoints(tmp_path / "k.json") == ks

    def test_bounds(self):
        with pytest.raises(BoundsError):
            KeypointSet("a0", [Keypoint(32, 0, 0)]).validate(rec("a0"), 1)

    def test_category(self):
        with pytest.raises(CategoryError):
            KeypointSet("a0", [Keypoint(0, 0, 2)]).validate(rec("a0"), 2)


class TestCoords:
    def test_cell_center(self):
        assert cell_to_pixel(7, 7, 64, 64, 8, 8) == (60, 60)
        assert cell_to_pixel(0, 0, 64, 64, 8, 8) == (4, 4)

    @given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 8), st.data())
    @settings(max_examples=60, deadline=None)
    def test_center_maps_back(self, gw, gh, scale, data):
        # holds whenever the image is an integer multiple of the grid
        w, h = gw * scale, gh * scale
        x_f, y_f = data.draw(st.integers(0, gw - 1)), data.draw(st.integers(0, gh - 1))
        px, py = cell_to_pixel(x_f, y_f, w, h, gw, gh)
        assert pixel_to_cell(px, py, w, h, gw, gh) == (x_f, y_f)

    def test_out_of_bounds(self):
        with pytest.raises(BoundsError):
            pixel_to_cell(64, 0, 64, 64, 8, 8)
        with pytest.raises(BoundsError):
            cell_to_pixel(0, 8, 64, 64, 8, 8)


def random_params(rng):
    out = {}
    for i in range(int(rng.integers(0, 5))):
        rank = int(rng.integers(0, 4))
        shape = tuple(int(v) for v in rng.integers(0, 5, size=rank))
        out[f"t{i}.{'w' * int(rng.integers(1, 4))}"] = rng.standard_normal(shape).astype(np.float32)
    return out


class TestCheckpoint:
    def test_fuzz_round_trip_1000(self):
        rng = np.random.default_rng(77)
        for _ in range(1000):
            params = random_params(rng)
            state = TrainingState(int(rng.integers(0, 2 ** 63)), int(rng.integers(0, 2 ** 63)))
            raw = encode_checkpoint(params, state)
            back, st_back = decode_checkpoint(raw)
            assert st_back == state
            assert list(back) == list(params)
            for k in params:
                assert back[k].shape == params[k].shape
                assert back[k].tobytes() == params[k].tobytes()
            assert encode_checkpoint(back, st_back) == raw

    def test_incompatible_lists_offenders(self, tmp_path):
        save_checkpoint(tmp_path / "c.ckpt", {"a": np.zeros((2, 3), np.float32)}, TrainingState())
        with pytest.raises(CheckpointIncompatibleError, match=r"a: stored \(2, 3\), expected \(3, 3\).*b: missing"):
            load_checkpoint(tmp_path / "c.ckpt", {"a": (3, 3), "b": (1,)})

    def test_truncation_reports_offset(self):
        raw = encode_checkpoint({"w": np.ones(4, np.float32)}, TrainingState(1, 2))
        with pytest.raises(FormatError) as exc:
            decode_checkpoint(raw[:-1])
        assert exc.value.offset is not None

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"XXXX" + bytes(24))

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kpreid.errors import GenerationError
from kpreid.featureio import load_keypoints, load_manifest, read_feature_map
from kpreid.propagation import normalize_features, propagate
from kpreid.synthetic import (
    Deformation,
    SynthGroundTruth,
    _distinct_combinations,
    generate_synthetic,
    min_pairwise_angle,
)


def recovered(ds):
    res = propagate(ds.reference.image_id, ds.reference, ds.index, ds.features)
    return all([(e.cell[0], e.cell[1], e.category) for e in v] == ds.truth.cells[k] for k, v in res.items())


def test_shapes_and_split():
    ds = generate_synthetic(0)
    assert len(ds.index.images) == 200
    assert ds.features["id00_000"].values.shape == (8, 4, 4)
    test_ids = {r.identity for r in ds.index.split("test")}
    assert len(test_ids) == 2
    assert ds.index.categories == ["kp0", "kp1", "kp2"]


def test_same_seed_same_bytes():
    a, b = generate_synthetic(3), generate_synthetic(3)
    for k in a.features:
        assert a.features[k].values.tobytes() == b.features[k].values.tobytes()
    assert a.truth.cells == b.truth.cells


def test_different_seed_differs():
    a, b = generate_synthetic(3), generate_synthetic(4)
    assert a.features["id00_000"].values.tobytes() != b.features["id00_000"].values.tobytes()


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("kind", ["flip", "translation", "permutation"])
def test_each_deformation_recovered(seed, kind):
    ds = generate_synthetic(seed, n_identities=4, images_per_identity=6, deformation_kinds=(kind,))
    assert recovered(ds)


@pytest.mark.parametrize("extra", [
    {"decoys_per_keypoint": 2, "decoy_angle": 0.35},
    {"decoys_per_keypoint": 2, "decoy_angle": 0.35, "code_vocab": None},
    {"channels": 16, "grid_height": 8, "grid_width": 8, "n_keypoints": 6},
])
def test_variants_recovered(extra):
    assert recovered(generate_synthetic(11, n_identities=4, images_per_identity=6, **extra))


def test_flip_mirrors_columns():
    # width-8 grid: column 2 lands on column 8 - 1 - 2 = 5, rows unchanged
    assert Deformation("flip").apply_cell(2, 3, 4, 8) == (5, 3)


@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
@settings(max_examples=50, deadline=None)
def test_identity_codes_differ_in_two_places(seed, n):
    rows = _distinct_combinations(np.random.default_rng(seed), n, 3, 4, min_distance=2)
    assert rows.shape == (n, 3) and rows.min() >= 0 and rows.max() < 4
    for i in range(n):
        for j in range(i):
            assert np.count_nonzero(rows[i] != rows[j]) >= 2


def test_inputs_view_is_residual():
    ds = generate_synthetic(3, n_identities=3, images_per_identity=3)
    for image_id, d in ds.truth.deformations.items():
        moved = d.apply_map(ds.template)
        want = (ds.features[image_id].values.astype(np.float64) - moved) / ds.truth.noise_bound
        np.testing.assert_allclose(ds.inputs[image_id].values, want, atol=1e-5)
        assert np.abs(ds.inputs[image_id].values).max() <= 1 + 1e-4


def test_vocab_too_small_rejected():
    with pytest.raises(GenerationError):
        generate_synthetic(0, n_identities=10, n_keypoints=2, code_vocab=2)


def test_perturbations_within_bound():
    ds = generate_synthetic(2, noise=0.3, signal=0.6, clutter=0.6)
    tmpl = normalize_features(ds.template)
    for image_id, d in ds.truth.deformations.items():
        undone = np.empty_like(ds.template)
        vals = ds.features[image_id].values.astype(np.float64)
        h, w = ds.truth.grid_height, ds.truth.grid_width
        for y in range(h):
            for x in range(w):
                tx, ty = d.apply_cell(x, y, h, w)
                undone[:, y, x] = vals[:, ty, tx]
        dev = np.linalg.norm(undone - tmpl, axis=0)
        assert dev.max() < ds.truth.noise_bound * (1 + 1e-5)


def test_replay_matches_recorded():
    ds = generate_synthetic(5)
    for image_id in ds.truth.cells:
        assert ds.truth.replay(image_id) == ds.truth.cells[image_id]


def test_deformation_cell_and_map_agree():
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((3, 4, 5))
    for d in [Deformation("flip"), Deformation("translation", dx=2, dy=3),
              Deformation("permutation", perm=rng.permutation(20).tolist()), Deformation("identity")]:
        moved = d.apply_map(vals)
        for y in range(4):
            for x in range(5):
                tx, ty = d.apply_cell(x, y, 4, 5)
                np.testing.assert_array_equal(moved[:, ty, tx], vals[:, y, x])
        assert Deformation.from_json(json.loads(json.dumps(d.to_json()))) == d


def test_write_layout(tmp_path):
    ds = generate_synthetic(1, n_identities=3, images_per_identity=3)
    ds.write(tmp_path)
    idx = load_manifest(tmp_path / "manifest.json")
    assert [r.image_id for r in idx.images] == [r.image_id for r in ds.index.images]
    rec = idx.images[4]
    assert read_feature_map(idx.feature_file(rec)).values.tobytes() == ds.features[rec.image_id].values.tobytes()
    assert load_keypoints(tmp_path / "ref_keypoints.json") == ds.reference
    truth = SynthGroundTruth.from_json(json.loads((tmp_path / "ground_truth.json").read_text()))
    assert truth.cells == {k: [tuple(c) for c in v] for k, v in ds.truth.cells.items()}


def test_min_pairwise_angle():
    v = np.array([[1.0, 0.0], [0.0, 1.0], [math.sqrt(0.5), math.sqrt(0.5)]])
    assert min_pairwise_angle(v) == pytest.approx(math.pi / 4)


def test_zero_keypoints_rejected():
    with pytest.raises(GenerationError, match="keypoints must be >= 1"):
        generate_synthetic(0, n_keypoints=0)


def test_budget_overflow_rejected():
    with pytest.raises(GenerationError, match="noise bound nonpositive"):
        generate_synthetic(0, signal=0.8, noise=0.3)


def test_inseparable_template_rejected():
    # 16 unit vectors in one channel collapse onto +-1
    with pytest.raises(GenerationError, match="noise bound nonpositive"):
        generate_synthetic(0, channels=1)

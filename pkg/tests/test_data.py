"""Dataset model tests: tree indexing, window sampling against brute-force
enumeration, payload round-trips, and manifest validation."""

import json
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jm3d import data
from jm3d.errors import (
    ContractError,
    InputError,
    LabelError,
    ManifestError,
    SamplingError,
    ShapeError,
)


def feature_view(angle, kind="rgb", dim=4, fill=0.5):
    return data.ViewRecord(angle, kind, feature=np.full(dim, fill))


def picked_indices(views, got):
    """Map returned records back to candidate positions (records compare by identity)."""
    by_id = {id(vw): i for i, vw in enumerate(views)}
    return frozenset(by_id[id(vw)] for vw in got)


# ---------------------------------------------------------------------------
# angles


def test_angle_bucket_values():
    assert data.angle_bucket(0) == 0
    assert data.angle_bucket(120) == 10
    assert data.angle_bucket(348) == 29


@pytest.mark.parametrize("bad", [13, -12, 360, 6, 349])
def test_angle_bucket_rejects(bad):
    with pytest.raises(ContractError):
        data.angle_bucket(bad)


def test_circular_distance():
    assert data.circular_distance(348, 24) == 36.0
    assert data.circular_distance(0, 72) == 72.0
    assert data.circular_distance(0, 180) == 180.0
    assert data.circular_distance(350, 10) == 20.0
    assert data.circular_distance(90, 90) == 0.0


# ---------------------------------------------------------------------------
# category tree


def make_tree():
    return data.CategoryTree.from_pairs([
        ("bed", "bunk"), ("bed", None), ("bottle", None), ("airplane", "jet"),
    ])


def test_tree_structure():
    tree = make_tree()
    assert tree.parents == ("airplane", "bed", "bottle")
    assert tree.children["bed"] == ("bed", "bunk")  # fallback leaf present
    assert tree.children["bottle"] == ("bottle",)
    assert tree.n_leaves == 5
    assert sorted(tree.leaf_index.values()) == list(range(5))
    assert len(tree.leaf_parent) == 5


def test_tree_round_trip_stable():
    tree = make_tree()
    again = data.CategoryTree.from_pairs(tree.to_pairs())
    assert again == tree


def test_tree_rejects_ambiguous_sub():
    with pytest.raises(LabelError):
        data.CategoryTree.from_pairs([("chair", "classic"), ("table", "classic")])
    with pytest.raises(LabelError):
        # sub name colliding with another parent's fallback leaf
        data.CategoryTree.from_pairs([("a", "b"), ("b", None)])


def sample_with(parent, sub):
    cloud = data.PointCloud.from_raw([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    return data.TripletSample("s0", cloud, (feature_view(0),), parent, sub)


def test_resolve_label_paths():
    tree = make_tree()
    leaf = tree.leaf_index
    assert data.resolve_label(sample_with("bed", "bunk"), tree) == (1, leaf[("bed", "bunk")])
    assert data.resolve_label(sample_with("bottle", None), tree) == (2, leaf[("bottle", "bottle")])
    # unregistered sub falls back to the parent leaf
    assert data.resolve_label(sample_with("bed", "waterbed"), tree) == (1, leaf[("bed", "bed")])
    with pytest.raises(LabelError):
        data.resolve_label(sample_with("unknownthing", "x"), tree)


# ---------------------------------------------------------------------------
# window sampling


def brute_feasible(angles, v, omega):
    return [c for c in combinations(range(len(angles)), v)
            if all(data.circular_distance(angles[i], angles[j]) < omega
                   for i, j in combinations(c, 2))]


def test_window_grid_pairs_match_enumeration():
    views = [feature_view(a) for a in range(0, 360, 12)]
    rng = np.random.default_rng(0)
    feasible = {frozenset(c) for c in brute_feasible([vw.angle_deg for vw in views], 2, 60.0)}
    assert frozenset({29, 2}) in feasible      # angles 348 and 24: distance 36
    assert frozenset({0, 6}) not in feasible   # angles 0 and 72
    seen = set()
    for _ in range(3000):
        got = data.sample_within_window(views, 2, 60.0, rng)
        pair = picked_indices(views, got)
        assert pair in feasible
        seen.add(pair)
    assert seen == feasible  # 120 pairs, 3000 draws: all should appear


def test_window_uniform_over_subsets():
    views = [feature_view(0, "rgb"), feature_view(0, "depth"), feature_view(12), feature_view(24)]
    feasible = brute_feasible([vw.angle_deg for vw in views], 2, 24.0)
    assert len(feasible) == 4
    rng = np.random.default_rng(42)
    counts = {frozenset(c): 0 for c in feasible}
    n = 20000
    for _ in range(n):
        got = data.sample_within_window(views, 2, 24.0, rng)
        counts[picked_indices(views, got)] += 1
    for c in counts.values():
        assert abs(c - n / 4) < 350  # ~5.7 sigma for p=1/4


def test_window_single_view_vacuous():
    views = [feature_view(0), feature_view(180)]
    rng = np.random.default_rng(1)
    got = data.sample_within_window(views, 1, 0.0, rng)
    assert len(got) == 1 and got[0] in views


def test_window_infeasible_raises():
    rng = np.random.default_rng(2)
    views = [feature_view(0), feature_view(72)]
    with pytest.raises(SamplingError):
        data.sample_within_window(views, 2, 60.0, rng)
    with pytest.raises(SamplingError):
        data.sample_within_window(views, 3, 60.0, rng)  # v > candidates
    with pytest.raises(SamplingError):
        data.sample_within_window([feature_view(0), feature_view(0, "depth")], 2, 0.0, rng)
    with pytest.raises(ContractError):
        data.sample_within_window(views, 0, 60.0, rng)


def test_window_wide_omega_bands():
    rng = np.random.default_rng(3)
    spread = [feature_view(0), feature_view(120), feature_view(240)]
    # pairwise 120 < 130 is feasible even though no 130-degree arc covers all three
    got = data.sample_within_window(spread, 3, 130.0, rng)
    assert sorted(vw.angle_deg for vw in got) == [0, 120, 240]
    opposite = [feature_view(0), feature_view(180)]
    with pytest.raises(SamplingError):
        data.sample_within_window(opposite, 2, 180.0, rng)  # strict bound
    got = data.sample_within_window(opposite, 2, 181.0, rng)  # vacuous above 180
    assert len(got) == 2


def test_window_deterministic_given_seed():
    views = [feature_view(a, k) for a in range(0, 360, 12) for k in ("rgb", "depth")]
    runs = []
    for _ in range(2):
        rng = np.random.default_rng(99)
        runs.append([tuple((vw.angle_deg, vw.kind) for vw in data.sample_within_window(views, 4, 60.0, rng))
                     for _ in range(50)])
    assert runs[0] == runs[1]


@settings(deadline=None, max_examples=80)
@given(st.data())
def test_window_counts_match_brute_force(data_strategy):
    grid = list(range(0, 360, 12))
    angles = data_strategy.draw(st.lists(st.sampled_from(grid), min_size=2, max_size=9))
    v = data_strategy.draw(st.integers(2, min(3, len(angles))))
    omega = data_strategy.draw(st.sampled_from([12.0, 36.0, 60.0, 90.0, 120.0]))
    views = [feature_view(a, "rgb" if i % 2 == 0 else "depth") for i, a in enumerate(angles)]
    feasible = brute_feasible(angles, v, omega)
    plan = data._window_plan(tuple(angles), v, omega)
    assert plan["total"] == len(feasible)
    rng = np.random.default_rng(7)
    if not feasible:
        with pytest.raises(SamplingError):
            data.sample_within_window(views, v, omega, rng)
        return
    allowed = {frozenset(c) for c in feasible}
    for _ in range(20):
        got = data.sample_within_window(views, v, omega, rng)
        assert len(got) == v
        idx = picked_indices(views, got)
        assert idx in allowed


# ---------------------------------------------------------------------------
# payload files


def test_cloud_file_round_trip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(17, 3))
    path = tmp_path / "c.bin"
    data.write_cloud_file(path, pts)
    back = data.read_cloud_file(path)
    np.testing.assert_array_equal(back, pts.astype(np.float32).astype(np.float64))


def test_feature_file_round_trip(tmp_path):
    rows = np.random.default_rng(1).normal(size=(5, 8))
    path = tmp_path / "f.bin"
    data.write_feature_file(path, rows)
    back = data.read_feature_file(path)
    assert back.shape == (5, 8)
    np.testing.assert_array_equal(back, rows.astype(np.float32).astype(np.float64))


def test_raster_file_round_trip(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
    path = tmp_path / "r.bin"
    data.write_raster_file(path, img)
    np.testing.assert_array_equal(data.read_raster_file(path), img)


def test_truncated_payloads_rejected(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"\x05\x00\x00\x00\x00")
    with pytest.raises(InputError):
        data.read_cloud_file(path)
    with pytest.raises(InputError):
        data.read_feature_file(path)
    with pytest.raises(InputError):
        data.read_raster_file(path)


# ---------------------------------------------------------------------------
# normalization, downsampling, split


def test_normalize_points_invariants():
    rng = np.random.default_rng(5)
    for _ in range(20):
        pts = rng.normal(3.0, 2.5, size=(64, 3))
        out = data.normalize_points(pts)
        assert np.abs(out.mean(axis=0)).max() < 1e-9
        assert abs(np.linalg.norm(out, axis=1).max() - 1.0) < 1e-9


def test_normalize_points_degenerate():
    out = data.normalize_points(np.full((4, 3), 2.7))
    np.testing.assert_array_equal(out, np.zeros((4, 3)))


def test_downsample_is_normalized_subset():
    rng = np.random.default_rng(11)
    cloud = data.PointCloud.from_raw(rng.normal(size=(64, 3)))
    out = data.downsample_points(cloud, 16, np.random.default_rng(4))
    # replay the draw: selection must be exactly the renormalized subset
    idx = np.random.default_rng(4).choice(64, size=16, replace=False)
    np.testing.assert_array_equal(out.points, data.normalize_points(cloud.points[np.asarray(idx, dtype=np.intp)]))


def test_downsample_full_size_is_permutation():
    rng = np.random.default_rng(12)
    cloud = data.PointCloud.from_raw(rng.normal(size=(10, 3)))
    out = data.downsample_points(cloud, 10, np.random.default_rng(0))
    a = np.sort(out.points.round(12), axis=0)
    b = np.sort(cloud.points.round(12), axis=0)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_downsample_too_small_rejected():
    cloud = data.PointCloud.from_raw([[1.0, 0, 0], [0, 1.0, 0]])
    with pytest.raises(ShapeError):
        data.downsample_points(cloud, 3, np.random.default_rng(0))


def test_stratified_split_partition():
    cloudpts = [[0.0, 0, 1], [0, 1.0, 0], [1.0, 0, 0]]
    samples = []
    for p in ("a", "b"):
        for s in ("x", "y"):
            for m in range(10):
                samples.append(data.TripletSample(
                    f"{p}{s}{m}", data.PointCloud.from_raw(cloudpts),
                    (feature_view(0),), p, f"{p}_{s}"))
    tree = data.CategoryTree.from_pairs((s.parent, s.sub) for s in samples)
    train, held = data.stratified_split(samples, tree, 0.2, np.random.default_rng(0))
    assert len(held) == 8 and len(train) == 32
    ids = {s.sample_id for s in train} | {s.sample_id for s in held}
    assert len(ids) == 40
    held_leaves = [data.resolve_label(s, tree)[1] for s in held]
    assert all(held_leaves.count(leaf) == 2 for leaf in set(held_leaves))


# ---------------------------------------------------------------------------
# manifest loading


def write_dataset(tmp_path, dim=4, n=3, break_angle=False):
    records = []
    rng = np.random.default_rng(0)
    for i in range(n):
        cloud_name = f"cloud_{i}.bin"
        data.write_cloud_file(tmp_path / cloud_name, rng.normal(size=(8, 3)))
        feat_name = f"feat_{i}.bin"
        data.write_feature_file(tmp_path / feat_name, rng.normal(size=(1, dim)))
        angle = 13 if (break_angle and i == 1) else 12
        records.append({
            "id": f"s{i}", "parent": "chair", "sub": "armchair" if i % 2 == 0 else None,
            "cloud_file": cloud_name,
            "views": [{"angle": 0, "kind": "rgb", "feature_file": feat_name},
                      {"angle": angle, "kind": "depth", "feature_file": feat_name}],
        })
    path = tmp_path / "manifest.jsonl"
    data.write_manifest(path, dim, records)
    return path


def test_load_manifest_well_formed(tmp_path):
    loaded = data.load_manifest(write_dataset(tmp_path))
    assert len(loaded.samples) == 3
    assert loaded.dim == 4
    assert loaded.tree.parents == ("chair",)
    assert set(loaded.tree.leaf_names) == {"chair", "armchair"}
    for s in loaded.samples:
        assert abs(np.linalg.norm(s.cloud.points, axis=1).max() - 1.0) < 1e-9
        assert len(s.views) == 2


def test_load_manifest_names_bad_angle(tmp_path):
    path = write_dataset(tmp_path, break_angle=True)
    with pytest.raises(ManifestError) as err:
        data.load_manifest(path)
    assert any("angle 13" in v for v in err.value.violations)


def test_load_manifest_collects_all_violations(tmp_path):
    path = write_dataset(tmp_path)
    lines = path.read_text().splitlines()
    head = json.loads(lines[0])
    rec1 = json.loads(lines[1])
    rec2 = json.loads(lines[2])
    rec1["views"][0]["kind"] = "sketch"
    rec2["cloud_file"] = "missing.bin"
    rec3 = json.loads(lines[3])
    rec3["id"] = rec1["id"] if rec1["id"] != rec3["id"] else "s0"
    path.write_text("\n".join([json.dumps(head), json.dumps(rec1), json.dumps(rec2), json.dumps(rec3)]) + "\n")
    with pytest.raises(ManifestError) as err:
        data.load_manifest(path)
    text = "\n".join(err.value.violations)
    assert len(err.value.violations) >= 3
    assert "sketch" in text and "missing.bin" in text and "duplicate" in text


def test_load_manifest_rejects_wrong_version(tmp_path):
    path = write_dataset(tmp_path)
    lines = path.read_text().splitlines()
    lines[0] = json.dumps({"version": "other-9", "dim": 4})
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError) as err:
        data.load_manifest(path)
    assert any("version" in v for v in err.value.violations)


def test_load_manifest_dim_mismatch(tmp_path):
    path = write_dataset(tmp_path, dim=4)
    lines = path.read_text().splitlines()
    lines[0] = json.dumps({"version": data.MANIFEST_VERSION, "dim": 5})
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError) as err:
        data.load_manifest(path)
    assert any("expected 1x5" in v for v in err.value.violations)


def test_load_manifest_raster_view(tmp_path):
    data.write_cloud_file(tmp_path / "c.bin", np.random.default_rng(0).normal(size=(8, 3)))
    data.write_raster_file(tmp_path / "r.bin", np.zeros((8, 8, 1), dtype=np.uint8))
    data.write_manifest(tmp_path / "m.jsonl", 4, [{
        "id": "s0", "parent": "chair", "sub": None, "cloud_file": "c.bin",
        "views": [{"angle": 24, "kind": "rgb", "image_file": "r.bin"}],
    }])
    loaded = data.load_manifest(tmp_path / "m.jsonl")
    assert loaded.samples[0].views[0].raster.shape == (8, 8, 1)


def test_view_record_validation():
    with pytest.raises(InputError):
        data.ViewRecord(0, "rgb")  # no payload
    with pytest.raises(InputError):
        data.ViewRecord(0, "rgb", feature=np.ones(4), raster=np.zeros((2, 2, 1), dtype=np.uint8))
    with pytest.raises(InputError):
        data.ViewRecord(0, "sketch", feature=np.ones(4))
    with pytest.raises(ContractError):
        data.ViewRecord(7, "rgb", feature=np.ones(4))

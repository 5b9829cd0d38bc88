import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lodcheck.dataset import (
    FIELDS,
    Grid,
    Manifest,
    PairArrays,
    Record,
    RenderSettings,
    build_binary_dataset,
    build_multiclass_dataset,
    fold_plan_from_manifest,
    load_sample,
    make_folds,
    transition_level,
)
from lodcheck.mesh import Mesh, target_vertex_count
from lodcheck.primitives import demo_assets, icosphere

SMALL = RenderSettings(resolution=32)


@pytest.fixture(scope="module")
def assets():
    return demo_assets(4)


@pytest.fixture(scope="module")
def binary(tmp_path_factory, assets):
    return build_binary_dataset(assets, tmp_path_factory.mktemp("bin"), grid=Grid.parse("2x3"), seed=5, settings=SMALL)


@pytest.fixture(scope="module")
def multiclass(tmp_path_factory, assets):
    return build_multiclass_dataset(assets[:2], tmp_path_factory.mktemp("mc"), grid=Grid.parse("2x2"), seed=5, settings=SMALL)


def test_grid_parse_and_defaults():
    g = Grid.parse("8x8")
    assert len(g) == 64
    assert g.yaws == tuple(float(y) for y in range(0, 360, 45))
    assert g.elevations == (-30.0, -15.0, 0.0, 10.0, 20.0, 30.0, 45.0, 60.0)
    cells = list(g.cells())
    assert [c[0] for c in cells] == list(range(64))
    assert {c[3] for c in cells} == {0, 1, 2, 3} and {c[4] for c in cells} == {0, 1, 2}
    for bad in ("8", "0x8", "8x0", "axb"):
        with pytest.raises(ValueError):
            Grid.parse(bad)


def test_binary_counts_and_balance(binary):
    assert len(binary) == 4 * 6 * 2
    labels = binary.labels()
    assert (labels == 0).sum() == (labels == 1).sum()
    assert binary.kind == "binary"


def test_one_asset_one_cell(tmp_path):
    m = build_binary_dataset([icosphere(2, name="ball")], tmp_path, grid=Grid.parse("1x1"), settings=SMALL)
    assert sorted(r.label for r in m.records) == [0, 1]


def test_binary_label_matches_candidate(binary):
    for r in binary.records:
        assert (r.label == 1) == (r.level > 0)
        assert (r.label == 0) == r.cand_path.endswith("_L0.ppm")


def test_transition_level_seeded_and_uniform():
    draws = [transition_level(0, "a", k) for k in range(6000)]
    assert draws == [transition_level(0, "a", k) for k in range(6000)]
    counts = np.bincount(draws, minlength=7)[1:]
    assert counts.min() > 850 and counts.max() < 1150
    assert transition_level(1, "a", 3) == transition_level(1, "a", 3)


def test_pair_alignment(binary):
    by_cell = {}
    for r in binary.records:
        by_cell.setdefault((r.asset, r.ref_path), []).append(r)
    for recs in by_cell.values():
        assert len({(r.yaw, r.elevation, r.light, r.background, r.zoom) for r in recs}) == 1


def test_manifest_fields(binary):
    with open(os.path.join(binary.root, "manifest.jsonl")) as fh:
        first = json.loads(fh.readline())
    assert set(FIELDS) <= set(first)


def test_manifest_round_trip(binary):
    back = Manifest.load(binary.root)
    assert back.records == binary.records
    assert back.kind == binary.kind and back.seed == binary.seed


def test_paths_exist(binary):
    for r in binary.records:
        assert os.path.exists(binary.path(r.ref_path)) and os.path.exists(binary.path(r.cand_path))


def test_unique_ids_enforced():
    r = Record("x", "a", "binary", 0, 0.0, 0.0, 0, 0, 1.5, "r", "c")
    with pytest.raises(ValueError):
        Manifest([r, r], "binary", 0)


def test_incomplete_build_detected(tmp_path):
    (tmp_path / "manifest.jsonl.partial").write_text("")
    with pytest.raises(FileNotFoundError, match="did not complete"):
        Manifest.load(tmp_path)


def test_multiclass_counts(multiclass):
    assert len(multiclass) == 2 * 4 * 6
    hist = np.bincount(multiclass.labels(), minlength=7)
    assert hist[0] == 0 and len(set(hist[1:])) == 1
    assert multiclass.num_classes == 7


def test_multiclass_vertex_counts(multiclass, assets):
    lods = multiclass.meta["lod_vertices"]
    for mesh in assets[:2]:
        for level in range(1, 7):
            assert lods[mesh.name][str(level)] == target_vertex_count(mesh.vertex_count, level)


def test_too_small_asset_warns(tmp_path):
    tet = Mesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float), np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]]), "tet")
    m = build_multiclass_dataset([tet, icosphere(2, name="ball")], tmp_path, grid=Grid.parse("1x1"), settings=SMALL)
    assert "tet" not in m.assets
    assert any("tet" in w for w in m.meta["warnings"])


def test_reproducible_bytes(tmp_path, assets):
    a = build_binary_dataset(assets[:2], tmp_path / "a", grid=Grid.parse("2x2"), seed=3, settings=SMALL)
    b = build_binary_dataset(assets[:2], tmp_path / "b", grid=Grid.parse("2x2"), seed=3, settings=SMALL, jobs=2)
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()
    for r in a.records:
        for rel in (r.ref_path, r.cand_path):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_load_sample(binary):
    rec = binary.records[0]
    s = load_sample(rec, binary.root)
    assert s.tensor.shape == (6, 32, 32)
    assert s.tensor.min() >= 0.0 and s.tensor.max() <= 1.0
    assert s.label == rec.label and s.view["yaw"] == rec.yaw


def test_identical_pair_channels_equal(tmp_path):
    from lodcheck.render import Image, save_image

    img = Image(np.random.default_rng(0).random((16, 16, 3)))
    save_image(img, tmp_path / "a.ppm")
    save_image(img, tmp_path / "b.ppm")
    rec = Record("s", "a", "binary", 0, 0.0, 0.0, 0, 0, 1.5, "a.ppm", "b.ppm")
    t = load_sample(rec, str(tmp_path)).tensor
    assert np.array_equal(t[:3], t[3:])


def test_load_sample_missing_file(binary, tmp_path):
    rec = Record(**{**binary.records[0].__dict__, "cand_path": "gone.ppm"})
    with pytest.raises(OSError):
        load_sample(rec, binary.root)


def test_pair_arrays_match_load_sample(binary):
    data = PairArrays(binary)
    for i in (0, 7, len(binary) - 1):
        t = load_sample(binary.records[i], binary.root).tensor.transpose(1, 2, 0)
        np.testing.assert_allclose(data.batch([i])[0], t, atol=1e-6)
    assert data.y.tolist() == binary.labels().tolist()


# --- folds --------------------------------------------------------------------


def test_folds_round_robin():
    plan = make_folds([f"a{i}" for i in range(10)], 5, seed=1)
    assert sorted(np.bincount(list(plan.assignment.values()))) == [2] * 5
    assert plan == make_folds([f"a{i}" for i in range(10)], 5, seed=1)


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds(["a", "b"], 3)
    with pytest.raises(ValueError):
        make_folds(["a", "b"], 1)


def test_fold_apply_and_recover(binary):
    plan = make_folds(binary, 2, seed=0)
    m = plan.apply(binary)
    for r in m.records:
        assert r.fold == plan.fold_of(r.asset)
    assert fold_plan_from_manifest(m) == plan


@settings(max_examples=200, deadline=None)
@given(
    n_assets=st.integers(2, 30),
    per_asset=st.integers(1, 6),
    k=st.integers(2, 8),
    seed=st.integers(0, 2**32 - 1),
    shuffle=st.randoms(use_true_random=False),
)
def test_fold_isolation_property(n_assets, per_asset, k, seed, shuffle):
    if n_assets < k:
        with pytest.raises(ValueError):
            make_folds([f"x{i}" for i in range(n_assets)], k, seed)
        return
    recs = [
        Record(f"x{a}/{j}", f"x{a}", "binary", j % 2, 0.0, 0.0, 0, 0, 1.5, "r", "c")
        for a in range(n_assets)
        for j in range(per_asset)
    ]
    shuffle.shuffle(recs)
    m = Manifest(recs, "binary", 0)
    plan = make_folds(m, k, seed)
    covered = set()
    for f in range(k):
        tr, va = plan.split(m, f)
        tr_assets = {m.records[i].asset for i in tr}
        va_assets = {m.records[i].asset for i in va}
        assert not tr_assets & va_assets
        assert len(tr) + len(va) == len(m)
        covered |= va_assets
    assert covered == set(m.assets)

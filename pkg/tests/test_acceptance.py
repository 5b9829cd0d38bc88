"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Criteria 5-7 train real models at desk scale and dominate the runtime.
"""
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lodcheck import autodiff as ad
from lodcheck.autodiff import Tensor
from lodcheck.cli import main
from lodcheck.dataset import Grid, Manifest, PairArrays, Record, RenderSettings, build_dataset, make_folds
from lodcheck.evaluate import BatchLoader, merged_accuracy, grid_search, run_cv, train_model
from lodcheck.mesh import Mesh, decimate, parse_obj, symmetric_hausdorff, target_vertex_count
from lodcheck.model import Model, ModelConfig, TrainConfig, adapt_first_layer, gradients, loss
from lodcheck.primitives import demo_assets

# --- desk-scale settings -------------------------------------------------------

DESK_ASSETS = 20
DESK_RESOLUTION = 112

GRID_LRS = (0.1, 0.01, 0.001)
GRID_BATCHES = (8, 128)

MC_ASSETS = 12
MC_GRID = "2x4"
MC_RESOLUTION = 64
MC_FOLDS = 4
MC_EPOCHS = 100


@pytest.fixture(scope="session")
def desk_binary(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk_binary")
    m = build_dataset(demo_assets(DESK_ASSETS), "binary", root, Grid.parse("8x8"), seed=0,
                      settings=RenderSettings(resolution=DESK_RESOLUTION))
    plan = make_folds(m, 5, seed=0)
    return PairArrays(plan.apply(m)), plan


@pytest.fixture(scope="session")
def desk_cv(desk_binary):
    """The criterion-5 run; also the (batch 8, lr 0.01) grid cell."""
    data, plan = desk_binary
    t = time.time()
    res = run_cv(data, plan, ModelConfig(), TrainConfig(learning_rate=0.01, batch_size=8, epochs=10))
    return res, time.time() - t


# --- 1 ---------------------------------------------------------------------------

TABLE = {
    50: [49, 46, 44, 41, 38, 35],
    250: [225, 203, 183, 145, 118, 93],
    450: [405, 324, 225, 135, 68, 34],
    5500: [2750, 1375, 715, 413, 248, 149],
}


def test_criterion_1_quality_table(verdict):
    t = time.time()
    got = {n: [target_vertex_count(n, lv) for lv in range(1, 7)] for n in TABLE}
    bad = [(n, lv + 1) for n in TABLE for lv in range(6) if got[n][lv] != TABLE[n][lv]]
    took = time.time() - t
    ok = not bad and got[5500][3] == 413 and took < 1.0
    assert verdict(1, "quality table, 24 cells exact", ok, f"mismatches={bad}, 5500@L4={got[5500][3]}, {took:.3f}s")


# --- 2 ---------------------------------------------------------------------------

CUBE = """v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nv 1 0 1\nv 1 1 1\nv 0 1 1
f 1 3 2\nf 1 4 3\nf 5 6 7\nf 5 7 8\nf 1 2 6\nf 1 6 5\nf 2 3 7\nf 2 7 6\nf 3 4 8\nf 3 8 7\nf 4 1 5\nf 4 5 8
"""


def planar_grid(n=10):
    xs, ys = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n), indexing="ij")
    v = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    tris = []
    for i in range(n - 1):
        for j in range(n - 1):
            a = i * n + j
            tris += [(a, a + n, a + n + 1), (a, a + n + 1, a + 1)]
    return Mesh(v, np.array(tris), "plane")


def test_criterion_2_decimation_oracle(verdict):
    t = time.time()
    out = decimate(planar_grid(10), 4)
    drift = float(np.abs(out.vertices[:, 2]).max())
    cube = parse_obj(CUBE, "cube")
    low = decimate(cube, 4)
    h1 = symmetric_hausdorff(cube, low, samples=100_000, seed=0)
    h2 = symmetric_hausdorff(parse_obj(CUBE, "cube"), decimate(parse_obj(CUBE, "cube"), 4), samples=100_000, seed=0)
    took = time.time() - t
    ok = out.vertex_count == 4 and drift <= 1e-6 and h1.hex() == h2.hex() and took < 10.0
    assert verdict(2, "planar grid stays planar; cube Hausdorff bit-stable", ok,
                   f"plane drift={drift:.2e}, hausdorff={h1!r} ({h1.hex()}), {took:.1f}s")


# --- 3 ---------------------------------------------------------------------------


def _layer_errors(norm):
    model = Model(ModelConfig(stem_width=4, widths=(4,), norm=norm, dtype="float64"), seed=0)
    rng = np.random.default_rng(0)
    x = rng.random((2, 16, 16, 6))
    y = np.array([0, 1])
    _, grads = gradients(model, x, y)

    def f():
        saved = {k: v.copy() for k, v in model.buffers.items()}
        value = loss(model.logits_nhwc(x, training=True), y)
        model.buffers.update(saved)
        return value

    errors = {}
    for name, p in model.params.items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + 1e-6
            hi = f()
            flat[j] = old - 1e-6
            lo = f()
            flat[j] = old
            nflat[j] = (hi - lo) / 2e-6
        # a bias feeding batch norm has an exactly zero gradient; the floor keeps
        # finite-difference noise (~1e-10) from reading as a 100% error there
        denom = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-6)
        errors[f"{norm}:{name}"] = float(np.linalg.norm(num - grads[name]) / denom)
    return errors


def test_criterion_3_gradient_check(verdict):
    t = time.time()
    errors = {**_layer_errors("batch"), **_layer_errors("none")}
    took = time.time() - t
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-3 for e in errors.values()) and took < 60
    assert verdict(3, "per-layer gradient check at float64", ok,
                   f"{len(errors)} tensors over batch-norm and plain nets, worst {worst}={errors[worst]:.1e}, {took:.1f}s")


# --- 4 ---------------------------------------------------------------------------


def test_criterion_4_overfit(tmp_path, verdict):
    t = time.time()
    m = build_dataset(demo_assets(4), "binary", tmp_path, Grid.parse("2x4"), seed=0,
                      settings=RenderSettings(resolution=DESK_RESOLUTION))
    assert len(m) == 64
    data = PairArrays(m)
    idx = np.arange(64)
    # plain SGD: no flips and no weight averaging, so the measured fit is the optimiser's own
    cfg = TrainConfig(learning_rate=0.01, batch_size=8, epochs=25, mirror=False, ema_decay=0.0)  # 25 x 8 = 200 steps
    hist, _ = train_model(Model(ModelConfig(), seed=0), data, idx, cfg, val_idx=idx)
    best = max(hist.val_acc)
    steps = 8 * (int(np.argmax(np.array(hist.val_acc) >= 0.99)) + 1) if best >= 0.99 else None
    took = time.time() - t
    ok = best >= 0.99 and took < 300
    assert verdict(4, "overfit 64 pairs in 200 steps", ok, f"best train acc={best:.4f} at step {steps}, {took:.0f}s")


# --- 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_desk_binary(desk_cv, verdict):
    res, took = desk_cv
    accs = ", ".join(f"{a:.3f}" for a in res.fold_accuracies)
    ok = res.mean_val_acc >= 0.90 and took <= 3600
    assert verdict(5, "desk-scale binary 5-fold CV >= 0.90", ok, f"mean={res.mean_val_acc:.4f} [{accs}], {took / 60:.1f} min")


# --- 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_grid_ordering(desk_binary, desk_cv, verdict):
    data, plan = desk_binary
    t = time.time()
    base = TrainConfig(epochs=10)
    cells = {}
    for b in GRID_BATCHES:
        for lr in GRID_LRS:
            if (b, lr) == (8, 0.01):
                cells[(b, lr)] = desk_cv[0].mean_val_acc
                continue
            g = grid_search(data, plan, ModelConfig(), base, [lr], [b])
            cells[(b, lr)] = g.cell(b, lr)
    took = time.time() - t
    # a diverged cell counts as the worst possible accuracy
    col = {lr: float(np.mean([0.0 if math.isnan(cells[(b, lr)]) else cells[(b, lr)] for b in GRID_BATCHES])) for lr in GRID_LRS}
    table = "; ".join(f"b{b}/lr{lr:g}={cells[(b, lr)]:.3f}" for b in GRID_BATCHES for lr in GRID_LRS)
    ok = col[0.01] >= col[0.1]
    assert verdict(6, "grid: lr 0.01 column >= lr 0.1 column", ok,
                   f"col means 0.1={col[0.1]:.3f} 0.01={col[0.01]:.3f} 0.001={col[0.001]:.3f}; {table}; {took / 60:.1f} min")


# --- 7 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_multiclass_adjacency(tmp_path, verdict):
    t = time.time()
    m = build_dataset(demo_assets(MC_ASSETS), "multiclass", tmp_path, Grid.parse(MC_GRID), seed=0,
                      settings=RenderSettings(resolution=MC_RESOLUTION))
    plan = make_folds(m, MC_FOLDS, seed=0)
    data = PairArrays(plan.apply(m))
    res = run_cv(data, plan, ModelConfig(task="multiclass"), TrainConfig.for_task("multiclass", learning_rate=0.01, batch_size=8))
    assert res.folds[0].val_acc and len(res.folds[0].val_acc) == MC_EPOCHS
    cm = res.pooled_confusion()
    six = cm.accuracy()
    adj = cm.adjacency_mass()
    merged = merged_accuracy(cm, [(0, 1, 2, 3), (4, 5, 6)])
    merged_ex = merged_accuracy(cm, [(0, 1, 2, 3), (4, 5, 6)], exclude=(3, 4))
    took = time.time() - t
    ok = adj >= 0.60 and merged > six and merged_ex > merged
    assert verdict(7, "multiclass errors adjacent; merging and exclusion raise accuracy", ok,
                   f"6-class={six:.3f}, adjacent share={adj:.3f}, merged={merged:.3f}, merged excl 3,4={merged_ex:.3f}, {took / 60:.1f} min")


# --- 8 ---------------------------------------------------------------------------


class _StubArrays:
    """Just enough of PairArrays for BatchLoader, tagging every sample with its asset."""

    def __init__(self, manifest):
        self.manifest = manifest
        self.assets = np.array([r.asset for r in manifest.records])
        self.y = manifest.labels()

    def batch(self, idx):
        return np.zeros((len(idx), 1, 1, 6))


_isolation = {"cases": 0, "violations": 0}


@settings(max_examples=200, deadline=None, derandomize=True)
@given(
    n_assets=st.integers(2, 40),
    per_asset=st.lists(st.integers(1, 8), min_size=40, max_size=40),
    k=st.integers(2, 10),
    seed=st.integers(0, 2**31),
    order=st.randoms(use_true_random=False),
)
def _fold_isolation_case(n_assets, per_asset, k, seed, order):
    k = min(k, n_assets)
    recs = [Record(f"a{a}/{j}", f"a{a}", "binary", j % 2, 0.0, 0.0, 0, 0, 1.5, "r", "c")
            for a in range(n_assets) for j in range(per_asset[a])]
    order.shuffle(recs)
    m = Manifest(recs, "binary", 0)
    plan = make_folds(m, k, seed)
    data = _StubArrays(m)
    _isolation["cases"] += 1
    for f in range(k):
        tr, va = plan.split(m, f)
        loader = BatchLoader(data, tr, 4, seed)
        for _ in loader.epoch():
            pass
        val_assets = set(data.assets[va].tolist())
        if loader.seen_assets & val_assets or set(data.assets[tr].tolist()) & val_assets:
            _isolation["violations"] += 1


def test_criterion_8_fold_isolation(verdict):
    t = time.time()
    _fold_isolation_case()
    took = time.time() - t
    ok = _isolation["cases"] >= 200 and _isolation["violations"] == 0 and took < 10
    assert verdict(8, "fold isolation over random manifests", ok,
                   f"{_isolation['cases']} manifests, {_isolation['violations']} violations, {took:.1f}s")


# --- 9 ---------------------------------------------------------------------------


def _pipeline(root, monkeypatch):
    root.mkdir()
    monkeypatch.chdir(root)
    assert main(["demo", "--out", "assets", "--count", "4", "--seed", "3"]) == 0
    assert main(["build-dataset", "assets", "--grid", "4x2", "--resolution", "48", "--folds", "2", "--seed", "3", "--out", "ds"]) == 0
    assert main(["train", "--dataset", "ds", "--epochs", "1", "--folds", "2", "--seed", "3", "--out", "runs"]) == 0
    files = sorted(p for p in root.rglob("*") if p.is_file())
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


def test_criterion_9_determinism(tmp_path, monkeypatch, verdict):
    t = time.time()
    a = _pipeline(tmp_path / "a", monkeypatch)
    b = _pipeline(tmp_path / "b", monkeypatch)
    took = time.time() - t
    ckpts = [k for k in a if k.endswith(".ckpt")]
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    ok = "ds/manifest.jsonl" in a and len(ckpts) == 2 and not differing and took < 600
    assert verdict(9, "demo -> dataset -> train is byte-identical", ok,
                   f"{len(a)} files compared, {len(ckpts)} checkpoints, differing={differing[:3]}, {took:.0f}s")


# --- 10 --------------------------------------------------------------------------


def test_criterion_10_adapter_identity(verdict):
    t = time.time()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        cout, k = int(rng.integers(1, 17)), int(rng.choice([1, 3, 5, 7]))
        w3 = rng.normal(size=(cout, 3, k, k))
        img = rng.random((1, 12, 12, 3))
        ref = ad.conv2d(Tensor(img), Tensor(w3), None, stride=1, padding=k // 2).data
        dup = ad.conv2d(Tensor(np.concatenate([img, img], axis=3)), Tensor(adapt_first_layer(w3)), None, stride=1, padding=k // 2).data
        worst = max(worst, float(np.abs(ref - dup).max()))
    took = time.time() - t
    ok = worst <= 1e-6 and took < 5
    assert verdict(10, "adapter preserves activations for 100 random stems", ok, f"max abs diff={worst:.1e}, {took:.2f}s")

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lodcheck.dataset import Grid, PairArrays, RenderSettings, build_binary_dataset, make_folds
from lodcheck.evaluate import (
    BatchLoader,
    ConfusionMatrix,
    append_runs_csv,
    confusion,
    cross_asset_eval,
    grid_search,
    merged_accuracy,
    read_grid_csv,
    read_runs_csv,
    run_cv,
    summarize,
    train_model,
    write_grid_csv,
)
from lodcheck.model import Model, ModelConfig, TrainConfig
from lodcheck.primitives import demo_assets

TINY = ModelConfig(stem_width=4, widths=(4, 8))


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    m = build_binary_dataset(demo_assets(4), tmp_path_factory.mktemp("d"), grid=Grid.parse("2x2"), seed=0, settings=RenderSettings(resolution=32))
    return PairArrays(m)


@pytest.fixture(scope="module")
def plan(data):
    return make_folds(data.manifest, 2, seed=0)


# --- confusion matrices -------------------------------------------------------


def test_confusion_from_predictions():
    cm = ConfusionMatrix.from_predictions([0, 0, 1, 2, 2], [0, 1, 1, 2, 0], 3)
    assert cm.counts.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 1]]
    assert cm.total == 5 and cm.accuracy() == pytest.approx(0.6)
    assert cm.class_counts().tolist() == [2, 1, 2] and cm.misclassified() == 2


def test_confusion_validation():
    with pytest.raises(ValueError):
        ConfusionMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        ConfusionMatrix(-np.ones((2, 2)))


def test_adjacency_mass():
    c = np.zeros((7, 7), int)
    c[2, 3] = 3
    c[5, 4] = 1
    c[1, 6] = 4
    c[3, 3] = 10
    assert ConfusionMatrix(c).adjacency_mass() == pytest.approx(0.5)
    assert math.isnan(ConfusionMatrix(np.eye(3, dtype=int)).adjacency_mass())


def test_confusion_csv_round_trip(tmp_path):
    cm = ConfusionMatrix(np.arange(49).reshape(7, 7))
    cm.to_csv(tmp_path / "c.csv")
    assert ConfusionMatrix.from_csv(tmp_path / "c.csv").counts.tolist() == cm.counts.tolist()
    assert (cm + cm).total == 2 * cm.total


def test_merged_accuracy():
    c = np.zeros((7, 7), int)
    c[1, 1] = c[1, 2] = c[3, 4] = c[4, 3] = c[5, 6] = c[6, 1] = 1
    cm = ConfusionMatrix(c)
    assert cm.accuracy() == pytest.approx(1 / 6)
    # {1,2,3} {4,5,6}
    assert merged_accuracy(cm, [(1, 2, 3), (4, 5, 6)]) == pytest.approx(3 / 6)
    assert merged_accuracy(cm, [(1, 2), (5, 6)], exclude=(3, 4)) == pytest.approx(3 / 4)
    # same merge with 3 and 4 dropped as true classes only
    assert merged_accuracy(cm, [(0, 1, 2, 3), (4, 5, 6)], exclude=(3, 4)) == pytest.approx(3 / 4)
    c[5, 3] = 1
    assert merged_accuracy(ConfusionMatrix(c), [(0, 1, 2, 3), (4, 5, 6)], exclude=(3, 4)) == pytest.approx(3 / 5)
    # identity grouping equals plain accuracy
    assert merged_accuracy(cm, [(c,) for c in range(7)]) == pytest.approx(cm.accuracy())


def test_merged_accuracy_errors():
    cm = ConfusionMatrix(np.ones((3, 3), int))
    with pytest.raises(ValueError, match="overlap"):
        merged_accuracy(cm, [(0, 1), (1, 2)])
    with pytest.raises(ValueError, match="no group"):
        merged_accuracy(cm, [(0, 1)])
    with pytest.raises(ValueError, match="range"):
        merged_accuracy(cm, [(0, 1, 2, 3)])
    with pytest.raises(ValueError, match="range"):
        merged_accuracy(cm, [(0, 1, 2)], exclude=(5,))
    assert merged_accuracy(cm, [(0, 1)], exclude=(1, 2)) == pytest.approx(2 / 3)


# --- loaders and training -----------------------------------------------------


def test_batch_loader_seeded(data, plan):
    tr, _ = plan.split(data.manifest, 0)
    a = [yb.tolist() for _, yb in BatchLoader(data, tr, 4, 7).epoch()]
    b = [yb.tolist() for _, yb in BatchLoader(data, tr, 4, 7).epoch()]
    assert a == b
    assert sum(len(x) for x in a) == len(tr)


def test_batch_loader_drops_singleton_tail(data):
    sizes = [len(yb) for _, yb in BatchLoader(data, np.arange(9), 4, 0).epoch()]
    assert sizes == [4, 4]


def test_batch_loader_mirror(data):
    plain = list(BatchLoader(data, np.arange(16), 16, 3).epoch())[0][0]
    loader = BatchLoader(data, np.arange(16), 16, 3, mirror=True)
    (xb, _), = list(loader.epoch())
    order = np.random.default_rng(3).permutation(16)
    ref = data.batch(order)
    np.testing.assert_array_equal(plain, ref)
    variants = 0
    for i in range(16):
        options = [ref[i], ref[i, :, ::-1], ref[i, ::-1], ref[i, ::-1, ::-1]]
        hits = [k for k, o in enumerate(options) if np.array_equal(xb[i], o)]
        assert hits, "each sample is some flip of its source pair"
        variants |= 1 << hits[0]
    assert variants > 1


def test_ema_changes_returned_weights(data, plan):
    tr, va = plan.split(data.manifest, 0)
    raw, avg = Model(TINY, seed=0), Model(TINY, seed=0)
    train_model(raw, data, tr, TrainConfig(epochs=1, batch_size=4, ema_decay=0.0), va)
    train_model(avg, data, tr, TrainConfig(epochs=1, batch_size=4, ema_decay=0.9), va)
    assert not np.allclose(raw.params["head.weight"], avg.params["head.weight"])


def test_train_model_deterministic(data, plan):
    tr, va = plan.split(data.manifest, 0)
    cfg = TrainConfig(epochs=2, batch_size=4)
    runs = []
    for _ in range(2):
        m = Model(TINY, seed=0)
        hist, _ = train_model(m, data, tr, cfg, va)
        runs.append((hist.train_loss, hist.val_acc, m.params["head.weight"].copy()))
    assert runs[0][0] == runs[1][0] and runs[0][1] == runs[1][1]
    np.testing.assert_array_equal(runs[0][2], runs[1][2])
    assert len(runs[0][0]) == 2


def test_train_model_rejects_empty(data):
    with pytest.raises(ValueError):
        train_model(Model(TINY), data, [], TrainConfig())


def test_run_cv_isolation_and_shape(data, plan):
    res = run_cv(data, plan, TINY, TrainConfig(epochs=1, batch_size=4))
    assert [f.fold for f in res.folds] == [0, 1]
    for f in res.folds:
        assert not f.train_assets & f.val_assets
        assert f.confusion.total == sum(1 for r in data.manifest.records if plan.fold_of(r.asset) == f.fold)
        assert 0.0 <= f.final_val_acc <= 1.0 and f.best_epoch == 1
    assert res.pooled_confusion().total == len(data)
    assert res.mean_val_acc == pytest.approx(np.mean(res.fold_accuracies))


def test_run_cv_task_mismatch(data, plan):
    with pytest.raises(ValueError):
        run_cv(data, plan, ModelConfig(task="multiclass", stem_width=4, widths=(4,)), TrainConfig(epochs=1))


def test_grid_search_table(data, plan, tmp_path):
    g = grid_search(data, plan, TINY, TrainConfig(epochs=1), [0.01, 0.001], [4, 8])
    assert g.table.shape == (2, 2)
    assert g.cell(8, 0.001) == g.table[1, 1]
    write_grid_csv(tmp_path / "g.csv", g)
    back = read_grid_csv(tmp_path / "g.csv")
    assert back.learning_rates == [0.01, 0.001] and back.batch_sizes == [4, 8]
    np.testing.assert_allclose(back.table, g.table, atol=1e-6)


def test_confusion_and_cross_asset(data):
    m = Model(TINY)
    cm = confusion(m, data)
    assert cm.total == len(data) and cm.num_classes == 2
    table = cross_asset_eval({"m": m}, {"all": data})
    assert table["m"]["all"] == pytest.approx(cm.accuracy())


def test_runs_csv(tmp_path, data, plan):
    res = run_cv(data, plan, TINY, TrainConfig(epochs=1, batch_size=4), folds=[1])
    p = tmp_path / "runs.csv"
    append_runs_csv(p, "abc", "binary", {"lr": 0.01}, res)
    append_runs_csv(p, "def", "binary", {"lr": 0.1}, res)
    rows = read_runs_csv(p)
    assert [r["run_id"] for r in rows] == ["abc", "def"]
    assert rows[0]["fold"] == "1"
    text = summarize(rows)
    assert "abc" in text and "def" in text


def test_one_cell_grid_equals_run_cv(data, plan):
    cfg = TrainConfig(epochs=1, batch_size=4)
    g = grid_search(data, plan, TINY, cfg, [cfg.learning_rate], [cfg.batch_size])
    assert g.table[0, 0] == run_cv(data, plan, TINY, cfg).mean_val_acc


def test_constant_and_perfect_predictors():
    y = [1, 2, 3, 4, 5, 6, 1, 2]
    assert np.count_nonzero(ConfusionMatrix.from_predictions(y, [4] * len(y), 7).counts.sum(axis=0)) == 1
    perfect = ConfusionMatrix.from_predictions(y, y, 7).counts
    assert np.array_equal(perfect, np.diag(np.diag(perfect)))
    assert merged_accuracy(ConfusionMatrix.from_predictions(y, [4] * len(y), 7), [range(7)]) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 20), min_size=7, max_size=7), min_size=7, max_size=7), st.integers(1, 6))
def test_merge_monotone_and_exclusion_consistent(rows, cut):
    cm = ConfusionMatrix(np.array(rows))
    if cm.total == 0:
        return
    coarse = merged_accuracy(cm, [range(0, cut), range(cut, 7)])
    assert coarse >= cm.accuracy() - 1e-12
    # excluding a class leaves the other rows' tallies untouched
    kept = [c for c in range(7) if c != cut]
    fine = merged_accuracy(cm, [(c,) for c in kept], exclude=(cut,))
    sub = cm.counts[np.ix_(kept, kept)]
    total = cm.counts[kept].sum()
    assert fine == pytest.approx(np.trace(sub) / total if total else 0.0)

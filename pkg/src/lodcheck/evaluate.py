"""Cross-validated training, confusion matrices, class merging and reports."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .dataset import FoldPlan, Manifest, PairArrays
from .model import SGD, Model, ModelConfig, TrainConfig, backward_and_step

log = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred, num_classes: int) -> "ConfusionMatrix":
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total) if self.total else 0.0

    def class_counts(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def misclassified(self) -> int:
        return self.total - int(np.trace(self.counts))

    def adjacency_mass(self) -> float:
        """Share of off-diagonal mass on the +-1 band; NaN without errors."""
        off = self.misclassified()
        if off == 0:
            return float("nan")
        band = np.trace(self.counts, offset=1) + np.trace(self.counts, offset=-1)
        return float(band / off)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["true\\pred"] + [str(c) for c in range(self.num_classes)])
            for i, row in enumerate(self.counts):
                w.writerow([str(i)] + [str(int(v)) for v in row])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "ConfusionMatrix":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return cls(np.array([[int(v) for v in r[1:]] for r in rows[1:]]))


def merged_accuracy(cm: ConfusionMatrix, groups: Sequence[Iterable[int]], exclude: Iterable[int] = ()) -> float:
    """Accuracy after relabelling classes by group.

    Samples whose true class is in ``exclude`` are dropped; predictions are
    still relabelled, so an excluded class may stay in its group. A
    prediction counts as correct when it falls in the same group as the
    true class, and a prediction in no group is always wrong.
    """
    groups = [set(int(c) for c in g) for g in groups]
    exclude = set(int(c) for c in exclude)
    seen: set[int] = set()
    for g in groups:
        if g & seen:
            raise ValueError("class groups overlap")
        seen |= g
    n = cm.num_classes
    if any(c < 0 or c >= n for c in seen | exclude):
        raise ValueError(f"class index out of range for a {n}-class matrix")
    counts = cm.counts
    for c in range(n):
        if c not in seen and c not in exclude and counts[c].sum() > 0:
            raise ValueError(f"class {c} has samples but belongs to no group")
    correct = sum(int(counts[np.ix_(sorted(g - exclude), sorted(g))].sum()) for g in groups)
    total = sum(int(counts[c].sum()) for c in seen - exclude)
    return correct / total if total else 0.0


def confusion(model: Model, data: PairArrays, indices=None, chunk: int = 64) -> ConfusionMatrix:
    """Tally argmax predictions of ``model`` against true labels."""
    idx = np.arange(len(data)) if indices is None else np.asarray(indices)
    preds = [model.predict_nhwc(data.batch(idx[s : s + chunk])) for s in range(0, len(idx), chunk)]
    pred = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    return ConfusionMatrix.from_predictions(data.y[idx], pred, model.config.num_classes)


# ---------------------------------------------------------------------------
# training


class BatchLoader:
    """Seeded mini-batches over a fixed index set; records every asset it serves.

    With ``mirror`` both images of a pair are flipped left-right together
    for a random half of each batch.
    """

    def __init__(self, data: PairArrays, indices, batch_size: int, seed, mirror: bool = False):
        self.data = data
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.mirror = mirror
        self.seen_assets: set[str] = set()

    def epoch(self):
        perm = self.indices[self.rng.permutation(len(self.indices))]
        batches = [perm[s : s + self.batch_size] for s in range(0, len(perm), self.batch_size)]
        # a lone trailing sample cannot be batch-normalised
        if len(batches) > 1 and len(batches[-1]) == 1:
            batches.pop()
        for b in batches:
            self.seen_assets.update(self.data.assets[b].tolist())
            xb = self.data.batch(b)
            if self.mirror:
                flip = self.rng.random((2, len(b))) < 0.5
                xb[flip[0]] = xb[flip[0], :, ::-1]
                xb[flip[1]] = xb[flip[1], ::-1]
            yield xb, self.data.y[b]


RECALIBRATION_CHUNK = 64
RECALIBRATION_SAMPLES = 512


def recalibrate(model: Model, data: PairArrays, indices, chunk: int = RECALIBRATION_CHUNK, limit: int = RECALIBRATION_SAMPLES) -> None:
    """Refresh normalisation statistics from up to ``limit`` evenly spaced samples of ``indices``."""
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    if len(idx) > limit:
        idx = idx[np.linspace(0, len(idx) - 1, limit).round().astype(np.int64)]
    model.recalibrate(data.batch(idx[s : s + chunk]) for s in range(0, len(idx), chunk))


@dataclass
class History:
    train_acc: list[float] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)


def train_model(
    model: Model,
    data: PairArrays,
    train_idx,
    cfg: TrainConfig,
    val_idx=None,
    loader_seed=None,
) -> tuple[History, BatchLoader]:
    """Run ``cfg.epochs`` epochs of momentum SGD over ``train_idx``.

    With ``cfg.ema_decay > 0`` an exponential moving average of the weights
    is what gets validated each epoch and what ``model`` holds on return.
    """
    if len(train_idx) == 0:
        raise ValueError("empty training set")
    loader = BatchLoader(data, train_idx, cfg.batch_size, cfg.seed if loader_seed is None else loader_seed, mirror=cfg.mirror)
    opt = SGD(cfg.learning_rate, cfg.momentum)
    hist = History()
    avg = model.copy() if cfg.ema_decay > 0 else model
    steps = 0
    for epoch in range(cfg.epochs):
        correct = seen = 0
        total_loss = 0.0
        for xb, yb in loader.epoch():
            value, logits = backward_and_step(model, xb, yb, cfg, opt)
            steps += 1
            if avg is not model:
                # warm-up keeps the first steps from being dominated by the initialisation
                d = min(cfg.ema_decay, (1.0 + steps) / (10.0 + steps))
                for k, v in model.params.items():
                    avg.params[k] *= d
                    avg.params[k] += (1.0 - d) * v
            correct += int((logits.argmax(axis=1) == yb).sum())
            seen += len(yb)
            total_loss += value * len(yb)
        recalibrate(avg, data, train_idx)
        hist.train_acc.append(correct / seen)
        hist.train_loss.append(total_loss / seen)
        if val_idx is not None and len(val_idx):
            hist.val_acc.append(confusion(avg, data, val_idx).accuracy())
        log.debug("epoch %d: train acc %.3f loss %.4f", epoch + 1, hist.train_acc[-1], hist.train_loss[-1])
    if avg is not model:
        model.params, model.buffers = avg.params, avg.buffers
    return hist, loader


@dataclass
class FoldResult:
    fold: int
    train_acc: list[float]
    val_acc: list[float]
    confusion: ConfusionMatrix
    train_loss: list[float] = field(default_factory=list)
    train_assets: set = field(default_factory=set)
    val_assets: set = field(default_factory=set)
    model: Model | None = field(default=None, repr=False)

    @property
    def final_val_acc(self) -> float:
        return self.val_acc[-1]

    @property
    def best_val_acc(self) -> float:
        return max(self.val_acc)

    @property
    def best_epoch(self) -> int:
        return int(np.argmax(self.val_acc)) + 1


@dataclass
class CVResult:
    folds: list[FoldResult]

    @property
    def fold_accuracies(self) -> list[float]:
        return [f.final_val_acc for f in self.folds]

    @property
    def mean_val_acc(self) -> float:
        return float(np.mean(self.fold_accuracies))

    def pooled_confusion(self) -> ConfusionMatrix:
        out = self.folds[0].confusion
        for f in self.folds[1:]:
            out = out + f.confusion
        return out


def _run_fold(args) -> FoldResult:
    data, plan, fold, model_cfg, train_cfg, keep_model, init = args
    train_idx, val_idx = plan.split(data.manifest, fold)
    if not train_idx or not val_idx:
        raise ValueError(f"fold {fold} has an empty train or validation split")
    model = Model(model_cfg, seed=train_cfg.seed)
    if init is not None:
        init(model)
    hist, loader = train_model(model, data, train_idx, train_cfg, val_idx, loader_seed=[train_cfg.seed, fold])
    cm = confusion(model, data, val_idx)
    return FoldResult(
        fold=fold,
        train_acc=hist.train_acc,
        val_acc=hist.val_acc,
        confusion=cm,
        train_loss=hist.train_loss,
        train_assets=loader.seen_assets,
        val_assets=set(data.assets[val_idx].tolist()),
        model=model if keep_model else None,
    )


def run_cv(
    data: PairArrays,
    plan: FoldPlan,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    folds: Sequence[int] | None = None,
    keep_models: bool = False,
    jobs: int = 1,
    init: Callable[[Model], None] | None = None,
) -> CVResult:
    """Train one model per fold from the same seeded initialisation.

    ``init`` runs on each freshly built model before training (for example
    to install a pretrained stem); it must be picklable when ``jobs > 1``.
    """
    if set(data.assets.tolist()) - set(plan.assignment):
        raise ValueError("fold plan does not cover every asset in the dataset")
    if model_cfg.num_classes != data.manifest.num_classes:
        raise ValueError(f"{model_cfg.task} model does not fit a {data.manifest.kind} dataset")
    folds = list(range(plan.k)) if folds is None else list(folds)
    work = [(data, plan, f, model_cfg, train_cfg, keep_models, init) for f in folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, work))
    else:
        results = [_run_fold(w) for w in work]
    for r in results:
        log.info("fold %d: val acc %.4f (best %.4f @ %d)", r.fold, r.final_val_acc, r.best_val_acc, r.best_epoch)
    return CVResult(results)


@dataclass
class GridResult:
    learning_rates: list[float]
    batch_sizes: list[int]
    table: np.ndarray
    runs: dict = field(default_factory=dict)

    def cell(self, batch_size: int, lr: float) -> float:
        return float(self.table[self.batch_sizes.index(batch_size), self.learning_rates.index(lr)])

    def column_mean(self, lr: float) -> float:
        return float(self.table[:, self.learning_rates.index(lr)].mean())


def grid_search(
    data: PairArrays,
    plan: FoldPlan,
    model_cfg: ModelConfig,
    base: TrainConfig,
    lrs: Sequence[float],
    batch_sizes: Sequence[int],
    jobs: int = 1,
) -> GridResult:
    """Mean CV validation accuracy for each (batch size, learning rate) cell."""
    if not lrs or not batch_sizes:
        raise ValueError("grid axes must be non-empty")
    table = np.zeros((len(batch_sizes), len(lrs)))
    runs = {}
    for i, b in enumerate(batch_sizes):
        for j, lr in enumerate(lrs):
            cfg = replace(base, learning_rate=lr, batch_size=b)
            try:
                res = run_cv(data, plan, model_cfg, cfg, jobs=jobs)
                table[i, j] = res.mean_val_acc
            except FloatingPointError as exc:
                log.warning("batch %d lr %g diverged: %s", b, lr, exc)
                res = None
                table[i, j] = float("nan")
            runs[(b, lr)] = res
    return GridResult(list(lrs), list(batch_sizes), table, runs)


def cross_asset_eval(models: Mapping[str, Model], test_sets: Mapping[str, PairArrays]) -> dict[str, dict[str, float]]:
    """Accuracy of each trained model on each held-out asset-type dataset."""
    return {
        name: {kind: confusion(model, data).accuracy() for kind, data in test_sets.items()}
        for name, model in models.items()
    }


# ---------------------------------------------------------------------------
# reports

RUNS_FIELDS = ("run_id", "task", "config", "fold", "val_acc", "best_val_acc", "best_epoch")


def append_runs_csv(path: str | os.PathLike, run_id: str, task: str, config: dict, cv: CVResult) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(RUNS_FIELDS)
        cfg = json.dumps(config, sort_keys=True, separators=(",", ":"))
        for f in cv.folds:
            w.writerow([run_id, task, cfg, f.fold, f"{f.final_val_acc:.6f}", f"{f.best_val_acc:.6f}", f.best_epoch])


def read_runs_csv(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_grid_csv(path: str | os.PathLike, grid: GridResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch_size"] + [f"{lr:g}" for lr in grid.learning_rates])
        for b, row in zip(grid.batch_sizes, grid.table):
            w.writerow([b] + [f"{v:.6f}" for v in row])


def read_grid_csv(path: str | os.PathLike) -> GridResult:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    lrs = [float(x) for x in rows[0][1:]]
    batches = [int(r[0]) for r in rows[1:]]
    table = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return GridResult(lrs, batches, table)


def summarize(rows: list[dict]) -> str:
    """Plain-text per-run summary of a runs.csv table."""
    by_run: dict[str, list[dict]] = {}
    for r in rows:
        by_run.setdefault(r["run_id"], []).append(r)
    lines = [f"{'run':<14} {'task':<11} {'folds':>5} {'mean val':>9} {'min':>7} {'max':>7}"]
    for run_id, rs in by_run.items():
        acc = np.array([float(r["val_acc"]) for r in rs])
        lines.append(f"{run_id:<14} {rs[0]['task']:<11} {len(rs):>5} {acc.mean():>9.4f} {acc.min():>7.4f} {acc.max():>7.4f}")
    return "\n".join(lines)



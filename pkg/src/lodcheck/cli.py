"""Command-line pipeline: demo assets, simplify, build-dataset, train, eval, grid, report.

Every subcommand resolves its parameters as flags > ``--config`` JSON file >
defaults and writes the resolved set as ``config.json`` beside its outputs.
"""
from __future__ import annotations

import argparse
import functools
import glob
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__

log = logging.getLogger("lodcheck")

OUT_ENV = "LODCHECK_OUT"


class CLIError(Exception):
    pass


DEFAULTS = {
    "demo": {"out": None, "count": 20, "seed": 0},
    "simplify": {"input": None, "level": None, "target": None, "policy": None, "out": None},
    "build-dataset": {
        "assets": None, "kind": "binary", "grid": "8x8", "seed": 0, "out": None,
        "resolution": 112, "zoom": 1.5, "folds": 5, "jobs": 1, "policy": None,
    },
    "train": {
        "dataset": None, "task": None, "lr": 0.01, "batch": 8, "epochs": None, "folds": 5,
        "momentum": 0.9, "seed": 0, "out": None, "jobs": 1, "widths": "16,32,64,128",
        "stem_width": 16, "blocks": 1, "norm": "batch", "input_filter": "local_mean", "pretrained_stem": None,
        "mirror": True, "ema_decay": 0.99,
    },
    "eval": {"checkpoint": None, "dataset": None, "fold": None, "out": None},
    "grid": {
        "dataset": None, "task": None, "lrs": "0.1,0.01,0.001", "batches": "8,16,32,64,128",
        "epochs": None, "folds": 5, "momentum": 0.9, "seed": 0, "out": None, "jobs": 1,
        "widths": "16,32,64,128", "stem_width": 16, "blocks": 1, "norm": "batch", "input_filter": "local_mean",
        "mirror": True, "ema_decay": 0.99,
    },
    "report": {"runs": None, "confusion": None, "merge": "1-3,4-6", "exclude": None},
}


def output_root() -> str:
    return os.environ.get(OUT_ENV, "runs")


def resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            loaded = json.load(fh)
        loaded.pop("command", None)
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise CLIError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def run_id(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def write_snapshot(path: str, command: str, cfg: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"command": command, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _floats(text: str) -> list[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _groups(text: str) -> list[list[int]]:
    groups = []
    for part in str(text).split(","):
        lo, _, hi = part.partition("-")
        groups.append(list(range(int(lo), int(hi or lo) + 1)))
    return groups


# ---------------------------------------------------------------------------


def cmd_demo(cfg: dict) -> int:
    from .mesh import save_mesh
    from .primitives import demo_assets

    out = cfg["out"] or os.path.join(output_root(), "demo_assets")
    os.makedirs(out, exist_ok=True)
    for mesh in demo_assets(int(cfg["count"]), int(cfg["seed"])):
        save_mesh(mesh, os.path.join(out, mesh.name + ".obj"))
    write_snapshot(os.path.join(out, "config.json"), "demo", cfg)
    print(f"wrote {cfg['count']} assets to {out}")
    return 0


def cmd_simplify(cfg: dict) -> int:
    from .mesh import DEFAULT_POLICY, QualityPolicy, DecimationStats, decimate, load_mesh, save_mesh, target_vertex_count

    if (cfg["level"] is None) == (cfg["target"] is None):
        raise CLIError("give exactly one of --level or --target")
    mesh = load_mesh(cfg["input"])
    policy = QualityPolicy.from_file(cfg["policy"]) if cfg["policy"] else DEFAULT_POLICY
    if cfg["level"] is not None:
        level = int(cfg["level"])
        if not 1 <= level <= 6:
            raise CLIError(f"level out of range: {level} (expected 1..6)")
        target = target_vertex_count(mesh.vertex_count, level, policy)
    else:
        target = int(cfg["target"])
        if target < 3:
            raise CLIError("target must be at least 3 vertices")
    target = min(target, mesh.vertex_count)
    stats = DecimationStats()
    out_mesh = decimate(mesh, target, stats=stats)
    out = cfg["out"] or os.path.splitext(cfg["input"])[0] + ".lod.obj"
    save_mesh(out_mesh, out)
    write_snapshot(out + ".config.json", "simplify", cfg)
    print(f"original={mesh.vertex_count} target={target} achieved={out_mesh.vertex_count} triangles={out_mesh.triangle_count}")
    if out_mesh.vertex_count > target:
        print(f"warning: no legal collapse left at {out_mesh.vertex_count} vertices", file=sys.stderr)
    return 0


def cmd_build_dataset(cfg: dict) -> int:
    from .dataset import Grid, RenderSettings, build_dataset, make_folds
    from .mesh import DEFAULT_POLICY, QualityPolicy, load_mesh

    if not cfg["assets"]:
        raise CLIError("need an assets directory")
    paths = sorted(glob.glob(os.path.join(cfg["assets"], "*.obj")))
    if not paths:
        raise CLIError(f"no .obj assets in {cfg['assets']}")
    assets = [load_mesh(p) for p in paths]
    policy = QualityPolicy.from_file(cfg["policy"]) if cfg["policy"] else DEFAULT_POLICY
    out = cfg["out"] or os.path.join(output_root(), f"dataset_{cfg['kind']}_{run_id(cfg)}")
    manifest = build_dataset(
        assets, cfg["kind"], out, Grid.parse(cfg["grid"]), policy, int(cfg["seed"]),
        RenderSettings(resolution=int(cfg["resolution"]), zoom=float(cfg["zoom"])), jobs=int(cfg["jobs"]),
    )
    if cfg["folds"]:
        manifest = make_folds(manifest, int(cfg["folds"]), int(cfg["seed"])).apply(manifest)
        manifest.save(out)
    write_snapshot(os.path.join(out, "config.json"), "build-dataset", cfg)
    print(f"wrote {len(manifest)} records ({cfg['kind']}) to {out}")
    for w in manifest.meta.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    return 0


def _load_data(path: str):
    from .dataset import Manifest, PairArrays

    manifest = Manifest.load(path)
    return manifest, PairArrays(manifest)


def _plan(manifest, k: int, seed: int):
    from .dataset import fold_plan_from_manifest, make_folds

    if all(r.fold >= 0 for r in manifest.records):
        plan = fold_plan_from_manifest(manifest)
        if plan.k == k:
            return plan
    return make_folds(manifest, k, seed)


def _model_config(cfg: dict, task: str):
    from .model import ModelConfig

    return ModelConfig(
        task=task, stem_width=int(cfg["stem_width"]), widths=tuple(_ints(cfg["widths"])),
        blocks_per_stage=int(cfg["blocks"]), norm=cfg["norm"], input_filter=cfg["input_filter"],
    )


def cmd_train(cfg: dict) -> int:
    from .evaluate import append_runs_csv, run_cv
    from .model import TrainConfig, load_pretrained_stem, save_params

    if not cfg["dataset"]:
        raise CLIError("need --dataset")
    manifest, data = _load_data(cfg["dataset"])
    task = cfg["task"] or manifest.kind
    if task != manifest.kind:
        raise CLIError(f"--task {task} does not match the {manifest.kind} dataset")
    epochs = cfg["epochs"] or (100 if task == "multiclass" else 10)
    cfg = dict(cfg, task=task, epochs=int(epochs))
    rid = run_id(cfg)
    out_root = cfg["out"] or output_root()
    out = os.path.join(out_root, rid)
    os.makedirs(out, exist_ok=True)
    write_snapshot(os.path.join(out, "config.json"), "train", cfg)

    mcfg = _model_config(cfg, task)
    tcfg = TrainConfig(
        float(cfg["lr"]), int(cfg["batch"]), int(cfg["epochs"]), float(cfg["momentum"]), int(cfg["seed"]),
        mirror=bool(cfg["mirror"]), ema_decay=float(cfg["ema_decay"]),
    )
    plan = _plan(manifest, int(cfg["folds"]), int(cfg["seed"]))
    init = None
    if cfg["pretrained_stem"]:
        blob = np.load(cfg["pretrained_stem"])
        if "weight" not in blob:
            raise CLIError(f"{cfg['pretrained_stem']} has no 'weight' array")
        # every fold starts from the same adapted stem
        init = functools.partial(load_pretrained_stem, weight=blob["weight"], bias=blob["bias"] if "bias" in blob else None)
    cv = run_cv(data, plan, mcfg, tcfg, keep_models=True, jobs=int(cfg["jobs"]), init=init)
    for f in cv.folds:
        save_params(f.model, os.path.join(out, f"fold{f.fold}.ckpt"), extra={"fold": f.fold, "run_id": rid})
        f.confusion.to_csv(os.path.join(out, f"confusion_{rid}_{f.fold}.csv"))
    append_runs_csv(os.path.join(out_root, "runs.csv"), rid, task, cfg, cv)
    with open(os.path.join(out, "history.json"), "w", encoding="utf-8") as fh:
        json.dump([{"fold": f.fold, "train_acc": f.train_acc, "val_acc": f.val_acc, "train_loss": f.train_loss} for f in cv.folds], fh, indent=1)
    print(f"run {rid}: mean validation accuracy {cv.mean_val_acc:.4f} over {len(cv.folds)} folds")
    for f in cv.folds:
        print(f"  fold {f.fold}: val {f.final_val_acc:.4f} (best {f.best_val_acc:.4f} at epoch {f.best_epoch})")
    return 0


def cmd_eval(cfg: dict) -> int:
    from .dataset import fold_plan_from_manifest
    from .evaluate import confusion, merged_accuracy
    from .model import load_params

    if not cfg["checkpoint"] or not os.path.exists(cfg["checkpoint"]):
        raise CLIError(f"checkpoint not found: {cfg['checkpoint']}")
    if not cfg["dataset"]:
        raise CLIError("need --dataset")
    manifest, data = _load_data(cfg["dataset"])
    model, extra = load_params(cfg["checkpoint"], task=manifest.kind)
    idx = None
    if cfg["fold"] is not None:
        idx = fold_plan_from_manifest(manifest).split(manifest, int(cfg["fold"]))[1]
    cm = confusion(model, data, idx)
    out = cfg["out"] or os.path.dirname(os.path.abspath(cfg["checkpoint"]))
    os.makedirs(out, exist_ok=True)
    tag = run_id(cfg)
    cm.to_csv(os.path.join(out, f"confusion_eval_{tag}.csv"))
    write_snapshot(os.path.join(out, f"eval_{tag}.config.json"), "eval", cfg)
    print(f"accuracy {cm.accuracy():.4f} on {cm.total} samples")
    if manifest.kind == "multiclass":
        print(f"merged 1-3/4-6 accuracy {merged_accuracy(cm, [[0, 1, 2, 3], [4, 5, 6]]):.4f}")
        print(f"adjacent share of errors {cm.adjacency_mass():.4f}")
    return 0


def cmd_grid(cfg: dict) -> int:
    from .evaluate import grid_search, write_grid_csv
    from .model import TrainConfig

    if not cfg["dataset"]:
        raise CLIError("need --dataset")
    manifest, data = _load_data(cfg["dataset"])
    task = cfg["task"] or manifest.kind
    epochs = cfg["epochs"] or (100 if task == "multiclass" else 10)
    cfg = dict(cfg, task=task, epochs=int(epochs))
    lrs, batches = _floats(cfg["lrs"]), _ints(cfg["batches"])
    if not lrs or not batches:
        raise CLIError("grid axes must be non-empty")
    rid = run_id(cfg)
    out = os.path.join(cfg["out"] or output_root(), rid)
    os.makedirs(out, exist_ok=True)
    write_snapshot(os.path.join(out, "config.json"), "grid", cfg)
    plan = _plan(manifest, int(cfg["folds"]), int(cfg["seed"]))
    base = TrainConfig(
        epochs=int(cfg["epochs"]), momentum=float(cfg["momentum"]), seed=int(cfg["seed"]),
        mirror=bool(cfg["mirror"]), ema_decay=float(cfg["ema_decay"]),
    )
    grid = grid_search(data, plan, _model_config(cfg, task), base, lrs, batches, jobs=int(cfg["jobs"]))
    write_grid_csv(os.path.join(out, "grid.csv"), grid)
    print(f"grid {rid}: {len(batches)}x{len(lrs)} cells written to {os.path.join(out, 'grid.csv')}")
    return 0


def cmd_report(cfg: dict) -> int:
    from .evaluate import ConfusionMatrix, merged_accuracy, read_runs_csv, summarize

    if not cfg["runs"] and not cfg["confusion"]:
        raise CLIError("need --runs and/or --confusion")
    if cfg["runs"]:
        if not os.path.exists(cfg["runs"]):
            raise CLIError(f"runs file not found: {cfg['runs']}")
        print(summarize(read_runs_csv(cfg["runs"])))
    if cfg["confusion"]:
        cm = ConfusionMatrix.from_csv(cfg["confusion"])
        print(f"accuracy {cm.accuracy():.4f} on {cm.total} samples; adjacent share of errors {cm.adjacency_mass():.4f}")
        groups = _groups(cfg["merge"])
        exclude = _ints(cfg["exclude"]) if cfg["exclude"] else []
        covered = {c for g in groups for c in g}
        spare = [c for c in range(cm.num_classes) if c not in covered]
        if spare:
            groups[0] = sorted(set(groups[0]) | set(spare))
        print(f"merged accuracy {merged_accuracy(cm, groups, exclude):.4f} (groups {groups}, excluded {exclude})")
    return 0


COMMANDS = {
    "demo": cmd_demo,
    "simplify": cmd_simplify,
    "build-dataset": cmd_build_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "grid": cmd_grid,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lodcheck", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON file of parameters (flags take precedence)")
        return sp

    sp = add("demo", "write procedural demo assets as OBJ files")
    sp.add_argument("--out")
    sp.add_argument("--count", type=int)
    sp.add_argument("--seed", type=int)

    sp = add("simplify", "decimate one OBJ mesh")
    sp.add_argument("input", nargs="?")
    sp.add_argument("--level", type=int)
    sp.add_argument("--target", type=int)
    sp.add_argument("--policy", help="JSON quality table {buckets, ratios}")
    sp.add_argument("--out")

    sp = add("build-dataset", "render a labelled pair dataset from a directory of OBJ assets")
    sp.add_argument("assets", nargs="?")
    sp.add_argument("--kind", choices=["binary", "multiclass"])
    sp.add_argument("--grid", help="yaws x elevations, e.g. 8x8")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--zoom", type=float)
    sp.add_argument("--folds", type=int, help="assign asset-disjoint folds (0 to skip)")
    sp.add_argument("--jobs", type=int)
    sp.add_argument("--policy")

    for name, help_ in (("train", "cross-validated training"), ("grid", "learning-rate x batch-size grid")):
        sp = add(name, help_)
        sp.add_argument("--dataset")
        sp.add_argument("--task", choices=["binary", "multiclass"])
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--folds", type=int)
        sp.add_argument("--momentum", type=float)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--widths")
        sp.add_argument("--stem-width", dest="stem_width", type=int)
        sp.add_argument("--blocks", type=int)
        sp.add_argument("--norm", choices=["batch", "group", "none"])
        sp.add_argument("--input-filter", dest="input_filter", choices=["local_mean", "none"])
        sp.add_argument("--mirror", action=argparse.BooleanOptionalAction, default=None, help="random pair flips while training")
        sp.add_argument("--ema-decay", dest="ema_decay", type=float, help="weight-average decay (0 disables)")
        if name == "train":
            sp.add_argument("--lr", type=float)
            sp.add_argument("--batch", type=int)
            sp.add_argument("--pretrained-stem", dest="pretrained_stem", help=".npz with a (C, 3, k, k) 'weight'")
        else:
            sp.add_argument("--lrs")
            sp.add_argument("--batches")

    sp = add("eval", "evaluate a checkpoint on a dataset")
    sp.add_argument("--checkpoint")
    sp.add_argument("--dataset")
    sp.add_argument("--fold", type=int, help="evaluate only this fold's validation assets")
    sp.add_argument("--out")

    sp = add("report", "summarise runs.csv and confusion matrices")
    sp.add_argument("--runs")
    sp.add_argument("--confusion")
    sp.add_argument("--merge", help="class groups, e.g. 1-3,4-6")
    sp.add_argument("--exclude", help="true classes to drop, e.g. 3,4")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        return COMMANDS[args.command](cfg)
    except (CLIError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

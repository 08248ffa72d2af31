"""Command-line entry point: ``dfcn <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import itertools
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from dfcn import __version__, autodiff, ingest, kernels, metrics
from dfcn.dknn import SectorQueryConfig, Space, directional_knn, oracle_knn
from dfcn.network import NetworkConfig, build_dfcn
from dfcn.trainer import NonFiniteGradientError, TrainConfig, predict_blocks, train_loop

log = logging.getLogger("dfcn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_DIR_ENV = "DFCN_DATA_DIR"

ABLATION_VARIANTS = {
    "none": {"use_dconv": False},
    "cone3d-8": {"space": Space.CONE_3D.value, "n_dirs": 8},
    "sector2d-4": {"space": Space.PROJECTED_2D.value, "n_dirs": 4},
    "sector2d-8": {"space": Space.PROJECTED_2D.value, "n_dirs": 8},
}
ABLATION_LABELS = {
    "none": "no partition",
    "cone3d-8": "3D space(8 directions)",
    "sector2d-4": "2D space(4 directions)",
    "sector2d-8": "2D space(8 directions)",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def data_path(p) -> Path:
    """Resolve ``p``; relative paths that do not exist fall back to $DFCN_DATA_DIR."""
    path = Path(p)
    if not path.is_absolute() and not path.exists() and os.environ.get(DATA_DIR_ENV):
        alt = Path(os.environ[DATA_DIR_ENV]) / path
        if alt.exists():
            return alt
    return path


# ---------------------------------------------------------------- configs


def load_run_config(path) -> dict:
    if path is None:
        return {}
    with open(data_path(path)) as fh:
        cfg = yaml.safe_load(fh) or {}
    if not isinstance(cfg, dict) or set(cfg) - {"model", "train", "scene"}:
        raise ValueError("run config must be a mapping with optional 'model', 'train', 'scene' sections")
    return cfg


def _alpha(value):
    if value is None:
        return None
    if isinstance(value, str) and value.strip().upper() in ("NA", "NONE", "OFF"):
        return None
    return float(value)


def resolve_configs(cfg: dict, args) -> tuple[NetworkConfig, TrainConfig]:
    """Defaults < config file < command-line flags."""
    model = dict(cfg.get("model") or {})
    train = dict(cfg.get("train") or {})
    flag_map = {
        "epochs": (train, "epochs"),
        "seed": (train, "seed"),
        "batch_size": (train, "batch_size"),
        "lr": (train, "lr0"),
        "patch_n": (train, "patch_n"),
        "dropout": (train, "dropout_ratio"),
        "patches_per_epoch": (train, "patches_per_epoch"),
        "n_dirs": (model, "n_dirs"),
        "k": (model, "k_dconv"),
    }
    for flag, (section, key) in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            section[key] = value
    alpha = getattr(args, "alpha", None)
    if alpha is not None:
        train["alpha"] = _alpha(alpha)
    if "alpha" in train:
        train["alpha"] = _alpha(train["alpha"])
    model["alpha"] = train.get("alpha", _alpha(model.get("alpha", 1.2)))
    train.setdefault("alpha", model["alpha"])
    if "patch_n" in train and "level_sizes" not in model:
        model["level_sizes"] = scaled_levels(int(train["patch_n"]))
    if "seed" in train:
        model.setdefault("seed", train["seed"])
    return NetworkConfig.from_dict(model), TrainConfig.from_dict(train)


def scaled_levels(n: int, ratios=(1, 8, 32, 128)) -> tuple[int, ...]:
    """Level schedule keeping the 8192/1024/256/64 proportions for a patch of ``n`` points."""
    sizes = [max(1, n // r) for r in ratios]
    for i in range(1, len(sizes)):
        sizes[i] = min(sizes[i], sizes[i - 1] - 1)
    if sizes[-1] < 1:
        raise ValueError(f"patch size {n} too small for a {len(ratios)}-level schedule")
    return tuple(sizes)


def save_model_config(path, cfg: NetworkConfig):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def load_model_config(path) -> NetworkConfig:
    with open(path) as fh:
        return NetworkConfig.from_dict(yaml.safe_load(fh))


# ---------------------------------------------------------------- manifest


def write_manifest(path, argv, config, seed, outputs, started):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "outputs": [str(o) for o in outputs],
        "cwd": os.getcwd(),
    }
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


# ---------------------------------------------------------------- experiments


def fit_and_score(model_cfg: NetworkConfig, train_cfg: TrainConfig, train_cloud, test_cloud, out_dir=None):
    """Train on ``train_cloud``, predict ``test_cloud`` block-wise, return (OA, average F1, cm)."""
    model = build_dfcn(model_cfg)
    train_loop(model, train_cloud, train_cfg, out_dir=out_dir)
    blocks = ingest.tile_blocks(test_cloud, train_cfg.grid, train_cfg.min_fraction)
    pred = predict_blocks(model, blocks, test_cloud)
    cm = metrics.confusion(pred, test_cloud.labels, model_cfg.n_classes)
    f1 = metrics.precision_recall_f1(cm)[2]
    return metrics.overall_accuracy(cm), metrics.average_f1(f1), cm


def ablation_configs(model_cfg: NetworkConfig, variants):
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise UsageError(f"unknown ablation variants {unknown}; choose from {list(ABLATION_VARIANTS)}")
    return [(v, replace(model_cfg, **ABLATION_VARIANTS[v])) for v in variants]


def _snapshot(cfg, model_cfg, train_cfg, **extra):
    snap = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), **extra}
    if cfg.get("scene"):
        snap["scene"] = cfg["scene"]
    return snap


def _load_clouds(args, cfg):
    if args.data:
        train_cloud = ingest.load_points(data_path(args.data))
    else:
        spec = cfg.get("scene") or {"layout": "urban"}
        train_cloud = ingest.scene_from_spec(spec, args.scene_seed)
    if getattr(args, "test", None):
        test_cloud = ingest.load_points(data_path(args.test))
    else:
        spec = cfg.get("scene") or {"layout": "urban"}
        test_cloud = ingest.scene_from_spec(spec, args.scene_seed + 1)
    return train_cloud, test_cloud


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    spec = ingest.load_scene_spec(data_path(args.spec)) if args.spec else {"layout": "urban"}
    if args.n_points is not None:
        if spec.get("layout") != "urban":
            raise UsageError("--n-points only applies to the urban layout")
        spec["n_points"] = args.n_points
    cloud = ingest.scene_from_spec(spec, args.seed)
    ingest.save_points(args.out, cloud)
    print(f"wrote {len(cloud)} points to {args.out}")
    return [args.out], spec


def cmd_tile(args):
    cloud = ingest.load_points(data_path(args.input), args.columns)
    blocks = ingest.tile_blocks(cloud, args.grid, args.min_fraction)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    index_rows = ["block\tn_points\torigin_x\torigin_y\textent_x\textent_y\tfile"]
    for i, b in enumerate(blocks):
        path = out / f"block_{i:04d}.txt"
        ingest.save_points(path, cloud.subset(b.point_indices))
        np.savetxt(out / f"block_{i:04d}.idx", b.point_indices, fmt="%d")
        outputs.append(path)
        index_rows.append(f"{i}\t{len(b.point_indices)}\t{b.origin[0]:.3f}\t{b.origin[1]:.3f}\t"
                          f"{b.extent[0]:.3f}\t{b.extent[1]:.3f}\t{path.name}")
    (out / "blocks.tsv").write_text("\n".join(index_rows) + "\n")
    print(f"{len(blocks)} blocks written to {out}")
    return outputs + [out / "blocks.tsv"], {"grid": args.grid, "min_fraction": args.min_fraction}


def cmd_train(args):
    cfg = load_run_config(args.config)
    model_cfg, train_cfg = resolve_configs(cfg, args)
    if args.data:
        cloud = ingest.load_points(data_path(args.data), args.columns)
    else:
        cloud = ingest.scene_from_spec(cfg.get("scene") or {"layout": "urban"}, args.scene_seed)
    if cloud.labels is None:
        raise ValueError("training data has no label column")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model_config(out / "model.yaml", model_cfg)
    (out / "train.yaml").write_text(yaml.safe_dump(train_cfg.to_dict(), sort_keys=False))
    model = build_dfcn(model_cfg)
    log_path = out / "train.log"
    if log_path.exists():
        log_path.unlink()
    t0 = time.time()
    result = train_loop(model, cloud, train_cfg, out_dir=out, log_path=log_path)
    print(f"trained {result.steps} steps in {time.time() - t0:.1f}s; checkpoint {result.last_checkpoint}")
    if result.best_val_f1 is not None:
        print(f"best validation average F1 {result.best_val_f1:.3f} ({result.best_checkpoint})")
    outputs = [out / "model.yaml", log_path, result.last_checkpoint]
    return outputs, _snapshot(cfg, model_cfg, train_cfg)


def cmd_predict(args):
    ckpt = Path(args.checkpoint)
    model_cfg = load_model_config(args.model_config or ckpt.parent / "model.yaml")
    model = build_dfcn(model_cfg)
    model.params.load_state(autodiff.load_checkpoint(ckpt))
    cloud = ingest.load_points(data_path(args.input), args.columns, model_cfg.n_classes)
    blocks = ingest.tile_blocks(cloud, args.grid, args.min_fraction)
    pred = predict_blocks(model, blocks, cloud)
    ingest.save_points(args.out, cloud, pred)
    print(f"predicted {len(cloud)} points in {len(blocks)} blocks -> {args.out}")
    return [args.out], {"model": model_cfg.to_dict(), "grid": args.grid}


def cmd_eval(args):
    n_classes = args.n_classes
    pred = ingest.load_label_column(data_path(args.pred), args.pred_columns, "pred", n_classes)
    gt_cloud = ingest.load_points(data_path(args.gt), args.columns, n_classes)
    if gt_cloud.labels is None:
        raise ValueError("ground-truth file has no label column")
    if len(pred) != len(gt_cloud):
        raise ValueError(f"prediction has {len(pred)} rows, ground truth {len(gt_cloud)}")
    cm = metrics.confusion(pred, gt_cloud.labels, n_classes)
    names = ingest.CLASS_NAMES if n_classes == ingest.N_CLASSES else None
    print(metrics.format_report(cm, names))
    outputs = []
    if args.table:
        Path(args.table).write_text(metrics.format_machine(cm, names) + "\n")
        outputs.append(args.table)
    if args.export_dir:
        d = Path(args.export_dir)
        d.mkdir(parents=True, exist_ok=True)
        outputs.append(metrics.export_labeled_cloud(d / "classification.ply", gt_cloud.xyz, pred,
                                                    n_classes=n_classes))
        outputs.append(metrics.export_error_map(d / "error_map.ply", gt_cloud.xyz, pred, gt_cloud.labels))
    return outputs, {"n_classes": n_classes}


def cmd_knn_bench(args):
    rng = np.random.default_rng(args.seed)
    pts = np.column_stack([rng.uniform(0, args.extent, (args.points, 2)), rng.uniform(0, args.extent / 4, args.points)])
    cfg = SectorQueryConfig(args.n_dirs, args.k, args.radius, Space(args.space))
    t0 = time.perf_counter()
    table = directional_knn(pts, None, cfg)
    elapsed = time.perf_counter() - t0
    n_check = min(args.oracle_queries, args.points)
    q = rng.choice(args.points, size=n_check, replace=False)
    mismatches = int(np.sum(np.any(oracle_knn(pts, q, cfg) != table[q], axis=1)))
    print(f"backend\t{kernels.BACKEND}")
    print(f"points\t{args.points}")
    print(f"seconds\t{elapsed:.6f}")
    print(f"queries_per_second\t{args.points / max(elapsed, 1e-12):.1f}")
    print(f"oracle_checked\t{n_check}")
    print(f"oracle_mismatches\t{mismatches}")
    if mismatches:
        raise FloatingPointError(f"{mismatches} neighborhoods differ from the oracle")
    return [], {"n_dirs": args.n_dirs, "k": args.k, "radius": args.radius, "space": args.space}


def _emit_table(header, rows, table_path):
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) + 2 for i, h in enumerate(header)]
    print("".join(str(h).ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        print("".join(str(v).ljust(w) for v, w in zip(r, widths)))
    if table_path:
        Path(table_path).write_text("\n".join("\t".join(str(v) for v in row) for row in [header] + rows) + "\n")


def cmd_ablate(args):
    cfg = load_run_config(args.config)
    model_cfg, train_cfg = resolve_configs(cfg, args)
    variants = ablation_configs(model_cfg, args.variants)
    train_cloud, test_cloud = _load_clouds(args, cfg)
    rows = []
    for name, variant_cfg in variants:
        oa, f1, _ = fit_and_score(variant_cfg, train_cfg, train_cloud, test_cloud)
        rows.append([ABLATION_LABELS[name], f"{oa:.3f}", f"{f1:.3f}"])
    _emit_table(["Neighborhood partition strategy", "OA", "Average F1"], rows, args.table)
    return ([args.table] if args.table else []), _snapshot(cfg, model_cfg, train_cfg, variants=args.variants)


def cmd_sweep(args):
    cfg = load_run_config(args.config)
    model_cfg, train_cfg = resolve_configs(cfg, args)
    train_cloud, test_cloud = _load_clouds(args, cfg)
    rows = []
    for n, k, alpha in itertools.product(args.n_values, args.k_values, args.alpha_values):
        a = _alpha(alpha)
        mc = replace(model_cfg, level_sizes=scaled_levels(n), k_dconv=k, alpha=a)
        tc = replace(train_cfg, patch_n=n, alpha=a)
        oa, f1, _ = fit_and_score(mc, tc, train_cloud, test_cloud)
        rows.append([f"{n:,}", k, "NA" if a is None else a, f"{oa:.3f}", f"{f1:.3f}"])
    _emit_table(["N", "K", "alpha", "OA", "Average F1"], rows, args.table)
    return ([args.table] if args.table else []), _snapshot(cfg, model_cfg, train_cfg)


def cmd_rerun(args) -> int:
    """Re-execute a manifest's command from its working directory.

    When the run used ``--config``, the resolved config snapshot replaces the
    file so later edits to it do not change the rerun.
    """
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    snapshot = {k: v for k, v in (manifest.get("config") or {}).items() if k in ("model", "train", "scene")}
    prev = os.getcwd()
    os.chdir(manifest.get("cwd", prev))
    try:
        if "--config" in argv and snapshot:
            with tempfile.NamedTemporaryFile("w", suffix=".yaml", delete=False) as fh:
                yaml.safe_dump(snapshot, fh)
            argv[argv.index("--config") + 1] = fh.name
            try:
                return main(argv)
            finally:
                os.unlink(fh.name)
        return main(argv)
    finally:
        os.chdir(prev)


# ---------------------------------------------------------------- parser


def _csv(cast):
    def parse(text):
        return [cast(v) for v in text.split(",") if v.strip()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfcn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--manifest", help="where to write the run manifest")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a labeled synthetic scene")
    s.add_argument("--spec", help="YAML scene spec (default: urban layout)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-points", type=int)
    s.set_defaults(func=cmd_synth, primary="out")

    s = sub.add_parser("tile", help="split a scene into grid blocks")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--grid", type=float, default=30.0)
    s.add_argument("--min-fraction", type=float, default=0.5)
    s.add_argument("--columns", default=ingest.DEFAULT_COLUMNS)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_tile, primary="out_dir")

    def add_training_flags(s):
        s.add_argument("--config", help="YAML with model/train/scene sections")
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--batch-size", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--patch-n", type=int)
        s.add_argument("--patches-per-epoch", type=int)
        s.add_argument("--dropout", type=float)
        s.add_argument("--alpha", help="class balance coefficient, or NA to disable")
        s.add_argument("--n-dirs", type=int)
        s.add_argument("--k", type=int)
        s.add_argument("--scene-seed", type=int, default=0, help="seed of the synthetic scene when no data is given")

    s = sub.add_parser("train", help="train a model")
    add_training_flags(s)
    s.add_argument("--data", help="labeled point file (default: synthetic scene)")
    s.add_argument("--columns", default=ingest.DEFAULT_COLUMNS)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_train, primary="out_dir")

    s = sub.add_parser("predict", help="label a point file block by block")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--model-config", help="model.yaml (default: next to the checkpoint)")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--columns", default=ingest.DEFAULT_COLUMNS)
    s.add_argument("--grid", type=float, default=30.0)
    s.add_argument("--min-fraction", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_predict, primary="out")

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--pred", required=True, help="point file with a trailing pred column")
    s.add_argument("--gt", required=True, help="point file with a label column")
    s.add_argument("--columns", default=ingest.DEFAULT_COLUMNS)
    s.add_argument("--pred-columns", default=ingest.DEFAULT_COLUMNS + " pred")
    s.add_argument("--n-classes", type=int, default=ingest.N_CLASSES)
    s.add_argument("--table", help="write machine-readable metrics here")
    s.add_argument("--export-dir", help="write classification and error-map PLY files here")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval, primary="pred")

    s = sub.add_parser("knn-bench", help="time the directional neighbor search and check it against the oracle")
    s.add_argument("--n-dirs", type=int, default=8)
    s.add_argument("--k", type=int, default=2)
    s.add_argument("--radius", type=float, default=2.0)
    s.add_argument("--space", default=Space.PROJECTED_2D.value, choices=[m.value for m in Space])
    s.add_argument("--points", type=int, default=8192)
    s.add_argument("--extent", type=float, default=30.0)
    s.add_argument("--oracle-queries", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_knn_bench, primary=None)

    s = sub.add_parser("ablate", help="compare neighborhood partition strategies")
    add_training_flags(s)
    s.add_argument("--data")
    s.add_argument("--test")
    s.add_argument("--variants", type=_csv(str), default=list(ABLATION_VARIANTS))
    s.add_argument("--table")
    s.set_defaults(func=cmd_ablate, primary="table")

    s = sub.add_parser("sweep", help="grid over patch size N, neighbors K and alpha")
    add_training_flags(s)
    s.add_argument("--data")
    s.add_argument("--test")
    s.add_argument("--n-values", type=_csv(int), default=[2048, 4096, 8192])
    s.add_argument("--k-values", type=_csv(int), default=[1, 2, 4])
    s.add_argument("--alpha-values", type=_csv(str), default=["1.2"])
    s.add_argument("--table")
    s.set_defaults(func=cmd_sweep, primary="table")

    s = sub.add_parser("rerun", help="re-execute the command recorded in a manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_rerun, primary=None)
    return p


def _manifest_path(args):
    if args.manifest:
        return Path(args.manifest)
    primary = getattr(args, "primary", None)
    if primary == "out_dir":
        return Path(args.out) / "manifest.json"
    target = getattr(args, primary, None) if primary else None
    if target:
        return Path(str(target) + ".manifest.json")
    return Path(f"dfcn-{args.command}.manifest.json")


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "rerun":
        try:
            return cmd_rerun(args)
        except (OSError, ValueError, KeyError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    try:
        outputs, config = args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (autodiff.NonFiniteError, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = (config.get("train") or {}).get("seed")
    write_manifest(_manifest_path(args), argv, config, seed, outputs, started)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry point.

Exit codes: 0 success, 2 usage or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import formats
from .biohead import BiomassDomainError
from .formats import FormatError
from .numerics import make_rng
from .pointdata import PointCloudParseError, VoxelizationError, compute_3dvi, load_point_cloud, voxelize
from .synthscene import (PlotConfig, SceneError, default_scene, heldout_cameras, make_biomass_dataset,
                         oracle_render, sample_sparse_points)
from .trainer import (NEFF_HISTORY_COLUMNS, BionetConfig, BionetTrainConfig, CheckpointError, MetricDomainError,
                      NeffData, NeffTrainConfig, TrainingDiverged, evaluate, fit_through_origin, load_checkpoint,
                      relative_improvement, save_checkpoint, train_bionet, train_neff)

log = logging.getLogger("biomass3d")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


def apply_overrides(obj, overrides: dict, where: str = "config"):
    """Return a copy of dataclass ``obj`` with ``overrides`` applied; unknown keys are errors."""
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in overrides.items():
        if key not in known:
            raise UsageError(f"unknown {where} key {key!r}")
        current = getattr(obj, key)
        if is_dataclass(current) and isinstance(value, dict):
            value = apply_overrides(current, value, f"{where}.{key}")
        elif isinstance(current, tuple) and isinstance(value, list):
            value = tuple(value)
        changes[key] = value
    return replace(obj, **changes)


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


# -- synth -------------------------------------------------------------------

SCENE_DEFAULTS = {"mode": "scene", "n_views": 20, "image_size": 64, "c_f": 8, "n_sparse": 2000,
                  "sfm_sigma": 0.002, "n_heldout": 2, "scene_seed": 0}
DATASET_KEYS = {f.name for f in fields(PlotConfig)} | {"mode", "test_fraction"}


def cmd_synth(args) -> int:
    cfg = _load_json(args.config)
    mode = cfg.get("mode", "scene")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    if mode == "dataset":
        return _synth_dataset(cfg, out, args.seed)
    if mode != "scene":
        raise UsageError(f"unknown config value mode={mode!r}")
    for key in cfg:
        if key not in SCENE_DEFAULTS:
            raise UsageError(f"unknown config key {key!r}")
    c = {**SCENE_DEFAULTS, **cfg}
    scene = default_scene(seed=c["scene_seed"], n_views=c["n_views"], size=c["image_size"], c_f=c["c_f"])
    rng = make_rng(args.seed)
    (out / "images").mkdir(exist_ok=True)
    (out / "features").mkdir(exist_ok=True)

    def write_views(cams, prefix):
        entries = []
        for i, cam in enumerate(cams):
            img, fmap, _ = oracle_render(scene, cam)
            name = f"{prefix}_{i:03d}"
            formats.write_ppm(out / "images" / f"{name}.ppm", img)
            formats.write_features(out / "features" / f"{name}.nffb", fmap)
            entries.append({**formats.camera_to_json(cam), "image": f"images/{name}.ppm",
                            "features": f"features/{name}.nffb"})
        return entries

    pts = sample_sparse_points(scene, c["n_sparse"], rng, sigma=c["sfm_sigma"])
    formats.write_ply(out / "sparse.ply", pts)
    manifest = {
        "version": formats.MANIFEST_VERSION,
        "bounding": {"center": [0.0, 0.0, 0.0], "radius": 1.0},
        "c_f": c["c_f"],
        "background": list(scene.background),
        "cameras": write_views(scene.cameras, "view"),
        "heldout_cameras": write_views(heldout_cameras(c["n_heldout"], c["image_size"]), "heldout"),
        "sparse_points": "sparse.ply",
        "biomass_g": None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {out / 'manifest.json'} ({len(scene.cameras)} cameras)")
    return EXIT_OK


def _synth_dataset(cfg: dict, out: Path, seed: int) -> int:
    for key in cfg:
        if key not in DATASET_KEYS:
            raise UsageError(f"unknown config key {key!r}")
    test_fraction = float(cfg.get("test_fraction", 0.25))
    pcfg = apply_overrides(PlotConfig(), {k: v for k, v in cfg.items() if k not in ("mode", "test_fraction")})
    data = make_biomass_dataset(pcfg, make_rng(seed))
    n_train = len(data) - int(round(test_fraction * len(data)))
    grid_cfg = BionetConfig()
    (out / "plots").mkdir(exist_ok=True)
    rows = []
    for i, (pc, label) in enumerate(data):
        name = f"plots/plot_{i:04d}.ply"
        formats.write_ply(out / name, pc)
        vi = compute_3dvi(voxelize(pc, grid_cfg.extent, grid_cfg.resolution, grid_cfg.origin))
        rows.append([name, float(label), "train" if i < n_train else "test", float(vi)])
    formats.write_csv(out / "labels.csv", ["cloud", "biomass_g", "split", "voxel_index"], rows)
    print(f"wrote {len(rows)} plots and {out / 'labels.csv'}")
    return EXIT_OK


# -- NeFF --------------------------------------------------------------------


def _neff_config(args) -> NeffTrainConfig:
    cfg = apply_overrides(NeffTrainConfig(), _load_json(args.config))
    if args.iters is not None:
        cfg = replace(cfg, iterations=args.iters)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train_neff(args) -> int:
    cfg = _neff_config(args)
    m = formats.load_manifest(args.manifest)
    if cfg.model.c_f != m["c_f"]:
        cfg = replace(cfg, model=replace(cfg.model, c_f=int(m["c_f"])))
    data = NeffData.from_views(m["cameras"], m["images"], m["features"], m["sparse_points"],
                               tuple(m.get("background", (0.0, 0.0, 0.0))))
    out = Path(args.out)
    csv_path = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    try:
        field, history = train_neff(data, cfg)
    except TrainingDiverged as exc:
        from .neff import NeuralFeatureField

        field = NeuralFeatureField(cfg.model, seed=cfg.seed, dtype=cfg.precision)
        field.load_state_dict(exc.state)
        save_checkpoint(field, out)
        _write_history(csv_path, exc.history)
        raise
    save_checkpoint(field, out)
    _write_history(csv_path, history)
    print(f"wrote {out}")
    return EXIT_OK


def _write_history(path, history):
    if not history:
        formats.write_csv(path, NEFF_HISTORY_COLUMNS, [])
        return
    cols = list(history[0])
    formats.write_csv(path, cols, [[r[c] for c in cols] for r in history])


def cmd_extract_features(args) -> int:
    from .neff import NeuralFeatureField, extract_3d_features

    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, NeuralFeatureField):
        raise UsageError(f"{args.checkpoint} is not a feature-field checkpoint")
    pc = extract_3d_features(model, args.grid_res)
    formats.write_ply(args.out, pc)
    if pc.n == 0:
        print("warning: field has no zero crossing; wrote an empty point cloud", file=sys.stderr)
    print(pc.n)
    return EXIT_OK


# -- BioNet ------------------------------------------------------------------


def _read_labels(path) -> list[dict]:
    rows = formats.read_csv_rows(path, ["cloud", "biomass_g"])
    for i, r in enumerate(rows, start=2):
        r["biomass_g"] = formats.parse_float(r, "biomass_g", path, i)
        if "voxel_index" in r and r["voxel_index"] not in (None, ""):
            r["voxel_index"] = formats.parse_float(r, "voxel_index", path, i)
    return rows


def _cloud(base: Path, rel: str):
    p = Path(rel)
    return load_point_cloud(p if p.is_absolute() else base / p)


def cmd_train_bionet(args) -> int:
    cfg = apply_overrides(BionetTrainConfig(), _load_json(args.config))
    if args.iters is not None:
        cfg = replace(cfg, iterations=args.iters)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    rows = _read_labels(args.labels)
    base = Path(args.labels).parent
    rows = [r for r in rows if r.get("split", "train") in ("train", None, "")] or rows
    dataset = [(_cloud(base, r["cloud"]), r["biomass_g"]) for r in rows]
    model, history = train_bionet(dataset, cfg)
    save_checkpoint(model, args.out)
    csv_path = Path(args.loss_csv) if args.loss_csv else Path(args.out).with_suffix(".loss.csv")
    _write_history(csv_path, history)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    from .trainer import BioNet

    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, BioNet):
        raise UsageError(f"{args.checkpoint} is not a BioNet checkpoint")
    if args.labels:
        rows = _read_labels(args.labels)
        base = Path(args.labels).parent
        names = [r["cloud"] for r in rows if r.get("split", "test") in ("test", None, "")]
    else:
        base = Path(".")
        names = list(args.clouds)
    if not names:
        raise UsageError("no point clouds to predict")
    preds = model.predict([_cloud(base, n) for n in names])
    for p in preds:
        print("%.6f" % p)
    if args.out:
        formats.write_csv(args.out, ["cloud", "prediction_g"], [[n, float(p)] for n, p in zip(names, preds)])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pred_rows = formats.read_csv_rows(args.predictions, ["cloud", "prediction_g"])
    preds = {r["cloud"]: formats.parse_float(r, "prediction_g", args.predictions, i)
             for i, r in enumerate(pred_rows, start=2)}
    labels = _read_labels(args.labels)
    by_name = {r["cloud"]: r for r in labels}
    for i, r in enumerate(pred_rows, start=2):
        if r["cloud"] not in by_name:
            raise FormatError(f"{args.predictions}: row {i}: cloud {r['cloud']!r} has no label")
    names = [r["cloud"] for r in pred_rows]
    y = np.array([by_name[n]["biomass_g"] for n in names])
    p = np.array([preds[n] for n in names])
    m = evaluate(p, y)
    lines = [f"n {m.n}", f"MAE {m.mae:.6f}", f"MARE {m.mare:.6f}", f"RMSE {m.rmse:.6f}"]
    if args.baseline == "3dvi":
        if any("voxel_index" not in r or r["voxel_index"] in (None, "") for r in labels):
            raise FormatError(f"{args.labels}: row 1: baseline 3dvi needs a voxel_index column")
        fit_rows = [r for r in labels if r.get("split", "train") == "train" and r["cloud"] not in preds] or labels
        k = fit_through_origin([r["voxel_index"] for r in fit_rows], [r["biomass_g"] for r in fit_rows])
        b = evaluate(k * np.array([by_name[n]["voxel_index"] for n in names]), y)
        lines += [f"baseline_3dvi_slope {k:.6f}", f"baseline_MAE {b.mae:.6f}", f"baseline_MARE {b.mare:.6f}",
                  f"baseline_RMSE {b.rmse:.6f}",
                  f"RI_MAE {relative_improvement(m.mae, b.mae):.6f}",
                  f"RI_MARE {relative_improvement(m.mare, b.mare):.6f}",
                  f"RI_RMSE {relative_improvement(m.rmse, b.rmse):.6f}"]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text)
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def _grid_res(value: str) -> int:
    n = int(value)
    if n < 8:
        raise argparse.ArgumentTypeError("grid resolution must be >= 8")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="biomass3d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic scene (or plot dataset) with ground truth")
    s.add_argument("--config", help="JSON config; {\"mode\": \"dataset\"} writes biomass plots")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train-neff", help="fit the feature field to a scene manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--loss-csv")
    s.set_defaults(func=cmd_train_neff)

    s = sub.add_parser("extract-features", help="write surface points with field features as PLY")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--grid-res", type=_grid_res, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_extract_features)

    s = sub.add_parser("train-bionet", help="train the biomass network on labelled clouds")
    s.add_argument("--labels", required=True, help="CSV with cloud,biomass_g[,split]")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--iters", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--loss-csv")
    s.set_defaults(func=cmd_train_bionet)

    s = sub.add_parser("predict", help="print predicted grams, one per line")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--labels", help="predict the test rows of this labels CSV")
    s.add_argument("clouds", nargs="*")
    s.add_argument("--out", help="also write predictions CSV")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="MAE / MARE / RMSE of a predictions CSV")
    s.add_argument("--predictions", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--baseline", choices=["3dvi"])
    s.add_argument("--report")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, FormatError, CheckpointError, PointCloudParseError, VoxelizationError, SceneError,
            BiomassDomainError, MetricDomainError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, FileNotFoundError) and exc.filename is None else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver: ``python -m indifield <scan|reconstruct|extract|eval|ablate>``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import config as C
from . import pipeline
from .errors import IndifieldError, NumericalError
from .extract import denormalize_mesh, marching_cubes, sample_field_grid
from .io import read_mesh, read_point_cloud, read_sensors, write_mesh, write_point_cloud, write_sensors
from .prep import NormalizationTransform
from .siren import load_checkpoint, save_checkpoint, set_threads

log = logging.getLogger("indifield")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--preset", choices=C.PRESETS, default=None)
    p.add_argument("--config", type=Path, default=None, help="TOML file (overridden by flags)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for field evaluation (results do not depend on it)")
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved configuration as JSON and exit")


def _train_flags(p: argparse.ArgumentParser):
    p.add_argument("--lg", type=float, default=None)
    p.add_argument("--ls", type=float, default=None)
    p.add_argument("--le", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--near-radius", type=float, default=None)
    p.add_argument("--per-ray", type=int, default=None)
    p.add_argument("--near-count", type=int, default=None)
    p.add_argument("--near-band", type=float, default=None)
    p.add_argument("--empty-res", type=float, default=None)
    p.add_argument("--max-empty", type=int, default=None)
    p.add_argument("--estimate-normals", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="indifield", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="virtually scan a mesh into an oriented point cloud")
    _common(p)
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--layout", choices=("grid", "orbit"), default=None)
    p.add_argument("--spacing", type=float, default=None)
    p.add_argument("--tilt", type=float, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None, help="image height in pixels")
    p.add_argument("--points", type=int, default=None)
    p.add_argument("--orbit-count", type=int, default=None)
    p.add_argument("--noise", type=float, default=None, help="depth noise std (mesh units)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sensors", type=Path, required=True)

    p = sub.add_parser("reconstruct", help="fit an indicator field to a scan")
    _common(p)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--sensors", type=Path, default=None)
    p.add_argument("--mode", choices=tuple(pipeline.MODE_ALIASES), default=None)
    _train_flags(p)
    p.add_argument("--out-checkpoint", type=Path, required=True)
    p.add_argument("--transform", type=Path, default=None,
                   help="where to write the normalization (default: next to the checkpoint)")
    p.add_argument("--report", type=Path, default=None)

    p = sub.add_parser("extract", help="marching cubes on a trained field")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--iso", type=float, default=None)
    p.add_argument("--transform", type=Path, default=None, help="map the mesh back to scan units")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="Chamfer / IoU / distance-field error against ground truth")
    _common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--res", type=int, default=None)
    p.add_argument("--transform", type=Path, default=None,
                   help="normalization applied to both meshes (default: fit to ground truth)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="run all four training modes and tabulate metrics")
    _common(p)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--sensors", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    _train_flags(p)
    p.add_argument("--out", type=Path, required=True, help="CSV table; JSON written alongside")
    return ap


def _config(args, overrides: dict) -> C.PipelineConfig:
    overrides = {"seed": args.seed, "threads": args.threads, **overrides}
    return C.resolve(args.preset, args.config, overrides)


def _weights(args) -> dict:
    w = {"grad": args.lg, "surface": args.ls, "empty": args.le}
    return {f"train.weights.{k}": v for k, v in w.items() if v is not None}


def read_transform(path) -> NormalizationTransform:
    return NormalizationTransform.from_dict(C.read_json(path))


def _scan_overrides(args) -> dict:
    return {
        "scan.layout": args.layout, "scan.spacing": args.spacing, "scan.tilt": args.tilt,
        "scan.width": args.width, "scan.image_height": args.height, "scan.points": args.points,
        "scan.orbit_count": args.orbit_count, "scan.noise_std": args.noise,
    }


def cmd_scan(args) -> int:
    if not args.mesh.exists():
        raise FileNotFoundError(f"mesh not found: {args.mesh}")
    cfg = _config(args, _scan_overrides(args))
    mesh = read_mesh(args.mesh)
    cloud, sensors = pipeline.scan_mesh(mesh, cfg)
    write_point_cloud(cloud, args.out)
    write_sensors(sensors, args.sensors, {"provenance": C.provenance(cfg), "config": asdict(cfg.scan)})
    log.info("scan points=%d sensors=%d out=%s", len(cloud), len(sensors), args.out)
    return EXIT_OK


def _train_overrides(args) -> dict:
    return {
        "train.mode": pipeline.MODE_ALIASES.get(args.mode) if getattr(args, "mode", None) else None,
        "train.epochs": args.epochs, "train.batch_size": args.batch, "train.lr": args.lr,
        "train.hidden": args.hidden,
        "prep.k": args.k, "prep.near_radius": args.near_radius, "prep.per_ray": args.per_ray,
        "prep.near_count": args.near_count, "prep.near_band": args.near_band,
        "prep.empty_res": args.empty_res, "prep.max_empty": args.max_empty,
        "prep.estimate_normals": args.estimate_normals, **_weights(args),
    }


def _load_inputs(inp: Path, sensors_path: Path | None):
    for path in (inp, sensors_path):
        if path is not None and not path.exists():
            raise FileNotFoundError(f"input not found: {path}")
    cloud = read_point_cloud(inp)
    sensors = read_sensors(sensors_path) if sensors_path is not None else None
    return cloud, sensors


def _loss_rows(reports):
    return [{"epoch": r.epoch, "Lg": r.grad, "Ls": r.surface, "Le": r.empty, "Ln": r.normal,
             "L": r.total, "steps": r.steps, "wall_time": r.wall_time} for r in reports]


def cmd_reconstruct(args) -> int:
    cfg = _config(args, _train_overrides(args))
    cloud, sensors = _load_inputs(args.inp, args.sensors)
    tf_path = args.transform or args.out_checkpoint.with_suffix(".transform.json")
    report_path = args.report or args.out_checkpoint.with_suffix(".report.json")
    status, code = "ok", EXIT_OK
    try:
        rec = pipeline.reconstruct(cloud, sensors, cfg)
        field_, tf, reports, stats = rec.field, rec.transform, rec.reports, rec.stats
    except NumericalError as exc:
        # last good parameters are attached to the error
        field_, reports = exc.field, exc.reports
        tf, stats = exc.transform, {}
        status, code = f"numerical failure: {exc}", EXIT_NUMERIC
        log.error("%s; saving last good checkpoint", exc)
    save_checkpoint(field_, args.out_checkpoint)
    C.write_json(tf.to_dict(), tf_path)
    C.write_json({"provenance": C.provenance(cfg), "status": status, "config": cfg.to_dict(),
                  "stats": stats, "epochs": _loss_rows(reports)}, report_path)
    return code


def _extract_overrides(args) -> dict:
    return {"extract.resolution": args.res, "extract.iso": args.iso}


def cmd_extract(args) -> int:
    cfg = _config(args, _extract_overrides(args))
    field_ = load_checkpoint(args.checkpoint)
    mesh = marching_cubes(sample_field_grid(field_, cfg.extract), cfg.extract.iso)
    if args.transform is not None:
        mesh = denormalize_mesh(mesh, read_transform(args.transform))
    if mesh.is_empty:
        log.warning("extracted mesh is empty (iso %g not crossed)", cfg.extract.iso)
    write_mesh(mesh, args.out)
    log.info("extract vertices=%d triangles=%d out=%s", len(mesh.vertices), len(mesh.triangles), args.out)
    return EXIT_OK


def _eval_overrides(args) -> dict:
    return {"eval.samples": args.samples, "eval.resolution": args.res}


def cmd_eval(args) -> int:
    cfg = _config(args, _eval_overrides(args))
    pred, gt = read_mesh(args.pred), read_mesh(args.gt)
    tf = read_transform(args.transform) if args.transform is not None else None
    rep = pipeline.evaluate(pred, gt, cfg, tf)
    C.write_json({"provenance": C.provenance(cfg), "metrics": rep.to_dict(),
                  "config": {"pred": str(args.pred), "gt": str(args.gt), **asdict(cfg.eval)}}, args.out)
    log.info("eval chamfer=%.6g iou=%.6g l2=%.6g", rep.chamfer, rep.iou, rep.l2)
    return EXIT_OK


ABLATION_MODES = ("sdf", "sdf_high_offsurface", "indicator_no_empty", "indicator")


def run_ablation(cloud, sensors, gt, cfg: C.PipelineConfig) -> list[dict]:
    """One row per mode; failures are recorded and the run continues."""
    rows = []
    for mode in ABLATION_MODES:
        row = {"mode": mode, "cd": math.nan, "iou": math.nan, "l2": math.nan, "error": None}
        try:
            mcfg = cfg.replace({"train.mode": mode})
            rec = pipeline.reconstruct(cloud, sensors, mcfg)
            mesh = pipeline.extract(rec.field, mcfg)
            rep = pipeline.evaluate(denormalize_mesh(mesh, rec.transform), gt, mcfg,
                                    rec.transform)
            row.update(cd=rep.chamfer, iou=rep.iou, l2=rep.l2)
        except IndifieldError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            log.error("ablate mode=%s failed: %s", mode, exc)
        log.info("ablate mode=%s cd=%.6g iou=%.6g l2=%.6g", mode, row["cd"], row["iou"], row["l2"])
        rows.append(row)
    return rows


def write_ablation_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "cd", "iou", "l2"])
        for r in rows:
            w.writerow([r["mode"], repr(float(r["cd"])), repr(float(r["iou"])), repr(float(r["l2"]))])


def _ablate_overrides(args) -> dict:
    # every mode is run, so a --mode flag has nothing to select
    overrides = _train_overrides(args)
    overrides.pop("train.mode")
    return overrides


def cmd_ablate(args) -> int:
    cfg = _config(args, _ablate_overrides(args))
    cloud, sensors = _load_inputs(args.inp, args.sensors)
    gt = read_mesh(args.gt)
    rows = run_ablation(cloud, sensors, gt, cfg)
    write_ablation_csv(rows, args.out)
    C.write_json({"provenance": C.provenance(cfg), "config": cfg.to_dict(), "rows": rows},
                 args.out.with_suffix(".json"))
    return EXIT_OK


COMMANDS = {"scan": cmd_scan, "reconstruct": cmd_reconstruct, "extract": cmd_extract,
            "eval": cmd_eval, "ablate": cmd_ablate}
OVERRIDES = {"scan": _scan_overrides, "reconstruct": _train_overrides,
             "extract": _extract_overrides, "eval": _eval_overrides, "ablate": _ablate_overrides}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.DEBUG if args.verbose else logging.INFO, force=True)
    limits = threadpool_limits(args.threads) if args.threads else nullcontext()
    try:
        if args.threads:
            set_threads(args.threads)
        if args.print_config:
            cfg = _config(args, OVERRIDES[args.command](args))
            print(json.dumps({"schema_version": C.SCHEMA_VERSION, **cfg.to_dict()}, indent=2))
            return EXIT_OK
        with limits:
            return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error[{exc.module}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IndifieldError as exc:
        print(f"error[{exc.module}]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_INPUT
    finally:
        set_threads(1)

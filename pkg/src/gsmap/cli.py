"""Command-line entry point: ``gsmap {generate,fit,eval,sweep}``.

Exit codes: 0 ok, 2 I/O error, 3 bad configuration, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .errors import ConfigurationError, DivergenceError, GSMapError
from .fitting import SWEEP_PARAMS, fit_many, sweep
from .gaussian import GaussianMap
from .io import (
    ensure_dir,
    load_map,
    load_scene,
    save_map,
    save_scene,
    vectors_to_geojson,
    write_json,
    write_pgm,
)
from .metrics import evaluate, report_to_json
from .raster import render_element
from .scene import generate_scene

EXIT_OK = 0
EXIT_IO = 2
EXIT_CONFIG = 3
EXIT_DIVERGED = 4

log = logging.getLogger("gsmap")


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read config {path}: {exc.strerror or exc}") from None


def _out_dir(path) -> Path:
    try:
        return ensure_dir(path)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write to {path}: {exc.strerror or exc}") from None


def _load_scene(path):
    try:
        return load_scene(path)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot read scene {path}: {exc.strerror or exc}") from None
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise _Fail(EXIT_CONFIG, f"malformed scene file {path}: {exc}") from None


def cmd_generate(args) -> int:
    cfg = _config(args.config)
    if args.count < 0:
        raise ConfigurationError("--count must be >= 0")
    out = _out_dir(args.out)
    for k in range(args.count):
        spec = dataclasses.replace(cfg.scene, seed=cfg.scene.seed + k)
        scene = generate_scene(spec)
        try:
            save_scene(scene, out / f"scene_{k:04d}.json")
        except OSError as exc:
            raise _Fail(EXIT_IO, f"cannot write scene {k}: {exc.strerror or exc}") from None
    log.info("wrote %d scene(s) to %s", args.count, out)
    return EXIT_OK


def write_fit_outputs(out: Path, fitted: GaussianMap, report, grid, cutoff: float) -> None:
    save_map(fitted, out / "fitted_map.json")
    write_json(out / "report.json", report.to_dict())
    write_json(out / "timing.json", {"wall_time_s": report.wall_time})
    write_json(out / "vectors.json", vectors_to_geojson(fitted))
    for k, e in enumerate(fitted):
        write_pgm(out / f"element_{k:02d}.pgm", render_element(e, grid, cutoff).values)


def cmd_fit(args) -> int:
    cfg = _config(args.config)
    scene = _load_scene(args.scene)
    out = _out_dir(args.out)
    [(fitted, report)] = fit_many([scene], cfg.fit, seeds=[cfg.fit.seed])
    try:
        write_fit_outputs(out, fitted, report, scene.grid, cfg.fit.cutoff)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write outputs: {exc.strerror or exc}") from None
    final = report.final
    log.info("fit done: total %.4g, chamfer %s, hard IoU %s", final["total"], final["chamfer"], final["hard_iou"])
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args.config)
    if len(args.pred) != len(args.gt):
        raise ConfigurationError(f"{len(args.pred)} --pred files for {len(args.gt)} --gt files")
    preds = []
    for p in args.pred:
        try:
            preds.append(load_map(p))
        except OSError as exc:
            raise _Fail(EXIT_IO, f"cannot read prediction {p}: {exc.strerror or exc}") from None
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise _Fail(EXIT_CONFIG, f"malformed prediction file {p}: {exc}") from None
    gts = [_load_scene(g) for g in args.gt]
    result = report_to_json(evaluate(preds, gts, cfg.eval))
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def _parse_values(raw: str, param: str):
    try:
        if param == "n_gaussians":
            return [int(v) for v in raw.split(",") if v.strip()]
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"--values must be a comma-separated list of numbers, got {raw!r}") from None


def cmd_sweep(args) -> int:
    cfg = _config(args.config)
    values = _parse_values(args.values, args.param)
    if not values:
        raise ConfigurationError("--values is empty")
    scene_dir = Path(args.scenes)
    if not scene_dir.is_dir():
        raise _Fail(EXIT_IO, f"scene directory {scene_dir} does not exist")
    scenes = [_load_scene(p) for p in sorted(scene_dir.glob("scene_*.json"))]
    if not scenes:
        raise _Fail(EXIT_IO, f"no scene_*.json files in {scene_dir}")
    rows = sweep(args.param, values, scenes, cfg.fit, cfg.eval)
    out = _out_dir(args.out)
    try:
        write_json(out / "sweep.json", rows)
        with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    except OSError as exc:
        raise _Fail(EXIT_IO, f"cannot write sweep results: {exc.strerror or exc}") from None
    json.dump(rows, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gsmap", description="Gaussian map fitting and evaluation")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write seeded synthetic scenes")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="number of scenes")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a Gaussian map to one scene")
    p.add_argument("--scene", required=True, help="scene JSON written by 'generate'")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="print AP metrics as JSON")
    p.add_argument("--pred", required=True, nargs="+", help="fitted_map.json file(s)")
    p.add_argument("--gt", required=True, nargs="+", help="scene JSON file(s), paired with --pred in order")
    p.add_argument("--config", help="run config JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="fit a scene suite once per parameter value")
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--scenes", required=True, help="directory of scene_*.json files")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--out", default=".", help="directory for sweep.csv and sweep.json")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"gsmap: error: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"gsmap: error: diverged at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigurationError, GSMapError) as exc:
        print(f"gsmap: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``nbvsc {scene gen, run, eval, export}``.

Relative output paths are resolved against ``$NBVSC_OUTPUT_ROOT`` when it is
set. Every subcommand exits 0 on success and 2 with a one-line diagnostic on
bad input (config, scene file or run directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .completion import read_fit_report
from .evaluation import RunReport, emit_report, match_and_score
from .geometry import fibonacci_surface_samples
from .pipeline import RunConfig, run_experiment
from .ply import read_ply, write_ply
from .planner import PlannerConfig
from .scene import SceneFormatError, SceneSpec, generate_scene, load_scene, save_scene

OUTPUT_ROOT_ENV = "NBVSC_OUTPUT_ROOT"
EXIT_USAGE = 2

log = logging.getLogger("nbvsc")


class CliError(Exception):
    """User-facing failure; reported without a traceback."""


def resolve_output(path: Optional[str], default: str) -> Path:
    p = Path(path or default)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _planner_flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_planner_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("planner overrides")
    for f in fields(PlannerConfig):
        if isinstance(f.default, tuple):
            g.add_argument(_planner_flag(f.name), type=float, nargs=len(f.default), default=None,
                           metavar=f.name.upper())
        else:
            g.add_argument(_planner_flag(f.name), type=type(f.default), default=None,
                           help=f"default {f.default}")


def _add_scene_spec_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plants", type=int, default=None, help="plant count (default 4)")
    p.add_argument("--fruits-per-plant", type=float, default=None, help="default 3.5")
    p.add_argument("--occlusion", type=float, default=None, help="occlusion density in [0, 1] (default 0.3)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nbvsc", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    sc = sub.add_parser("scene", help="scenario files")
    sc_sub = sc.add_subparsers(dest="scene_command", required=True)
    gen = sc_sub.add_parser("gen", help="generate a scenario JSON file")
    _add_scene_spec_flags(gen)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("-o", "--output", default="scene.json")

    run = sub.add_parser("run", help="run one planning experiment")
    run.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    run.add_argument("--scene", dest="scene_path", help="scenario JSON (otherwise one is generated)")
    _add_scene_spec_flags(run)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--budget", dest="budget_s", type=float, default=None,
                     help="plan length in simulated seconds (default 120)")
    run.add_argument("--max-iterations", type=int, default=None)
    run.add_argument("--camera-speed", type=float, default=None, help="m/s (default 0.1)")
    run.add_argument("--n-samples", type=int, default=None)
    run.add_argument("--no-noise", dest="noise", action="store_false", default=None)
    run.add_argument("--timing-baseline", action="store_true", default=None,
                     help="replace targeted synthesis with the ray-casting sampler")
    run.add_argument("--check-monotonic", action="store_true", default=None,
                     help="fail if the unknown-voxel count ever grows")
    run.add_argument("-o", "--output", dest="output_dir", default=None)
    _add_planner_flags(run)

    ev = sub.add_parser("eval", help="re-score a run directory against its scene")
    ev.add_argument("run_dir")
    ev.add_argument("-o", "--output", default=None, help="report directory (default: run_dir)")

    ex = sub.add_parser("export", help="export point clouds from a run directory as PLY")
    ex.add_argument("run_dir")
    ex.add_argument("what", choices=["fits", "truth", "detected", "surface"])
    ex.add_argument("-o", "--output", required=True)
    ex.add_argument("-n", "--samples", type=int, default=2000, help="surface samples per shape")
    return ap


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(base, dict):
            raise CliError(f"{args.config}: expected a JSON object")
    try:
        cfg = RunConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config: {e}") from e

    for name in ("seed", "budget_s", "max_iterations", "camera_speed", "n_samples",
                 "noise", "timing_baseline", "check_monotonic", "output_dir"):
        v = getattr(args, name)
        if v is not None:
            setattr(cfg, name, v)
    if args.scene_path is not None:
        cfg.scene_path, cfg.scene_spec = args.scene_path, None
    spec_flags = {"plant_count": args.plants, "fruits_per_plant": args.fruits_per_plant,
                  "occlusion_density": args.occlusion}
    if cfg.scene_path is None:
        spec = cfg.scene_spec or SceneSpec(seed=cfg.seed)
        if args.seed is not None:
            spec = replace(spec, seed=args.seed)
        cfg.scene_spec = replace(spec, **{k: v for k, v in spec_flags.items() if v is not None})
    elif any(v is not None for v in spec_flags.values()):
        raise CliError("scene generation flags cannot be combined with --scene")

    overrides = {}
    for f in fields(PlannerConfig):
        v = getattr(args, f.name)
        if v is not None:
            overrides[f.name] = tuple(type(x)(y) for x, y in zip(f.default, v)) if isinstance(f.default, tuple) else v
    if overrides:
        cfg.planner = replace(cfg.planner, **overrides)
    try:
        cfg.validate()
    except ValueError as e:
        raise CliError(f"invalid config: {e}") from e
    return cfg


def cmd_scene_gen(args) -> int:
    spec = SceneSpec(
        args.plants if args.plants is not None else 4,
        args.fruits_per_plant if args.fruits_per_plant is not None else 3.5,
        args.occlusion if args.occlusion is not None else 0.3,
        args.seed,
    )
    try:
        scene = generate_scene(spec)
    except ValueError as e:
        raise CliError(str(e)) from e
    out = resolve_output(args.output, "scene.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out)
    print(f"wrote {out} ({len(scene.fruits)} fruits, {len(scene.objects)} objects)")
    return 0


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    out = resolve_output(cfg.output_dir, f"runs/seed{cfg.seed}")
    cfg.output_dir = str(out)
    try:
        result = run_experiment(cfg, out)
    except SceneFormatError as e:
        raise CliError(f"{cfg.scene_path}: {e}") from e
    except OSError as e:
        raise CliError(str(e)) from e
    agg = result.report.aggregates()
    print(json.dumps({k: agg[k] for k in ("detected", "n_truth", "mean_acc_v", "chamfer_mm", "iterations",
                                          "plan_length_s", "complete")}))
    print(f"artifacts in {out}")
    return 0 if result.report.complete else 1


def _load_run(run_dir: Path):
    try:
        scene = load_scene(run_dir / "scene.json")
        fits = read_fit_report(run_dir / "fits.csv")
    except FileNotFoundError as e:
        raise CliError(f"{run_dir} is not a run directory: {e.filename} missing") from e
    except (SceneFormatError, ValueError, KeyError) as e:
        raise CliError(f"{run_dir}: {e}") from e
    return scene, fits


def _detected_clouds(run_dir: Path, n: int) -> Optional[List[np.ndarray]]:
    path = run_dir / "clouds" / "detected.ply"
    if not path.exists():
        return None
    pts, labels = read_ply(path)
    return [pts[labels == i] for i in range(n)]


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    scene, fits = _load_run(run_dir)
    truth = scene.fruits
    rows = match_and_score(
        fits, [t.geometry for t in truth], [t.instance_id for t in truth],
        detected_clouds=_detected_clouds(run_dir, len(fits)),
    )
    report = RunReport(rows, len(truth), len(fits))
    prev = run_dir / "report.json"
    if prev.exists():
        old = json.loads(prev.read_text())
        report.iterations = old.get("iterations", 0)
        report.plan_length_s = old.get("plan_length_s", 0.0)
        report.budget_s = old.get("budget_s")
        report.complete = old.get("complete", True)
    out = resolve_output(args.output, str(run_dir)) if args.output else run_dir
    emit_report(report, out)
    agg = report.aggregates()
    print(json.dumps({k: agg[k] for k in ("detected", "n_truth", "mean_acc_v", "chamfer_mm")}))
    return 0


def cmd_export(args) -> int:
    run_dir = Path(args.run_dir)
    out = resolve_output(args.output, "export.ply")
    if args.what in ("detected", "surface"):
        src = run_dir / "clouds" / f"{args.what}.ply"
        if not src.exists():
            raise CliError(f"{src} missing")
        pts, labels = read_ply(src)
    else:
        scene, fits = _load_run(run_dir)
        shapes = fits if args.what == "fits" else [t.geometry for t in scene.fruits]
        parts = [fibonacci_surface_samples(s, args.samples) for s in shapes]
        pts = np.vstack(parts) if parts else np.zeros((0, 3))
        labels = np.repeat(np.arange(len(parts)), args.samples)
    write_ply(out, pts, labels)
    print(f"wrote {out} ({len(pts)} points)")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "eval": cmd_eval, "export": cmd_export}
    try:
        if args.command == "scene":
            return cmd_scene_gen(args)
        return handlers[args.command](args)
    except CliError as e:
        print(f"nbvsc: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

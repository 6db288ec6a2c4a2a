"""The capture -> integrate -> fit -> plan -> move loop and its artifacts."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import scene as scene_mod
from .completion import (
    N_SAMPLES,
    FitRejected,
    MissingSurface,
    ShapeFit,
    estimate_missing_surface,
    fit_superellipsoid,
    write_fit_report,
)
from .evaluation import RunReport, emit_report, match_and_score
from .mapping import BeliefMap, FruitCluster
from .planner import Beliefs, PlannerConfig, PlannerState, Viewpoint, plan_next_view
from .ply import write_ply
from .scene import Scenario, SceneSpec
from .sensor import capture

log = logging.getLogger(__name__)

CAMERA_SPEED = 0.1  # m/s
INACTIVE_REFIT_EVERY = 4
GRID_MARGIN = 0.1
ITERATION_COLUMNS = [
    "iteration", "mode", "n_candidates", "n_discarded_vpd", "chosen_utility",
    "elapsed_s", "n_clusters", "n_unknown", "ox", "oy", "oz", "dx", "dy", "dz",
]


class MonotonicityError(AssertionError):
    """Unknown-voxel count grew between iterations."""


@dataclass
class RunConfig:
    scene_path: Optional[str] = None
    scene_spec: Optional[SceneSpec] = None
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    budget_s: Optional[float] = 120.0
    max_iterations: Optional[int] = None
    seed: int = 0
    output_dir: Optional[str] = None
    noise: bool = True
    timing_baseline: bool = False
    check_monotonic: bool = False
    camera_speed: float = CAMERA_SPEED
    n_samples: int = N_SAMPLES
    start_origin: Optional[tuple] = None
    start_direction: tuple = (0.0, 1.0, 0.0)

    def validate(self) -> None:
        if (self.scene_path is None) == (self.scene_spec is None):
            raise ValueError("exactly one of scene_path / scene_spec must be given")
        if self.budget_s is None and self.max_iterations is None:
            raise ValueError("a budget (seconds or iterations) is required")
        if self.budget_s is not None and self.budget_s <= 0:
            raise ValueError("budget must be positive")
        if self.max_iterations is not None and self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(d.get("scene_spec"), dict):
            d["scene_spec"] = SceneSpec(**d["scene_spec"])
        if isinstance(d.get("planner"), dict):
            d["planner"] = PlannerConfig(**d["planner"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    scene: Scenario
    report: RunReport
    fits: List[ShapeFit]
    clusters: List[FruitCluster]
    log: List[dict]
    planning_ms: List[float]
    viewpoints: List[Viewpoint]
    unknown_counts: List[int]
    belief: BeliefMap


class FitCache:
    """Step-scheduled fitting: active clusters every iteration, inactive every 4th."""

    def __init__(self):
        self._fits: List[ShapeFit] = []

    def _nearest(self, c: np.ndarray, tol: float = 0.01) -> Optional[ShapeFit]:
        best, bd = None, tol
        for f in self._fits:
            d = float(np.linalg.norm(f.cluster.centroid_ls - c))
            if d < bd:
                best, bd = f, d
        return best

    def update(self, clusters: List[FruitCluster], iteration: int, refit_all: bool = False) -> List[Optional[ShapeFit]]:
        out: List[Optional[ShapeFit]] = []
        for cl in clusters:
            prev = self._nearest(cl.centroid_ls)
            due = refit_all or cl.active or iteration % INACTIVE_REFIT_EVERY == 0
            if prev is not None and not due:
                out.append(prev)
                continue
            try:
                out.append(fit_superellipsoid(cl))
            except FitRejected as e:
                log.debug("cluster rejected: %s", e)
                out.append(None)
        self._fits = [f for f in out if f is not None]
        return out


def _start_pose(scene: Scenario, cfg: RunConfig):
    if cfg.start_origin is not None:
        return np.array(cfg.start_origin, dtype=float), np.array(cfg.start_direction, dtype=float)
    ws = scene.workspace
    fruit_z = np.mean([f.center[2] for f in scene.fruit_shapes])
    o = np.array([ws.center[0], ws.lo[1] + 0.15, fruit_z])
    return o, np.array([0.0, 1.0, 0.0])


def load_run_scene(cfg: RunConfig) -> Scenario:
    if cfg.scene_path is not None:
        return scene_mod.load_scene(cfg.scene_path)
    return scene_mod.generate_scene(cfg.scene_spec)


def run_loop(cfg: RunConfig, scene: Optional[Scenario] = None) -> RunResult:
    """Run one experiment in memory (no files written)."""
    cfg.validate()
    scene = scene or load_run_scene(cfg)
    belief = BeliefMap(scene.bounds(GRID_MARGIN))
    state = PlannerState(cfg.planner, cfg.seed)
    cam_o, cam_d = _start_pose(scene, cfg)
    state.record(Viewpoint(cam_o, cam_d, "exploration"))
    cache = FitCache()
    rows: List[dict] = []
    timings: List[float] = []
    unknown: List[int] = [belief.occupancy.n_unknown()]
    elapsed = 0.0
    it = 0
    complete = True
    try:
        while True:
            cloud = capture(scene, cam_o, cam_d, noise=cfg.noise, seed=cfg.seed * 1_000_003 + it)
            belief.integrate_observation(cloud)
            n_unk = belief.occupancy.n_unknown()
            if cfg.check_monotonic and n_unk > unknown[-1]:
                raise MonotonicityError(f"unknown voxels grew {unknown[-1]} -> {n_unk} at iteration {it}")
            unknown.append(n_unk)

            clusters = belief.clusters()
            fits = cache.update(clusters, it)
            missing: List[MissingSurface] = []
            for k, (cl, f) in enumerate(zip(clusters, fits)):
                if cl.active and f is not None:
                    ms = estimate_missing_surface(f, cl.points, cfg.n_samples, cfg.planner.n_min, shape_id=k)
                    if ms is not None:
                        missing.append(ms)

            beliefs = Beliefs(belief.occupancy, missing, cam_o, scene.workspace, clusters)
            plan = plan_next_view(beliefs, state, baseline=cfg.timing_baseline)
            timings.append(plan.planning_ms)
            vp = plan.viewpoint
            row = {
                "iteration": it,
                "mode": plan.mode,
                "n_candidates": plan.n_candidates,
                "n_discarded_vpd": plan.n_discarded_vpd,
                "chosen_utility": vp.utility if vp is not None else None,
                "elapsed_s": elapsed,
                "n_clusters": len(clusters),
                "n_unknown": n_unk,
            }
            for key, val in zip(("ox", "oy", "oz", "dx", "dy", "dz"),
                                [*(vp.origin if vp is not None else [None] * 3),
                                 *(vp.direction if vp is not None else [None] * 3)]):
                row[key] = val
            rows.append(row)
            if vp is None:
                break
            move = float(np.linalg.norm(vp.origin - cam_o)) / cfg.camera_speed
            if cfg.budget_s is not None and elapsed + move > cfg.budget_s:
                break
            elapsed += move
            cam_o, cam_d = vp.origin, vp.direction
            state.record(vp)
            it += 1
            if cfg.max_iterations is not None and it >= cfg.max_iterations:
                # Integrate the last executed view before stopping.
                belief.integrate_observation(
                    capture(scene, cam_o, cam_d, noise=cfg.noise, seed=cfg.seed * 1_000_003 + it)
                )
                break
    except KeyboardInterrupt:
        complete = False

    clusters = belief.clusters()
    fits = cache.update(clusters, it, refit_all=True)
    good = [(c, f) for c, f in zip(clusters, fits) if f is not None]
    clusters = [c for c, _ in good]
    fits = [f for _, f in good]
    truth = scene.fruits
    fruit_rows = match_and_score(
        [f.shape for f in fits], [t.geometry for t in truth], [t.instance_id for t in truth],
        detected_clouds=[c.points for c in clusters],
    )
    report = RunReport(
        fruit_rows, len(truth), len(fits), iterations=it, plan_length_s=elapsed,
        budget_s=cfg.budget_s, complete=complete, planning_ms=timings,
    )
    return RunResult(scene, report, fits, clusters, rows, timings, state.past_viewpoints, unknown, belief)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_iterations(path, rows: List[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ITERATION_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in ITERATION_COLUMNS])


def write_artifacts(result: RunResult, cfg: RunConfig, outdir) -> Path:
    """Write the stable output layout into ``outdir``."""
    out = Path(outdir)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    scene_mod.save_scene(result.scene, out / "scene.json")
    cfg_d = cfg.to_dict()
    (out / "config.json").write_text(json.dumps(cfg_d, indent=2, default=list) + "\n")
    write_iterations(out / "iterations.csv", result.log)
    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "planning_ms"])
        for i, t in enumerate(result.planning_ms):
            w.writerow([i, repr(float(t))])
    n_missing = []
    for f, c in zip(result.fits, result.clusters):
        ms = estimate_missing_surface(f, c.points, cfg.n_samples, cfg.planner.n_min)
        n_missing.append(0 if ms is None else ms.n_missing)
    write_fit_report(out / "fits.csv", result.fits, n_missing)
    emit_report(result.report, out)
    pts = [c.points for c in result.clusters]
    labels = [np.full(len(p), i) for i, p in enumerate(pts)]
    write_ply(
        out / "clouds" / "detected.ply",
        np.vstack(pts) if pts else np.zeros((0, 3)),
        np.concatenate(labels) if labels else np.zeros(0, int),
    )
    surf = result.belief.surface.points
    write_ply(out / "clouds" / "surface.ply", surf, np.zeros(len(surf), int))
    (out / "occupancy.json").write_text(json.dumps(result.belief.occupancy.counts(), indent=2) + "\n")
    return out


def run_experiment(cfg: RunConfig, outdir=None) -> RunResult:
    """Run the loop and write all artifacts; returns the in-memory result."""
    outdir = outdir or cfg.output_dir
    if outdir is None:
        raise ValueError("an output directory is required")
    result = run_loop(cfg)
    write_artifacts(result, cfg, outdir)
    return result

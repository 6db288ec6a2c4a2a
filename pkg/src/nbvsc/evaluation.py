"""Scoring a run against ground truth.

Per-fruit CSV columns (``evaluation.csv``)::

    truth_id, matched, fit_index, v_det, v_gt, acc_v, center_error, chamfer_mm

``report.json`` holds the aggregates under ``schema_version`` 1; wall-clock
statistics go to ``timing.json`` so that reports stay reproducible.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Superellipsoid, fibonacci_surface_samples, volume

MATCH_DISTANCE = 0.10
TRUTH_SAMPLES = 2000
SCHEMA_VERSION = 1


@dataclass
class FruitRow:
    truth_id: int
    matched: bool
    fit_index: Optional[int]
    v_det: Optional[float]
    v_gt: float
    acc_v: Optional[float]
    center_error: Optional[float]
    chamfer_mm: Optional[float] = None


@dataclass
class RunReport:
    rows: List[FruitRow]
    n_truth: int
    n_fits: int
    iterations: int = 0
    plan_length_s: float = 0.0
    budget_s: Optional[float] = None
    complete: bool = True
    planning_ms: List[float] = field(default_factory=list)

    @property
    def detected(self) -> int:
        return sum(r.matched for r in self.rows)

    def aggregates(self) -> dict:
        acc = [r.acc_v for r in self.rows if r.matched]
        ch = [r.chamfer_mm for r in self.rows if r.matched and r.chamfer_mm is not None]
        err = [r.center_error for r in self.rows if r.matched]
        return {
            "schema_version": SCHEMA_VERSION,
            "complete": self.complete,
            "n_truth": self.n_truth,
            "n_fits": self.n_fits,
            "detected": self.detected,
            "mean_acc_v": _mean(acc),
            "stderr_acc_v": _stderr(acc),
            "chamfer_mm": _mean(ch),
            "stderr_chamfer_mm": _stderr(ch),
            "mean_center_error": _mean(err),
            "iterations": self.iterations,
            "plan_length_s": self.plan_length_s,
            "budget_s": self.budget_s,
        }

    def timing(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "n": len(self.planning_ms),
            "mean_planning_ms": _mean(self.planning_ms),
            "stderr_planning_ms": _stderr(self.planning_ms),
        }


def _mean(x: Sequence[float]) -> Optional[float]:
    return float(np.mean(x)) if len(x) else None


def _stderr(x: Sequence[float]) -> Optional[float]:
    if len(x) < 2:
        return None
    return float(np.std(x, ddof=1) / math.sqrt(len(x)))


def volume_accuracy(v_det: float, v_gt: float) -> float:
    """``1 - |V_det - V_gt| / V_gt``, unclamped."""
    return 1.0 - abs(v_det - v_gt) / v_gt


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Symmetric mean nearest-neighbour distance in millimetres (None if a set is empty)."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return None
    dab, _ = cKDTree(b).query(a, k=1)
    dba, _ = cKDTree(a).query(b, k=1)
    return float(1e3 * 0.5 * (dab.mean() + dba.mean()))


def greedy_match(fit_centers: np.ndarray, truth_centers: np.ndarray, cutoff: float = MATCH_DISTANCE):
    """Closest-first one-to-one matching; returns ``{truth_index: fit_index}``."""
    fit_centers = np.asarray(fit_centers, dtype=float).reshape(-1, 3)
    truth_centers = np.asarray(truth_centers, dtype=float).reshape(-1, 3)
    if len(fit_centers) == 0 or len(truth_centers) == 0:
        return {}
    d = np.linalg.norm(fit_centers[:, None] - truth_centers[None], axis=2)
    fi, ti = np.nonzero(d < cutoff)
    order = np.lexsort((ti, fi, d[fi, ti]))
    used_f, out = set(), {}
    for k in order:
        f, t = int(fi[k]), int(ti[k])
        if f in used_f or t in out:
            continue
        out[t] = f
        used_f.add(f)
    return out


def match_and_score(
    fit_shapes: Sequence[Superellipsoid],
    truth: Sequence[Superellipsoid],
    truth_ids: Optional[Sequence[int]] = None,
    detected_clouds: Optional[Sequence[np.ndarray]] = None,
    truth_samples: int = TRUTH_SAMPLES,
) -> List[FruitRow]:
    """One row per ground-truth fruit.

    When ``detected_clouds`` (one point set per fit) is given, each matched
    row also carries the Chamfer distance between the fit's observed cloud
    and the true surface.
    """
    truth_ids = list(truth_ids) if truth_ids is not None else list(range(len(truth)))
    m = greedy_match([f.center for f in fit_shapes], [t.center for t in truth])
    rows = []
    for j, t in enumerate(truth):
        v_gt = volume(t)
        if j not in m:
            rows.append(FruitRow(truth_ids[j], False, None, None, v_gt, None, None))
            continue
        i = m[j]
        f = fit_shapes[i]
        v_det = volume(f)
        ch = None
        if detected_clouds is not None:
            ch = chamfer_distance(detected_clouds[i], fibonacci_surface_samples(t, truth_samples))
        rows.append(
            FruitRow(
                truth_ids[j], True, i, v_det, v_gt, volume_accuracy(v_det, v_gt),
                float(np.linalg.norm(np.subtract(f.center, t.center))), ch,
            )
        )
    return rows


CSV_COLUMNS = ["truth_id", "matched", "fit_index", "v_det", "v_gt", "acc_v", "center_error", "chamfer_mm"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def emit_report(report: RunReport, outdir) -> None:
    """Write ``evaluation.csv``, ``report.json`` and ``timing.json`` into ``outdir``."""
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        with open(outdir / "evaluation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in report.rows:
                w.writerow([_fmt(v) for v in asdict(r).values()])
        (outdir / "report.json").write_text(json.dumps(report.aggregates(), indent=2) + "\n")
        (outdir / "timing.json").write_text(json.dumps(report.timing(), indent=2) + "\n")
    except OSError as e:
        raise OSError(f"cannot write report to {outdir}: {e}") from e


def read_rows(path) -> List[FruitRow]:
    """Parse ``evaluation.csv`` back into rows."""

    def opt(s, cast):
        return None if s == "" else cast(s)

    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            rows.append(
                FruitRow(
                    int(d["truth_id"]), d["matched"] == "1", opt(d["fit_index"], int),
                    opt(d["v_det"], float), float(d["v_gt"]), opt(d["acc_v"], float),
                    opt(d["center_error"], float), opt(d["chamfer_mm"], float),
                )
            )
    return rows

"""Shape completion: superellipsoid fitting and missing-surface estimation.

The fit minimises

    sum_i w_i (f(p_i) - 1)^2 + lambda_c * |center - centroid_ls|^2

over center, semi-axes and exponents with a projected Levenberg-Marquardt
iteration, where ``f`` is the graded implicit function of
:mod:`nbvsc.geometry` and ``w_i = 1/N``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Superellipsoid, fibonacci_surface_samples, volume
from .mapping import FruitCluster

log = logging.getLogger(__name__)

AXIS_BOUNDS = (0.02, 0.06)
EXPONENT_BOUNDS = (0.3, 1.9)
CENTER_WEIGHT = 10.0  # lambda_c, per m^2
MAX_ITERATIONS = 100
REL_COST_TOL = 1e-6
MAX_CLUSTER_SPAN = 0.20
LOW_CONFIDENCE_RMS = 0.005
MISSING_RADIUS = 0.015
N_SAMPLES = 100
N_MIN = 10

_LO = np.array([-np.inf] * 3 + [AXIS_BOUNDS[0]] * 3 + [EXPONENT_BOUNDS[0]] * 2)
_HI = np.array([np.inf] * 3 + [AXIS_BOUNDS[1]] * 3 + [EXPONENT_BOUNDS[1]] * 2)


class FitRejected(ValueError):
    """Cluster cannot be a single fruit (e.g. spans more than 20 cm)."""


@dataclass
class ShapeFit:
    shape: Superellipsoid
    residual_rms: float  # radial RMS distance to the surface (m)
    cluster: Optional[FruitCluster] = None
    iterations: int = 0
    converged: bool = True
    low_confidence: bool = False  # not converged, radial RMS > 5 mm, or a semi-axis at a bound

    @property
    def center(self) -> np.ndarray:
        return self.shape.center_array

    @property
    def volume(self) -> float:
        return volume(self.shape)


@dataclass
class MissingSurface:
    points: np.ndarray
    c_missing: np.ndarray
    c_complete: np.ndarray
    shape: Superellipsoid
    shape_id: int = 0

    @property
    def n_missing(self) -> int:
        return len(self.points)


def implicit_and_jacobian(q: np.ndarray, theta: np.ndarray):
    """Implicit value and its Jacobian w.r.t. (cx, cy, cz, a, b, c, e1, e2).

    ``q`` are points relative to the fitting frame origin; ``theta[:3]`` is
    the center in that frame.
    """
    a, b, c, e1, e2 = theta[3:]
    d = q - theta[:3]
    sgn = np.sign(d)
    X = np.abs(d[:, 0]) / a
    Y = np.abs(d[:, 1]) / b
    Z = np.abs(d[:, 2]) / c
    with np.errstate(divide="ignore", invalid="ignore"):
        lX = np.where(X > 0, np.log(X), 0.0)
        lY = np.where(Y > 0, np.log(Y), 0.0)
        lZ = np.where(Z > 0, np.log(Z), 0.0)
        Xp = np.exp(2 / e2 * lX) * (X > 0)
        Yp = np.exp(2 / e2 * lY) * (Y > 0)
        w = np.exp(2 / e1 * lZ) * (Z > 0)
        u = Xp + Yp
        lu = np.where(u > 0, np.log(u), 0.0)
        v = np.exp(e2 / e1 * lu) * (u > 0)
        F = v + w
        lF = np.where(F > 0, np.log(F), 0.0)
        f = np.exp(e1 * lF) * (F > 0)
        dfdF = np.where(F > 0, e1 * f / np.where(F > 0, F, 1.0), 0.0)
        u_pow = np.where(u > 0, v / np.where(u > 0, u, 1.0), 0.0)  # u^(e2/e1 - 1)

        dF_da = -(2 / (e1 * a)) * u_pow * Xp
        dF_db = -(2 / (e1 * b)) * u_pow * Yp
        dF_dc = -(2 / (e1 * c)) * w
        # d|d_x|/dcx = -sign; X^(2/e2 - 1) = Xp / X
        dF_dx = (2 / e1) * u_pow * np.where(X > 0, Xp / np.where(X > 0, X, 1.0), 0.0) / a
        dF_dy = (2 / e1) * u_pow * np.where(Y > 0, Yp / np.where(Y > 0, Y, 1.0), 0.0) / b
        dF_dz = (2 / e1) * np.where(Z > 0, w / np.where(Z > 0, Z, 1.0), 0.0) / c
        dF_de1 = -v * lu * e2 / e1**2 - w * lZ * 2 / e1**2
        du_de2 = -(2 / e2**2) * (Xp * lX + Yp * lY)
        dF_de2 = v * (lu / e1) + (e2 / e1) * u_pow * du_de2
        df_de1 = f * lF + dfdF * dF_de1

    J = np.empty((len(q), 8))
    J[:, 0] = -dfdF * dF_dx * sgn[:, 0]
    J[:, 1] = -dfdF * dF_dy * sgn[:, 1]
    J[:, 2] = -dfdF * dF_dz * sgn[:, 2]
    J[:, 3] = dfdF * dF_da
    J[:, 4] = dfdF * dF_db
    J[:, 5] = dfdF * dF_dc
    J[:, 6] = df_de1
    J[:, 7] = dfdF * dF_de2
    return f, np.nan_to_num(J, nan=0.0, posinf=0.0, neginf=0.0)


def _residuals(q, theta, anchor, sw, sl):
    f, J = implicit_and_jacobian(q, theta)
    r = np.concatenate([sw * (f - 1.0), sl * (theta[:3] - anchor)])
    Jr = np.zeros((len(q) + 3, 8))
    Jr[: len(q)] = sw * J
    Jr[len(q) :, :3] = sl * np.eye(3)
    return r, Jr


def radial_rms(se: Superellipsoid, points: np.ndarray) -> float:
    """RMS distance from points to the surface measured along rays from the center."""
    from .geometry import implicit_value

    d = np.linalg.norm(points - se.center_array, axis=1)
    f = np.maximum(implicit_value(se, points), 1e-300)
    return float(np.sqrt(np.mean((d * (1.0 - f**-0.5)) ** 2)))


def fit_superellipsoid(
    cluster: FruitCluster,
    center_weight: float = CENTER_WEIGHT,
    max_iterations: int = MAX_ITERATIONS,
    init: Optional[Superellipsoid] = None,
) -> ShapeFit:
    """Fit an axis-aligned superellipsoid to a fruit cluster.

    Starts from the cluster's normal-line centroid with a sphere of the mean
    point distance (or from ``init`` when warm-starting). Parameters are
    clamped to the semi-axis and exponent bounds after every step.

    Raises
    ------
    FitRejected
        If the cluster spans more than 20 cm (likely merged fruits).
    """
    pts = np.asarray(cluster.points, dtype=float)
    if len(pts) == 0:
        raise FitRejected("empty cluster")
    span = np.ptp(pts, axis=0).max()
    if span > MAX_CLUSTER_SPAN:
        raise FitRejected(f"cluster spans {span:.3f} m (> {MAX_CLUSTER_SPAN} m)")

    anchor_w = np.asarray(cluster.centroid_ls, dtype=float)
    # Work relative to the anchor so the result is translation-equivariant.
    q = pts - anchor_w
    anchor = np.zeros(3)
    if init is None:
        r0 = float(np.mean(np.linalg.norm(q, axis=1)))
        theta = np.array([0.0, 0.0, 0.0, r0, r0, r0, 1.0, 1.0])
    else:
        theta = np.array([*(np.array(init.center) - anchor_w), init.a, init.b, init.c, init.e1, init.e2])
    theta = np.clip(theta, _LO, _HI)

    sw = 1.0 / np.sqrt(len(q))
    sl = np.sqrt(center_weight)
    r, J = _residuals(q, theta, anchor, sw, sl)
    cost = 0.5 * r @ r
    mu, nu = 1e-3, 2.0
    converged = False
    it = 0
    for it in range(1, max_iterations + 1):
        A = J.T @ J
        g = J.T @ r
        D = np.maximum(np.diag(A), 1e-12)
        stepped = False
        while mu < 1e16:
            try:
                delta = np.linalg.solve(A + mu * np.diag(D), -g)
            except np.linalg.LinAlgError:
                mu *= nu
                nu *= 2
                continue
            cand = np.clip(theta + delta, _LO, _HI)
            step = cand - theta
            r_new, J_new = _residuals(q, cand, anchor, sw, sl)
            cost_new = 0.5 * r_new @ r_new
            pred = -(g @ step + 0.5 * step @ A @ step)
            rho = (cost - cost_new) / pred if pred > 0 else -1.0
            if cost_new < cost and rho > 0:
                mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                stepped = True
                break
            mu *= nu
            nu *= 2.0
        if not stepped:
            # No descent direction left: at a (possibly bound-constrained) minimum.
            converged = True
            break
        rel = (cost - cost_new) / max(cost, 1e-300)
        theta, r, J, cost = cand, r_new, J_new, cost_new
        if rel < REL_COST_TOL or cost < 1e-28:
            converged = True
            break

    shape = Superellipsoid(tuple(theta[:3] + anchor_w), *theta[3:])
    rms = radial_rms(shape, pts)
    pinned = bool(np.any(np.isclose(theta[3:6], AXIS_BOUNDS[0]) | np.isclose(theta[3:6], AXIS_BOUNDS[1])))
    low = (not converged) or rms > LOW_CONFIDENCE_RMS or pinned
    if not converged:
        log.debug("fit did not converge in %d iterations", max_iterations)
    return ShapeFit(shape, rms, cluster, it, converged, low)


def estimate_missing_surface(
    fit: ShapeFit,
    observed: np.ndarray,
    n_samples: int = N_SAMPLES,
    n_min: int = N_MIN,
    radius: float = MISSING_RADIUS,
    shape_id: int = 0,
) -> Optional[MissingSurface]:
    """Surface samples of the fitted shape with no observed point within ``radius``.

    Returns None when fewer than ``n_min`` samples survive, i.e. the fruit is
    considered sufficiently covered.
    """
    if not n_samples >= n_min >= 1:
        raise ValueError("require n_samples >= n_min >= 1")
    samples = fibonacci_surface_samples(fit.shape, n_samples)
    observed = np.asarray(observed, dtype=float).reshape(-1, 3)
    if len(observed):
        dist, _ = cKDTree(observed).query(samples, k=1)
        samples = samples[dist >= radius]
    if len(samples) < n_min:
        return None
    return MissingSurface(samples, samples.mean(axis=0), fit.center, fit.shape, shape_id)


FIT_COLUMNS = ["cluster_id", "cx", "cy", "cz", "a", "b", "c", "e1", "e2", "residual_rms", "volume", "n_missing"]


def write_fit_report(path, fits: Sequence[ShapeFit], n_missing: Iterable[int]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIT_COLUMNS)
        for i, (f, nm) in enumerate(zip(fits, n_missing)):
            s = f.shape
            w.writerow([i, *(repr(float(v)) for v in (*s.center, s.a, s.b, s.c, s.e1, s.e2, f.residual_rms, f.volume)), nm])


def read_fit_report(path) -> List[Superellipsoid]:
    """Fitted shapes from a CSV written by :func:`write_fit_report`, in row order."""
    shapes = []
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            v = {k: float(row[k]) for k in FIT_COLUMNS[1:9]}
            shapes.append(Superellipsoid((v["cx"], v["cy"], v["cz"]), v["a"], v["b"], v["c"], v["e1"], v["e2"]))
    return shapes

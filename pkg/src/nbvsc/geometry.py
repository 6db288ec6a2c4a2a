"""Superellipsoid analytics, Fibonacci sphere sampling and ray intersection.

All functions accept a single point ``(3,)`` or a batch ``(N, 3)`` where that
makes sense and never mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.special import beta

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
BRACKET_STEP = 1e-3  # max spacing of the bracket scan (m)
BISECT_TOL = 1e-7  # bracket width at which bisection stops (m)

Vec3 = Tuple[float, float, float]


def quat_to_matrix(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; normalises first."""
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Superellipsoid:
    """Barr superellipsoid with semi-axes ``a, b, c`` and exponents ``e1, e2``.

    ``e1`` shapes the meridian (z) profile, ``e2`` the horizontal cross
    section. ``orientation`` is a (w, x, y, z) quaternion mapping shape frame
    to world frame.
    """

    center: Vec3
    a: float
    b: float
    c: float
    e1: float = 1.0
    e2: float = 1.0
    orientation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "orientation", tuple(float(v) for v in self.orientation))
        for name in ("a", "b", "c", "e1", "e2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if min(self.a, self.b, self.c) <= 0:
            raise ValueError("non-positive semi-axis")
        if not (0 < self.e1 <= 2 and 0 < self.e2 <= 2):
            raise ValueError(f"exponents must lie in (0, 2], got e1={self.e1}, e2={self.e2}")

    @property
    def center_array(self) -> np.ndarray:
        return np.array(self.center)

    @property
    def axes(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    @property
    def is_axis_aligned(self) -> bool:
        return self.orientation == (1.0, 0.0, 0.0, 0.0)

    def rotation(self) -> np.ndarray:
        return np.eye(3) if self.is_axis_aligned else quat_to_matrix(self.orientation)

    def to_local(self, p: np.ndarray) -> np.ndarray:
        """World points -> shape frame."""
        d = np.asarray(p, dtype=float) - self.center_array
        return d if self.is_axis_aligned else d @ self.rotation()

    def to_world_dirs(self, d: np.ndarray) -> np.ndarray:
        return d if self.is_axis_aligned else d @ self.rotation().T

    def bounding_radius(self) -> float:
        """Radius of a sphere about ``center`` that contains the whole shape.

        Each exponent below 1 pushes the corners outwards by at most
        ``2 ** ((1 - e) / 2)``.
        """
        grow = max(1.0, 2 ** ((1 - self.e1) / 2)) * max(1.0, 2 ** ((1 - self.e2) / 2))
        return max(self.a, self.b, self.c) * min(grow, math.sqrt(3.0))

    def scaled(self, s: float) -> "Superellipsoid":
        return Superellipsoid(
            self.center, self.a * s, self.b * s, self.c * s, self.e1, self.e2, self.orientation
        )

    def translated(self, t: Sequence[float]) -> "Superellipsoid":
        return Superellipsoid(
            tuple(np.add(self.center, t)), self.a, self.b, self.c, self.e1, self.e2, self.orientation
        )


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        n = np.linalg.norm(d)
        if n == 0 or not np.isfinite(n):
            raise ValueError("ray direction must be a non-zero finite vector")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def _local_implicit(se: Superellipsoid, q: np.ndarray) -> np.ndarray:
    """Implicit value for points already expressed in the shape frame."""
    x = np.abs(q[..., 0] / se.a)
    y = np.abs(q[..., 1] / se.b)
    z = np.abs(q[..., 2] / se.c)
    xy = x ** (2.0 / se.e2) + y ** (2.0 / se.e2)
    inner = xy ** (se.e2 / se.e1) + z ** (2.0 / se.e1)
    return inner ** se.e1


def implicit_value(se: Superellipsoid, p) -> np.ndarray | float:
    """Graded inside-outside function: <1 inside, 1 on the surface, >1 outside.

    ``f = ((|x/a|^(2/e2) + |y/b|^(2/e2))^(e2/e1) + |z/c|^(2/e1))^e1`` evaluated
    in the shape frame. Scales quadratically along rays from the center,
    i.e. ``f(center + t*d) = t**2 * f(center + d)``.
    """
    q = se.to_local(p)
    out = _local_implicit(se, q)
    return float(out) if np.ndim(out) == 0 else out


def implicit_gradient(se: Superellipsoid, p) -> np.ndarray:
    """World-frame gradient of :func:`implicit_value`."""
    q = np.atleast_2d(se.to_local(p))
    sx, sy, sz = np.sign(q[:, 0]), np.sign(q[:, 1]), np.sign(q[:, 2])
    x = np.abs(q[:, 0] / se.a)
    y = np.abs(q[:, 1] / se.b)
    z = np.abs(q[:, 2] / se.c)
    xy = x ** (2.0 / se.e2) + y ** (2.0 / se.e2)
    inner = xy ** (se.e2 / se.e1) + z ** (2.0 / se.e1)
    outer = se.e1 * inner ** (se.e1 - 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        gxy = np.where(xy > 0, xy ** (se.e2 / se.e1 - 1.0), 0.0)
        gx = (2.0 / se.e1) * gxy * np.where(x > 0, x ** (2.0 / se.e2 - 1.0), 0.0) * sx / se.a
        gy = (2.0 / se.e1) * gxy * np.where(y > 0, y ** (2.0 / se.e2 - 1.0), 0.0) * sy / se.b
        gz = (2.0 / se.e1) * np.where(z > 0, z ** (2.0 / se.e1 - 1.0), 0.0) * sz / se.c
    g = np.stack([gx, gy, gz], axis=1) * outer[:, None]
    g = np.nan_to_num(g, nan=0.0, posinf=0.0, neginf=0.0)
    g = se.to_world_dirs(g)
    return g[0] if np.ndim(p) == 1 else g


def volume(se: Superellipsoid) -> float:
    """Closed-form enclosed volume ``2abc e1 e2 B(e1/2 + 1, e1) B(e2/2, e2/2)``."""
    return float(
        2.0 * se.a * se.b * se.c * se.e1 * se.e2
        * beta(se.e1 / 2.0 + 1.0, se.e1)
        * beta(se.e2 / 2.0, se.e2 / 2.0)
    )


def fibonacci_directions(n: int) -> np.ndarray:
    """``n`` unit vectors on the Fibonacci lattice (deterministic)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    i = np.arange(n, dtype=float)
    z = 1.0 - 2.0 * (i + 0.5) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    phi = i * GOLDEN_ANGLE
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def fibonacci_surface_samples(se: Superellipsoid, n: int) -> np.ndarray:
    """Project the ``n``-point Fibonacci sphere radially onto the surface.

    The radial root of ``f(center + t*d) = 1`` is ``t = f(center + d) ** -0.5``
    because the implicit function is homogeneous of degree two along rays.
    """
    d = fibonacci_directions(n)
    t = _local_implicit(se, d) ** -0.5
    return se.center_array + se.to_world_dirs(d * t[:, None])


def _box_interval(o: np.ndarray, d: np.ndarray, half: np.ndarray):
    """Slab test of rays (shape frame) against the box ``[-half, half]``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    # Axis-parallel rays: inside the slab means unconstrained, outside means miss.
    par = d == 0
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    return lo.max(axis=1), hi.min(axis=1)


def intersect_rays(
    se: Superellipsoid,
    origins: np.ndarray,
    dirs: np.ndarray,
    t_max: float | np.ndarray,
    step: float = BRACKET_STEP,
) -> np.ndarray:
    """Batched first-crossing distance of rays with the surface.

    Returns an array of ``t`` values with ``np.inf`` marking misses. Rays are
    pruned by the bounding sphere and then clipped to the shape's box before
    a fixed-step sign scan and bisection.
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    n = len(origins)
    out = np.full(n, np.inf)
    if n == 0:
        return out
    tmax = np.broadcast_to(np.asarray(t_max, dtype=float), (n,))

    # Bounding sphere prune.
    oc = origins - se.center_array
    b = np.einsum("ij,ij->i", oc, dirs)
    cc = np.einsum("ij,ij->i", oc, oc) - se.bounding_radius() ** 2
    disc = b * b - cc
    cand = np.nonzero(disc >= 0)[0]
    if len(cand) == 0:
        return out
    sq = np.sqrt(disc[cand])
    s_lo = -b[cand] - sq
    s_hi = -b[cand] + sq

    lo_o = se.to_local(origins[cand])
    lo_d = dirs[cand] if se.is_axis_aligned else dirs[cand] @ se.rotation()
    b_lo, b_hi = _box_interval(lo_o, lo_d, se.axes)
    # Pad so the scan starts strictly outside when the bound is tight.
    t0 = np.maximum(np.maximum(s_lo, b_lo) - step, 0.0)
    t1 = np.minimum(np.minimum(s_hi, b_hi) + step, tmax[cand])
    keep = t1 > t0
    if not keep.any():
        return out
    cand, t0, t1, lo_o, lo_d = cand[keep], t0[keep], t1[keep], lo_o[keep], lo_d[keep]

    n_samp = int(np.ceil((t1 - t0).max() / step)) + 1
    n_samp = max(n_samp, 2)
    frac = np.linspace(0.0, 1.0, n_samp)
    ts = t0[:, None] + (t1 - t0)[:, None] * frac[None, :]
    pts = lo_o[:, None, :] + ts[..., None] * lo_d[:, None, :]
    sign = np.sign(_local_implicit(se, pts) - 1.0)
    first = sign[:, :1]
    changed = (sign != first) & (sign != 0)
    on_surface = sign == 0
    flip = changed | on_surface
    has = flip.any(axis=1)
    if not has.any():
        return out
    rows = np.nonzero(has)[0]
    k = flip[rows].argmax(axis=1)
    exact = on_surface[rows, k]
    hi = ts[rows, k]
    lo = np.where(k > 0, ts[rows, np.maximum(k - 1, 0)], hi)
    s0 = first[rows, 0]
    o_r, d_r = lo_o[rows], lo_d[rows]
    todo = ~exact & (hi - lo > BISECT_TOL)
    while todo.any():
        mid = 0.5 * (lo + hi)
        fm = np.sign(_local_implicit(se, o_r + mid[:, None] * d_r) - 1.0)
        same = fm == s0
        lo = np.where(todo & same, mid, lo)
        hi = np.where(todo & ~same, mid, hi)
        todo = ~exact & (hi - lo > BISECT_TOL)
    t_hit = np.where(exact, hi, 0.5 * (lo + hi))
    valid = t_hit > 0
    out[cand[rows[valid]]] = t_hit[valid]
    return out


def ray_intersect(ray: Ray, se: Superellipsoid, t_max: float) -> Optional[float]:
    """Smallest ``t`` in ``(0, t_max]`` where the ray meets the surface, else None."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    t = intersect_rays(se, ray.origin[None], ray.direction[None], t_max)[0]
    return None if not np.isfinite(t) else float(t)


@dataclass(frozen=True)
class Disc:
    """Opaque planar disc (leaf occluder)."""

    center: Vec3
    normal: Vec3
    radius: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        nn = np.linalg.norm(n)
        if nn == 0:
            raise ValueError("disc normal must be non-zero")
        if self.radius <= 0:
            raise ValueError("non-positive disc radius")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "normal", tuple(float(v) for v in n / nn))
        object.__setattr__(self, "radius", float(self.radius))

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n = np.array(self.normal)
        c = np.array(self.center)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((c - origins) @ n) / denom
        hit = origins + t[:, None] * dirs
        ok = (np.abs(denom) > 1e-12) & (t > 0)
        ok &= np.einsum("ij,ij->i", hit - c, hit - c) <= self.radius**2
        return np.where(ok, t, np.inf)

    def normals(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.array(self.normal), points.shape)

    def distance(self, p: np.ndarray) -> float:
        """Euclidean distance from a point to the closed disc."""
        n = np.array(self.normal)
        d = np.asarray(p, dtype=float) - np.array(self.center)
        h = d @ n
        radial = d - h * n
        r = np.linalg.norm(radial)
        return float(np.hypot(h, max(r - self.radius, 0.0)))


@dataclass(frozen=True)
class Capsule:
    """Vertical capsule (plant stem) from ``base`` up by ``height``."""

    base: Vec3
    height: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("capsule radius and height must be positive")
        object.__setattr__(self, "base", tuple(float(v) for v in self.base))
        object.__setattr__(self, "height", float(self.height))
        object.__setattr__(self, "radius", float(self.radius))

    def _closest_on_axis(self, p: np.ndarray) -> np.ndarray:
        b = np.array(self.base)
        z = np.clip(p[..., 2] - b[2], 0.0, self.height)
        out = np.broadcast_to(b, p.shape).copy()
        out[..., 2] += z
        return out

    def distance(self, p: np.ndarray) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.linalg.norm(p - self._closest_on_axis(p), axis=-1) - self.radius

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        b = np.array(self.base)
        r2 = self.radius**2
        best = np.full(len(origins), np.inf)
        # Side wall.
        ox = origins[:, :2] - b[:2]
        dx = dirs[:, :2]
        A = np.einsum("ij,ij->i", dx, dx)
        B = np.einsum("ij,ij->i", ox, dx)
        C = np.einsum("ij,ij->i", ox, ox) - r2
        disc = B * B - A * C
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (-B - np.sqrt(np.maximum(disc, 0.0))) / A
        z = origins[:, 2] + t * dirs[:, 2] - b[2]
        ok = (disc >= 0) & (A > 1e-12) & (t > 0) & (z >= 0) & (z <= self.height)
        best = np.where(ok, t, best)
        # End caps.
        for zc in (b[2], b[2] + self.height):
            c = np.array([b[0], b[1], zc])
            oc = origins - c
            Bs = np.einsum("ij,ij->i", oc, dirs)
            Cs = np.einsum("ij,ij->i", oc, oc) - r2
            ds = Bs * Bs - Cs
            ts = -Bs - np.sqrt(np.maximum(ds, 0.0))
            ok = (ds >= 0) & (ts > 0)
            best = np.where(ok & (ts < best), ts, best)
        return best

    def normals(self, points: np.ndarray) -> np.ndarray:
        v = points - self._closest_on_axis(points)
        n = np.linalg.norm(v, axis=1, keepdims=True)
        return v / np.where(n > 0, n, 1.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]``."""

    lo: Vec3
    hi: Vec3

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if any(h <= l for l, h in zip(lo, hi)):
            raise ValueError("degenerate box: every hi must exceed lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, p: np.ndarray) -> np.ndarray | bool:
        p = np.asarray(p, dtype=float)
        out = np.all((p >= self.lo) & (p <= self.hi), axis=-1)
        return bool(out) if out.ndim == 0 else out

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo) + np.array(self.hi))

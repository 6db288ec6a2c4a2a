"""Virtual RGB-D capture against a synthetic scene.

One ray per pixel is cast through a pinhole model. The nearest hit over all
scene objects becomes a point; hits on fruit carry the fruit's instance id,
standing in for a perfect detector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .geometry import Superellipsoid, implicit_gradient, intersect_rays

if TYPE_CHECKING:
    from .scene import Scenario

DEPTH_NOISE_STD = 0.003  # m, along the ray
DROPOUT_PROB = 0.003
SHADOW_ANGLE = math.radians(80.0)
NON_FRUIT = -1


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 160
    height: int = 120
    fx: float = 114.3  # 70 x 55 deg field of view
    fy: float = 114.3
    cx: float = 79.5
    cy: float = 59.5
    max_range: float = 1.5

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must have at least one pixel")

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions in the camera frame (x right, y down, z forward), row-major."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        d = np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1
        ).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@dataclass
class LabeledPointCloud:
    points: np.ndarray  # (N, 3) world frame
    instance_ids: np.ndarray  # (N,) fruit id or NON_FRUIT
    is_fruit: np.ndarray  # (N,) bool, detector output
    view_origin: np.ndarray  # (3,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.instance_ids = np.asarray(self.instance_ids, dtype=np.int64)
        self.is_fruit = np.asarray(self.is_fruit, dtype=bool)
        self.view_origin = np.asarray(self.view_origin, dtype=float)
        if not (len(self.points) == len(self.instance_ids) == len(self.is_fruit)):
            raise ValueError("points and labels must have the same length")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def fruit_points(self) -> np.ndarray:
        return self.points[self.is_fruit]

    @classmethod
    def empty(cls, origin) -> "LabeledPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, int), np.zeros(0, bool), origin)


def camera_rotation(direction) -> np.ndarray:
    """Camera-to-world rotation with columns (right, down, forward).

    The image's up direction follows world +z unless the camera looks
    (almost) vertically, where world +y is used instead.
    """
    f = np.asarray(direction, dtype=float)
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0])
    if abs(f @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=1)


def raycast(scene: "Scenario", origins: np.ndarray, dirs: np.ndarray, t_max: float):
    """Nearest hit over all scene objects.

    Returns ``(t, object_index, normal)`` with ``t = inf`` and index ``-1``
    for misses. Normals are unit vectors facing the incoming ray.
    """
    n = len(dirs)
    best = np.full(n, np.inf)
    which = np.full(n, -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        g = obj.geometry
        if isinstance(g, Superellipsoid):
            t = intersect_rays(g, origins, dirs, t_max)
        else:
            t = g.intersect(origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, k, which)
    best = np.where(best <= t_max, best, np.inf)
    which = np.where(np.isfinite(best), which, -1)

    normals = np.zeros((n, 3))
    for k in np.unique(which[which >= 0]):
        sel = which == k
        g = scene.objects[k].geometry
        pts = origins[sel] + best[sel, None] * dirs[sel]
        if isinstance(g, Superellipsoid):
            nv = implicit_gradient(g, pts)
        else:
            nv = g.normals(pts)
        nv = nv / np.maximum(np.linalg.norm(nv, axis=1, keepdims=True), 1e-300)
        flip = np.einsum("ij,ij->i", nv, dirs[sel]) > 0
        normals[sel] = np.where(flip[:, None], -nv, nv)
    return best, which, normals


def capture(
    scene: "Scenario",
    origin,
    direction,
    intrinsics: CameraIntrinsics | None = None,
    noise: bool = True,
    seed: int = 0,
    label_flip: float = 0.0,
    shadow_angle: float = SHADOW_ANGLE,
) -> LabeledPointCloud:
    """Render one labeled depth frame from ``origin`` looking along ``direction``.

    Pixels whose incidence angle exceeds ``shadow_angle`` are dropped. With
    ``noise`` on, the range along each ray gets N(0, 3 mm) and pixels are
    zeroed with probability 0.003. Output points are in pixel order.
    """
    cam = intrinsics or scene.intrinsics
    origin = np.asarray(origin, dtype=float)
    R = camera_rotation(direction)
    dirs = cam.pixel_rays() @ R.T
    origins = np.broadcast_to(origin, dirs.shape)
    t, which, normals = raycast(scene, origins, dirs, cam.max_range)

    rng = np.random.default_rng(seed)
    # Draw all random numbers for every pixel so outputs do not depend on hit pattern.
    gauss = rng.standard_normal(len(dirs))
    drop_u = rng.random(len(dirs))
    flip_u = rng.random(len(dirs))

    valid = np.isfinite(t)
    cos_inc = -np.einsum("ij,ij->i", normals, dirs)
    valid &= cos_inc >= math.cos(shadow_angle)
    if noise:
        t = t + DEPTH_NOISE_STD * gauss
        valid &= drop_u >= DROPOUT_PROB
        valid &= (t > 0) & (t <= cam.max_range)

    kinds = np.array([o.kind for o in scene.objects] + ["none"])
    ids = np.array([o.instance_id for o in scene.objects] + [NON_FRUIT], dtype=np.int64)
    hit_kind = kinds[which]
    inst = np.where(hit_kind == "fruit", ids[which], NON_FRUIT)
    is_fruit = inst != NON_FRUIT
    if label_flip > 0:
        is_fruit = np.where(flip_u < label_flip, ~is_fruit, is_fruit)

    pts = origin + t[valid, None] * dirs[valid]
    return LabeledPointCloud(pts, inst[valid], is_fruit[valid], origin)

"""Belief state: a 4 mm fruit surface map, a 1 cm tri-state occupancy grid,
and Euclidean clustering of the surface map into fruit clusters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import Box
from .sensor import LabeledPointCloud

UNKNOWN, FREE, OCCUPIED = 0, 1, 2

SURFACE_VOXEL = 0.004
OCCUPANCY_VOXEL = 0.01
CLUSTER_TOLERANCE = 0.01
MIN_CLUSTER_SIZE = 50
MAX_CLUSTER_SIZE = 10_000
NORMAL_RADIUS = 0.015
NORMAL_MAX_NEIGHBORS = 48
N_ACTIVE = 10

_KEY_OFFSET = 1 << 20
_KEY_BITS = 21

# 6-neighbourhood order: top, bottom, left, right, front, back
NEIGHBORS_6 = np.array(
    [[0, 0, 1], [0, 0, -1], [-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0]], dtype=np.int64
)


def _pack(idx: np.ndarray) -> np.ndarray:
    s = (idx + _KEY_OFFSET).astype(np.int64)
    return (s[:, 0] << (2 * _KEY_BITS)) | (s[:, 1] << _KEY_BITS) | s[:, 2]


class SurfaceVoxelGrid:
    """Sparse voxel map holding the running mean of fruit points per voxel."""

    def __init__(self, voxel_size: float = SURFACE_VOXEL):
        self.voxel_size = voxel_size
        self._rows: Dict[int, int] = {}
        self._mean = np.zeros((0, 3))
        self._weight = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def points(self) -> np.ndarray:
        return self._mean.copy()

    @property
    def weights(self) -> np.ndarray:
        return self._weight.copy()

    def voxel_index(self, p: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(p) / self.voxel_size).astype(np.int64)

    def integrate(self, points: np.ndarray) -> None:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            return
        keys = _pack(self.voxel_index(points))
        uniq, inv = np.unique(keys, return_inverse=True)
        sums = np.zeros((len(uniq), 3))
        np.add.at(sums, inv, points)
        counts = np.bincount(inv, minlength=len(uniq))

        rows = np.empty(len(uniq), dtype=np.int64)
        n_old = len(self._rows)
        n_new = 0
        for j, k in enumerate(uniq.tolist()):
            r = self._rows.get(k)
            if r is None:
                r = n_old + n_new
                self._rows[k] = r
                n_new += 1
            rows[j] = r
        if n_new:
            self._mean = np.vstack([self._mean, np.zeros((n_new, 3))])
            self._weight = np.concatenate([self._weight, np.zeros(n_new, dtype=np.int64)])
        w_old = self._weight[rows]
        w_new = w_old + counts
        self._mean[rows] = (self._mean[rows] * w_old[:, None] + sums) / w_new[:, None]
        self._weight[rows] = w_new


class OccupancyGrid:
    """Dense tri-state voxel grid over a bounded region.

    Voxels start UNKNOWN. Integration marks ray voxels FREE and endpoint
    voxels OCCUPIED; an OCCUPIED voxel is never carved back to FREE, and no
    voxel ever returns to UNKNOWN. Queries outside the bounds report UNKNOWN.
    """

    def __init__(self, bounds: Box, voxel_size: float = OCCUPANCY_VOXEL):
        self.voxel_size = voxel_size
        self.origin = np.array(bounds.lo, dtype=float)
        extent = np.array(bounds.hi) - self.origin
        self.shape = tuple(int(np.ceil(e / voxel_size)) for e in extent)
        self.state = np.zeros(self.shape, dtype=np.int8)

    # -- indexing -------------------------------------------------------------
    def voxel_index(self, p: np.ndarray) -> np.ndarray:
        return np.floor((np.asarray(p, dtype=float) - self.origin) / self.voxel_size).astype(np.int64)

    def voxel_center(self, idx: np.ndarray) -> np.ndarray:
        return self.origin + (np.asarray(idx) + 0.5) * self.voxel_size

    def in_bounds(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx)
        return np.all((idx >= 0) & (idx < np.array(self.shape)), axis=-1)

    def state_of_index(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        ok = self.in_bounds(idx)
        out = np.full(len(idx), UNKNOWN, dtype=np.int8)
        i = idx[ok]
        out[ok] = self.state[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def state_at(self, p: np.ndarray) -> np.ndarray:
        return self.state_of_index(self.voxel_index(np.atleast_2d(p)))

    def counts(self) -> Dict[str, int]:
        c = np.bincount(self.state.ravel(), minlength=3)
        return {"unknown": int(c[UNKNOWN]), "free": int(c[FREE]), "occupied": int(c[OCCUPIED])}

    def n_unknown(self) -> int:
        return int(np.count_nonzero(self.state == UNKNOWN))

    # -- updates --------------------------------------------------------------
    def ray_voxels(self, origin: np.ndarray, ends: np.ndarray, step_frac: float = 0.25):
        """Voxel indices traversed by each segment, excluding its endpoint voxel.

        Segments are sampled every ``step_frac`` voxels. Returns the
        concatenated in-bounds indices (duplicates possible).
        """
        ends = np.atleast_2d(ends)
        step = self.voxel_size * step_frac
        vec = ends - origin
        length = np.linalg.norm(vec, axis=1)
        n = np.ceil(length / step).astype(np.int64)
        total = int(n.sum())
        if total == 0:
            return np.zeros((0, 3), dtype=np.int64)
        seg = np.repeat(np.arange(len(ends)), n)
        start = np.cumsum(n) - n
        k = np.arange(total) - np.repeat(start, n)
        frac = k / np.maximum(n[seg], 1)
        pts = origin + vec[seg] * frac[:, None]
        idx = self.voxel_index(pts)
        end_idx = self.voxel_index(ends)[seg]
        keep = np.any(idx != end_idx, axis=1) & self.in_bounds(idx)
        return idx[keep]

    def integrate(self, origin: np.ndarray, points: np.ndarray, chunk: int = 4096) -> None:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            return
        origin = np.asarray(origin, dtype=float)
        flat = self.state.reshape(-1)
        free_keys = []
        for s in range(0, len(points), chunk):
            idx = self.ray_voxels(origin, points[s : s + chunk])
            if len(idx):
                free_keys.append(np.unique(np.ravel_multi_index(idx.T, self.shape)))
        end = self.voxel_index(points)
        end = end[self.in_bounds(end)]
        occ = np.ravel_multi_index(end.T, self.shape) if len(end) else np.zeros(0, np.int64)
        if free_keys:
            fk = np.unique(np.concatenate(free_keys))
            fk = fk[flat[fk] != OCCUPIED]
            flat[fk] = FREE
        flat[occ] = OCCUPIED

    # -- queries used by the planner -------------------------------------------
    def frontier_indices(self) -> np.ndarray:
        """Unknown voxels 6-adjacent to an occupied voxel, in C order."""
        occ = self.state == OCCUPIED
        near = np.zeros_like(occ)
        near[1:] |= occ[:-1]
        near[:-1] |= occ[1:]
        near[:, 1:] |= occ[:, :-1]
        near[:, :-1] |= occ[:, 1:]
        near[:, :, 1:] |= occ[:, :, :-1]
        near[:, :, :-1] |= occ[:, :, 1:]
        return np.argwhere(near & (self.state == UNKNOWN))

    def ray_unknown_fraction(self, origins: np.ndarray, dirs: np.ndarray, length: float) -> np.ndarray:
        """Fraction of unknown voxels among those met by each ray.

        A ray walks from its origin for ``length`` metres and stops after the
        first occupied voxel or when it leaves the grid. Rays that meet no
        voxel score 0.
        """
        origins = np.atleast_2d(origins)
        dirs = np.atleast_2d(dirs)
        step = self.voxel_size * 0.5
        ts = np.arange(0.0, length, step)
        pts = origins[:, None, :] + ts[None, :, None] * dirs[:, None, :]
        idx = self.voxel_index(pts)
        inb = self.in_bounds(idx)
        st = np.full(inb.shape, -1, dtype=np.int8)
        ii = idx[inb]
        st[inb] = self.state[ii[:, 0], ii[:, 1], ii[:, 2]]
        # Count each voxel once: keep samples whose voxel differs from the previous sample's.
        new = np.ones(inb.shape, dtype=bool)
        new[:, 1:] = np.any(idx[:, 1:] != idx[:, :-1], axis=-1)
        # Stop after the first occupied voxel or the first out-of-bounds sample.
        blocked = (st == OCCUPIED) | ~inb
        after = np.cumsum(blocked, axis=1) - blocked
        alive = (after == 0) & inb
        counted = new & alive
        n_all = counted.sum(axis=1)
        n_unknown = (counted & (st == UNKNOWN)).sum(axis=1)
        return np.where(n_all > 0, n_unknown / np.maximum(n_all, 1), 0.0)


# ------------------------------------------------------------------ clustering


@dataclass
class FruitCluster:
    points: np.ndarray
    centroid_ls: np.ndarray
    active: bool = False
    degenerate: bool = False
    normals: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.points)


def estimate_normals(points: np.ndarray, view_origin: np.ndarray, radius: float = NORMAL_RADIUS) -> np.ndarray:
    """Plane-fit normals from ``radius`` neighbourhoods, oriented toward ``view_origin``."""
    tree = cKDTree(points)
    k = min(NORMAL_MAX_NEIGHBORS, len(points))
    dist, nbr = tree.query(points, k=k)
    dist = np.atleast_2d(dist.reshape(len(points), k))
    nbr = np.atleast_2d(nbr.reshape(len(points), k))
    w = (dist <= radius).astype(float)
    q = points[nbr]
    cnt = w.sum(axis=1, keepdims=True)
    mu = (q * w[..., None]).sum(axis=1) / cnt
    d = (q - mu[:, None]) * w[..., None]
    cov = np.einsum("nki,nkj->nij", d, d)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    flip = np.einsum("ij,ij->i", n, view_origin - points) < 0
    n[flip] *= -1
    return n


def normal_lines_center(points: np.ndarray, normals: np.ndarray, rcond: float = 1e-6):
    """Least-squares intersection point of the lines ``p_i + s n_i``.

    Solves ``sum(I - n n^T) c = sum(I - n n^T) p``. Returns ``(center, ok)``;
    when the system is singular (all normals parallel) the arithmetic mean is
    returned with ``ok=False``.
    """
    P = np.eye(3)[None] - np.einsum("ni,nj->nij", normals, normals)
    A = P.sum(axis=0)
    b = np.einsum("nij,nj->i", P, points)
    ev = np.linalg.eigvalsh(A)
    if ev[0] <= rcond * max(ev[-1], 1e-300):
        return points.mean(axis=0), False
    return np.linalg.solve(A, b), True


def euclidean_clusters(points: np.ndarray, tolerance: float = CLUSTER_TOLERANCE) -> List[np.ndarray]:
    """Single-linkage components (index arrays) with the given link distance."""
    if len(points) == 0:
        return []
    tree = cKDTree(points)
    pairs = tree.query_pairs(tolerance, output_type="ndarray")
    n = len(points)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_comp, labels = connected_components(g, directed=False)
    order = np.argsort(labels, kind="stable")
    splits = np.cumsum(np.bincount(labels, minlength=n_comp))[:-1]
    return np.split(order, splits)


def extract_clusters(
    grid: SurfaceVoxelGrid,
    view_origin,
    min_size: int = MIN_CLUSTER_SIZE,
    max_size: int = MAX_CLUSTER_SIZE,
    n_active: int = N_ACTIVE,
) -> List[FruitCluster]:
    """Cluster the surface map; the ``n_active`` smallest clusters are active.

    Output is sorted by size, then lexicographically by centroid.
    """
    pts = grid.points
    view_origin = np.asarray(view_origin, dtype=float)
    clusters = []
    for ids in euclidean_clusters(pts):
        if not min_size <= len(ids) <= max_size:
            continue
        cp = pts[ids]
        nrm = estimate_normals(cp, view_origin)
        c, ok = normal_lines_center(cp, nrm)
        clusters.append(FruitCluster(cp, c, degenerate=not ok, normals=nrm))
    clusters.sort(key=lambda c: (c.size, *np.round(c.centroid_ls, 9)))
    for i, c in enumerate(clusters):
        c.active = i < n_active
    return clusters


class BeliefMap:
    """Surface map plus occupancy grid, fed by labeled captures."""

    def __init__(self, bounds: Box):
        self.surface = SurfaceVoxelGrid()
        self.occupancy = OccupancyGrid(bounds)
        self.last_origin: Optional[np.ndarray] = None

    def integrate_observation(self, cloud: LabeledPointCloud) -> None:
        self.last_origin = np.asarray(cloud.view_origin, dtype=float)
        if len(cloud) == 0:
            return
        self.surface.integrate(cloud.fruit_points)
        self.occupancy.integrate(cloud.view_origin, cloud.points)

    def clusters(self) -> List[FruitCluster]:
        origin = self.last_origin if self.last_origin is not None else np.zeros(3)
        return extract_clusters(self.surface, origin)

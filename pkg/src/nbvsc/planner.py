"""Next-best-view planner driven by missing fruit surfaces.

Targeted candidates are synthesised from missing-surface points that sit in
unknown occupancy next to free space; they look at the completed shape's
center. Candidates too similar to executed views are dropped before any
scoring. When no targeted candidate is useful, frontier exploration with
ray-cast information gain takes over.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .completion import N_MIN, MissingSurface
from .geometry import Box
from .mapping import FREE, NEIGHBORS_6, OCCUPIED, UNKNOWN, FruitCluster, OccupancyGrid


@dataclass(frozen=True)
class PlannerConfig:
    d_min: float = 0.2
    d_max: float = 0.5
    theta_thresh: float = math.pi / 6
    dist_thresh: float = 0.1
    vpd_discard: float = 0.1
    utility_min: float = 0.2
    alpha: float = 0.2
    targets_per_iter: int = 100
    exploration_samples: int = 100
    n_rays: int = 10
    cone_deg: float = 10.0
    ray_extra: float = 0.2
    n_min: int = N_MIN
    direction_tries: int = 10
    baseline_rays: tuple = (16, 12)
    baseline_fov_deg: tuple = (70.0, 55.0)


@dataclass
class Viewpoint:
    origin: np.ndarray
    direction: np.ndarray
    provenance: str = "exploration"  # "targeted" | "exploration" | "baseline"
    shape_id: Optional[int] = None
    vpd: float = 1.0
    ig: float = 0.0
    utility: float = 0.0
    degenerate: bool = False

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        d = np.asarray(self.direction, dtype=float)
        self.direction = d / np.linalg.norm(d)


@dataclass
class PlannerState:
    config: PlannerConfig = field(default_factory=PlannerConfig)
    seed: int = 0
    past_viewpoints: List[Viewpoint] = field(default_factory=list)
    mode: str = "exploration"

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def record(self, vp: Viewpoint) -> None:
        """Add an executed viewpoint to the history."""
        self.past_viewpoints.append(vp)

    def past_arrays(self):
        if not self.past_viewpoints:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return (
            np.array([v.origin for v in self.past_viewpoints]),
            np.array([v.direction for v in self.past_viewpoints]),
        )


@dataclass
class Beliefs:
    occupancy: OccupancyGrid
    missing: Sequence[MissingSurface]
    camera: np.ndarray
    workspace: Box
    clusters: Sequence[FruitCluster] = ()


@dataclass
class PlanResult:
    viewpoint: Optional[Viewpoint]
    mode: str  # "targeted" | "exploration" | "baseline" | "terminate"
    n_candidates: int
    n_discarded_vpd: int
    planning_ms: float


# ------------------------------------------------------------ dissimilarity


def pairwise_dissimilarity(o1, d1, o2, d2, cfg: PlannerConfig = PlannerConfig()) -> np.ndarray:
    """Dissimilarity of every (row of o1/d1, row of o2/d2) pair, shape (n1, n2)."""
    o1, d1, o2, d2 = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (o1, d1, o2, d2))
    dist = np.linalg.norm(o1[:, None, :] - o2[None, :, :], axis=2)
    cos = np.clip(d1 @ d2.T, -1.0, 1.0)
    angle = np.arccos(cos)
    inner = (1.0 - cos) * dist / cfg.dist_thresh
    return np.where((angle > cfg.theta_thresh) | (dist > cfg.dist_thresh), 1.0, inner)


def dissimilarity_index(vp: Viewpoint, past: Sequence[Viewpoint], cfg: PlannerConfig = PlannerConfig()) -> float:
    """Minimum pairwise dissimilarity against all past viewpoints (1 if none)."""
    if not past:
        return 1.0
    po = np.array([p.origin for p in past])
    pd = np.array([p.direction for p in past])
    return float(pairwise_dissimilarity(vp.origin, vp.direction, po, pd, cfg).min())


def _batch_vpd(origins, dirs, state: PlannerState) -> np.ndarray:
    po, pd = state.past_arrays()
    if len(po) == 0:
        return np.ones(len(origins))
    return pairwise_dissimilarity(origins, dirs, po, pd, state.config).min(axis=1)


# ---------------------------------------------------------- targeted views


def viewpoint_from_target(c_complete, p_target, distance: float):
    """Viewing direction toward the completed center and the origin behind the target."""
    c_complete = np.asarray(c_complete, dtype=float)
    p_target = np.asarray(p_target, dtype=float)
    v = c_complete - p_target
    d = v / np.linalg.norm(v)
    return p_target - d * distance, d


def fruit_targets(ms: MissingSurface, occ: OccupancyGrid) -> np.ndarray:
    """Free-voxel targets next to missing-surface points lying in unknown space.

    For each missing point whose voxel is unknown, the first free voxel of
    its 6-neighbourhood (top, bottom, left, right, front, back) becomes a
    target. Returns target voxel indices, deduplicated, in first-seen order.
    """
    idx = occ.voxel_index(ms.points)
    fruit = idx[occ.state_of_index(idx) == UNKNOWN]
    if len(fruit) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    nb = fruit[:, None, :] + NEIGHBORS_6[None]
    st = occ.state_of_index(nb.reshape(-1, 3)).reshape(len(fruit), 6)
    is_free = st == FREE
    has = is_free.any(axis=1)
    first = is_free.argmax(axis=1)
    targets = nb[np.nonzero(has)[0], first[has]]
    if len(targets) == 0:
        return targets
    _, keep = np.unique(targets, axis=0, return_index=True)
    return targets[np.sort(keep)]


def reachable(origins: np.ndarray, occ: OccupancyGrid, workspace: Box) -> np.ndarray:
    origins = np.atleast_2d(origins)
    return workspace.contains(origins) & (occ.state_at(origins) != OCCUPIED)


def synthesize_target_viewpoints(
    missing: Sequence[MissingSurface],
    occ: OccupancyGrid,
    state: PlannerState,
    workspace: Box,
) -> List[Viewpoint]:
    """Occlusion-aware targeted candidates, at most ``targets_per_iter`` of them.

    Only reachable candidates (origin inside the workspace and not in an
    occupied voxel) are returned, unscored.
    """
    cfg = state.config
    tgt, owner = [], []
    for k, ms in enumerate(missing):
        t = fruit_targets(ms, occ)
        tgt.append(occ.voxel_center(t))
        owner.append(np.full(len(t), k))
    if not tgt or sum(len(t) for t in tgt) == 0:
        return []
    tgt = np.vstack(tgt)
    owner = np.concatenate(owner)
    n = min(cfg.targets_per_iter, len(tgt))
    pick = np.sort(state.rng.choice(len(tgt), size=n, replace=False))
    dist = state.rng.uniform(cfg.d_min, cfg.d_max, size=n)
    tgt, owner = tgt[pick], owner[pick]
    centers = np.array([missing[k].c_complete for k in owner])
    v = centers - tgt
    norm = np.linalg.norm(v, axis=1)
    ok = norm > 1e-12
    dirs = v / np.where(ok, norm, 1.0)[:, None]
    origins = tgt - dirs * dist[:, None]
    ok &= reachable(origins, occ, workspace)
    return [
        Viewpoint(origins[i], dirs[i], "targeted", int(missing[owner[i]].shape_id))
        for i in np.nonzero(ok)[0]
    ]


def missing_information_gain(dirs, ms: MissingSurface, vpd, n_min: int = N_MIN):
    """Ray-cast-free gain: (n_missing / n_min) * alignment * dissimilarity.

    Returns ``(ig, degenerate)``; a degenerate missing surface (its centroid
    coincides with the shape center) has no optimal direction and scores 0.
    """
    v = np.asarray(ms.c_complete, dtype=float) - np.asarray(ms.c_missing, dtype=float)
    nv = np.linalg.norm(v)
    dirs = np.atleast_2d(dirs)
    if nv < 1e-12:
        return np.zeros(len(dirs)), True
    optimal = v / nv
    return (ms.n_missing / n_min) * (dirs @ optimal) * np.asarray(vpd, dtype=float), False


def score_missing_viewpoint(vp: Viewpoint, ms: MissingSurface, vpd: float, cam, cfg: PlannerConfig = PlannerConfig()) -> float:
    """Utility of a targeted candidate; fills ``vp.vpd``, ``vp.ig`` and ``vp.utility``."""
    ig, degenerate = missing_information_gain(vp.direction, ms, vpd, cfg.n_min)
    vp.vpd = float(vpd)
    vp.ig = float(ig[0])
    vp.degenerate = degenerate
    vp.utility = vp.ig - cfg.alpha * float(np.linalg.norm(vp.origin - np.asarray(cam, dtype=float)))
    return vp.utility


# ------------------------------------------------------------- exploration


def cone_directions(direction, half_angle_deg: float, n: int) -> np.ndarray:
    """``n`` unit rays: the axis plus ``n - 1`` spread evenly on the cone rim."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)
    if n == 1:
        return d[None]
    helper = np.array([1.0, 0.0, 0.0]) if abs(d[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(d, helper)
    u /= np.linalg.norm(u)
    w = np.cross(d, u)
    a = math.radians(half_angle_deg)
    phi = 2 * math.pi * np.arange(n - 1) / (n - 1)
    rim = math.cos(a) * d + math.sin(a) * (np.cos(phi)[:, None] * u + np.sin(phi)[:, None] * w)
    return np.vstack([d, rim])


def exploration_gain(occ: OccupancyGrid, origin, direction, cfg: PlannerConfig = PlannerConfig()) -> float:
    """Mean unknown-voxel fraction over the ray cone of one viewpoint."""
    rays = cone_directions(direction, cfg.cone_deg, cfg.n_rays)
    o = np.broadcast_to(np.asarray(origin, dtype=float), rays.shape)
    return float(occ.ray_unknown_fraction(o, rays, cfg.d_max + cfg.ray_extra).mean())


def _random_units(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_exploration_viewpoints(
    occ: OccupancyGrid,
    state: PlannerState,
    k: int,
    cam,
    workspace: Box,
    stats: Optional[dict] = None,
) -> List[Viewpoint]:
    """Frontier-targeted candidates scored by ray-cast gain minus motion cost.

    Frontier targets are unknown voxels 6-adjacent to occupied ones. For each
    sampled target, random directions are tried until the origin placed at a
    random distance behind the target is reachable. Candidates with
    dissimilarity below the discard threshold are dropped before any ray is
    cast.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = state.config
    front = occ.frontier_indices()
    if len(front) == 0:
        return []
    n = min(k, len(front))
    pick = np.sort(state.rng.choice(len(front), size=n, replace=False))
    targets = occ.voxel_center(front[pick])
    tries = cfg.direction_tries
    dirs = _random_units(state.rng, n * tries).reshape(n, tries, 3)
    dist = state.rng.uniform(cfg.d_min, cfg.d_max, size=(n, tries))
    origins = targets[:, None, :] - dirs * dist[..., None]
    ok = reachable(origins.reshape(-1, 3), occ, workspace).reshape(n, tries)
    has = ok.any(axis=1)
    first = ok.argmax(axis=1)
    rows = np.nonzero(has)[0]
    o = origins[rows, first[rows]]
    d = dirs[rows, first[rows]]
    vpd = _batch_vpd(o, d, state)
    keep = vpd >= cfg.vpd_discard
    if stats is not None:
        stats["n_candidates"] = stats.get("n_candidates", 0) + len(o)
        stats["n_discarded_vpd"] = stats.get("n_discarded_vpd", 0) + int((~keep).sum())
    cam = np.asarray(cam, dtype=float)
    out = []
    for oi, di, vi in zip(o[keep], d[keep], vpd[keep]):
        ig = exploration_gain(occ, oi, di, cfg)
        vp = Viewpoint(oi, di, "exploration", None, float(vi), ig)
        vp.utility = ig - cfg.alpha * float(np.linalg.norm(oi - cam))
        out.append(vp)
    return out


# --------------------------------------------------------------- baseline


def frustum_directions(direction, n_xy=(16, 12), fov_deg=(70.0, 55.0)) -> np.ndarray:
    from .sensor import camera_rotation

    nx, ny = n_xy
    tx = math.tan(math.radians(fov_deg[0] / 2))
    ty = math.tan(math.radians(fov_deg[1] / 2))
    u, v = np.meshgrid(np.linspace(-tx, tx, nx), np.linspace(-ty, ty, ny))
    d = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ camera_rotation(direction).T


def sample_raycast_baseline(
    clusters: Sequence[FruitCluster],
    occ: OccupancyGrid,
    state: PlannerState,
    cam,
    workspace: Box,
) -> List[Viewpoint]:
    """Random targeted sampling scored by frustum ray casting (timing baseline).

    Targets are random points of detected clusters; the viewing direction is
    random and each candidate's gain is the unknown fraction over a coarse
    frustum of rays.
    """
    cfg = state.config
    if not clusters:
        return []
    n = cfg.targets_per_iter
    which = state.rng.integers(len(clusters), size=n)
    targets = np.array([clusters[w].points[state.rng.integers(clusters[w].size)] for w in which])
    dirs = _random_units(state.rng, n)
    dist = state.rng.uniform(cfg.d_min, cfg.d_max, size=n)
    origins = targets - dirs * dist[:, None]
    ok = reachable(origins, occ, workspace)
    cam = np.asarray(cam, dtype=float)
    out = []
    for oi, di in zip(origins[ok], dirs[ok]):
        rays = frustum_directions(di, cfg.baseline_rays, cfg.baseline_fov_deg)
        ig = float(occ.ray_unknown_fraction(np.broadcast_to(oi, rays.shape), rays, cfg.d_max + cfg.ray_extra).mean())
        vp = Viewpoint(oi, di, "baseline", None, 1.0, ig)
        vp.utility = ig - cfg.alpha * float(np.linalg.norm(oi - cam))
        out.append(vp)
    return out


# --------------------------------------------------------------- selection


def _best(cands: Sequence[Viewpoint], cam: np.ndarray) -> Viewpoint:
    def key(v: Viewpoint):
        return (-v.utility, float(np.linalg.norm(v.origin - cam)), *v.origin.tolist())

    return min(cands, key=key)


def score_targeted(cands: List[Viewpoint], missing: Sequence[MissingSurface], state: PlannerState, cam):
    """VpD-filter then score targeted candidates; returns (kept, n_discarded)."""
    cfg = state.config
    if not cands:
        return [], 0
    by_id = {ms.shape_id: ms for ms in missing}
    o = np.array([v.origin for v in cands])
    d = np.array([v.direction for v in cands])
    vpd = _batch_vpd(o, d, state)
    kept = []
    for v, s in zip(cands, vpd):
        if s < cfg.vpd_discard:
            continue
        score_missing_viewpoint(v, by_id[v.shape_id], s, cam, cfg)
        kept.append(v)
    return kept, len(cands) - len(kept)


def plan_next_view(beliefs: Beliefs, state: PlannerState, baseline: bool = False) -> PlanResult:
    """Pick the next view, or terminate when no useful candidate exists.

    Targeted candidates need utility above ``utility_min``; otherwise the
    best exploration candidate with positive utility is used. With
    ``baseline`` the targeted stage is replaced by :func:`sample_raycast_baseline`.
    """
    cfg = state.config
    cam = np.asarray(beliefs.camera, dtype=float)
    t0 = time.perf_counter()
    n_cand = 0
    n_disc = 0
    if baseline:
        cands = sample_raycast_baseline(beliefs.clusters, beliefs.occupancy, state, cam, beliefs.workspace)
        n_cand = len(cands)
        good = [v for v in cands if v.utility > 0]
        if good:
            state.mode = "baseline"
            return PlanResult(_best(good, cam), "baseline", n_cand, 0, (time.perf_counter() - t0) * 1e3)
    elif beliefs.missing:
        cands = synthesize_target_viewpoints(beliefs.missing, beliefs.occupancy, state, beliefs.workspace)
        kept, n_disc = score_targeted(cands, beliefs.missing, state, cam)
        n_cand = len(cands)
        good = [v for v in kept if v.utility > cfg.utility_min]
        if good:
            state.mode = "targeted"
            return PlanResult(_best(good, cam), "targeted", n_cand, n_disc, (time.perf_counter() - t0) * 1e3)

    stats: dict = {}
    cands = sample_exploration_viewpoints(
        beliefs.occupancy, state, cfg.exploration_samples, cam, beliefs.workspace, stats
    )
    n_cand += stats.get("n_candidates", 0)
    n_disc += stats.get("n_discarded_vpd", 0)
    good = [v for v in cands if v.utility > 0]
    ms = (time.perf_counter() - t0) * 1e3
    if good:
        state.mode = "exploration"
        return PlanResult(_best(good, cam), "exploration", n_cand, n_disc, ms)
    state.mode = "terminate"
    return PlanResult(None, "terminate", n_cand, n_disc, ms)

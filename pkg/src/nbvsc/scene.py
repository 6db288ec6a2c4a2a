"""Synthetic plant-row scenarios and their JSON file format.

A scenario is a row of plants. Each plant is a vertical stem capsule with
superellipsoid fruits hanging around it; disc leaves are dropped next to
fruits to create occlusions. The reachable camera workspace is a box around
the row.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .geometry import Box, Capsule, Disc, Superellipsoid, volume
from .sensor import CameraIntrinsics

FORMAT_VERSION = 1

SEMI_AXIS_RANGE = (0.035, 0.045)  # 7-9 cm full extent
EXPONENT_RANGE = (0.6, 1.4)
FRUIT_HEIGHT_RANGE = (0.4, 1.2)
LEAF_RADIUS_RANGE = (0.05, 0.10)
MIN_CLEARANCE = 0.02
PLANT_SPACING = 0.4
STEM_RADIUS = 0.01
STEM_HEIGHT = 1.35
MAX_RETRIES = 500

Geometry = Union[Superellipsoid, Disc, Capsule]


class SceneFormatError(ValueError):
    """Raised for malformed or invalid scene files."""


@dataclass(frozen=True)
class SceneObject:
    kind: str  # "fruit" | "leaf" | "stem"
    instance_id: int
    geometry: Geometry


@dataclass(frozen=True)
class Scenario:
    objects: Tuple[SceneObject, ...]
    workspace: Box
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        ids = [o.instance_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("instance ids must be unique")
        if not any(o.kind == "fruit" for o in self.objects):
            raise ValueError("scenario needs at least one fruit")

    @property
    def fruits(self) -> List[SceneObject]:
        return [o for o in self.objects if o.kind == "fruit"]

    @property
    def fruit_shapes(self) -> List[Superellipsoid]:
        return [o.geometry for o in self.fruits]

    def bounds(self, margin: float = 0.0) -> Box:
        """Box enclosing the workspace and every object, padded by ``margin``."""
        lo = np.array(self.workspace.lo)
        hi = np.array(self.workspace.hi)
        for o in self.objects:
            g = o.geometry
            if isinstance(g, Superellipsoid):
                c, r = np.array(g.center), g.bounding_radius()
                lo, hi = np.minimum(lo, c - r), np.maximum(hi, c + r)
            elif isinstance(g, Disc):
                c, r = np.array(g.center), g.radius
                lo, hi = np.minimum(lo, c - r), np.maximum(hi, c + r)
            else:
                b = np.array(g.base)
                top = b + [0, 0, g.height]
                lo = np.minimum(lo, np.minimum(b, top) - g.radius)
                hi = np.maximum(hi, np.maximum(b, top) + g.radius)
        return Box(tuple(lo - margin), tuple(hi + margin))


@dataclass(frozen=True)
class SceneSpec:
    plant_count: int = 4
    fruits_per_plant: float = 3.5
    occlusion_density: float = 0.3
    seed: int = 0

    @property
    def fruit_count(self) -> int:
        return int(round(self.plant_count * self.fruits_per_plant))


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def generate_scene(spec: SceneSpec, intrinsics: CameraIntrinsics | None = None) -> Scenario:
    """Sample a plant row per ``spec``; deterministic for a fixed seed.

    Raises ``ValueError`` when fruits cannot be placed with 2 cm clearance
    between bounding spheres after bounded retries.
    """
    if spec.plant_count < 1 or spec.fruit_count < 1:
        raise ValueError("plant and fruit counts must be >= 1")
    if not 0.0 <= spec.occlusion_density <= 1.0:
        raise ValueError("occlusion density must lie in [0, 1]")
    rng = np.random.default_rng(spec.seed)
    objects: List[SceneObject] = []
    next_id = 0

    xs = (np.arange(spec.plant_count) - (spec.plant_count - 1) / 2) * PLANT_SPACING
    stems = []
    for x in xs:
        stem = Capsule((float(x), 0.0, 0.0), STEM_HEIGHT, STEM_RADIUS)
        stems.append(stem)
        objects.append(SceneObject("stem", next_id, stem))
        next_id += 1

    fruits: List[Superellipsoid] = []
    for k in range(spec.fruit_count):
        stem = stems[k % spec.plant_count]
        for _ in range(MAX_RETRIES):
            a, b, c = rng.uniform(*SEMI_AXIS_RANGE, size=3)
            e1, e2 = rng.uniform(*EXPONENT_RANGE, size=2)
            probe = Superellipsoid((0, 0, 0), a, b, c, e1, e2)
            r = probe.bounding_radius()
            ang = rng.uniform(0, 2 * math.pi)
            off = STEM_RADIUS + r + rng.uniform(0.005, 0.05)
            center = (
                stem.base[0] + off * math.cos(ang),
                stem.base[1] + off * math.sin(ang),
                rng.uniform(*FRUIT_HEIGHT_RANGE),
            )
            cand = Superellipsoid(center, a, b, c, e1, e2)
            if all(
                np.linalg.norm(np.subtract(center, f.center)) >= r + f.bounding_radius() + MIN_CLEARANCE
                for f in fruits
            ) and all(s.distance(np.array(center)) >= r + 0.005 for s in stems):
                fruits.append(cand)
                break
        else:
            raise ValueError(
                f"could not place fruit {k} with {MIN_CLEARANCE} m clearance after {MAX_RETRIES} retries"
            )

    for f in fruits:
        objects.append(SceneObject("fruit", next_id, f))
        next_id += 1

    for f in fruits:
        if rng.random() >= spec.occlusion_density:
            continue
        for _ in range(20):
            u = _random_unit(rng)
            u[2] *= 0.5
            u /= np.linalg.norm(u)
            radius = rng.uniform(*LEAF_RADIUS_RANGE)
            gap = rng.uniform(0.01, 0.04)
            # Tangent-plane leaf, slid sideways so it occludes only part of the fruit.
            side = np.cross(u, _random_unit(rng))
            side /= np.linalg.norm(side)
            center = f.center_array + u * (f.bounding_radius() + gap) + side * radius * rng.uniform(0.4, 1.1)
            leaf = Disc(tuple(center), tuple(u), radius)
            if all(leaf.distance(g.center_array) >= g.bounding_radius() + 0.005 for g in fruits):
                objects.append(SceneObject("leaf", next_id, leaf))
                next_id += 1
                break

    x_lo, x_hi = xs.min() - 0.45, xs.max() + 0.45
    workspace = Box((x_lo, -0.75, 0.15), (x_hi, 0.75, 1.45))
    return Scenario(tuple(objects), workspace, intrinsics or CameraIntrinsics(), spec.seed)


# ---------------------------------------------------------------- file format


def _object_to_dict(o: SceneObject) -> dict:
    g = o.geometry
    d = {"kind": o.kind, "instance_id": o.instance_id}
    if isinstance(g, Superellipsoid):
        d.update(
            center=list(g.center), a=g.a, b=g.b, c=g.c, e1=g.e1, e2=g.e2,
            orientation=list(g.orientation),
        )
    elif isinstance(g, Disc):
        d.update(center=list(g.center), normal=list(g.normal), radius=g.radius)
    else:
        d.update(base=list(g.base), height=g.height, radius=g.radius)
    return d


def scene_to_dict(s: Scenario) -> dict:
    return {
        "version": FORMAT_VERSION,
        "seed": s.seed,
        "workspace": {"lo": list(s.workspace.lo), "hi": list(s.workspace.hi)},
        "intrinsics": asdict(s.intrinsics),
        "objects": [_object_to_dict(o) for o in s.objects],
    }


def dumps(s: Scenario) -> str:
    return json.dumps(scene_to_dict(s), indent=1) + "\n"


def save_scene(s: Scenario, path) -> None:
    Path(path).write_text(dumps(s))


def _get(d: dict, key: str, where: str):
    if not isinstance(d, dict):
        raise SceneFormatError(f"{where}: expected an object")
    if key not in d:
        raise SceneFormatError(f"{where}: missing field '{key}'")
    return d[key]


def _vec(d: dict, key: str, where: str, n: int = 3) -> tuple:
    v = _get(d, key, where)
    if not isinstance(v, list) or len(v) != n or not all(isinstance(x, (int, float)) for x in v):
        raise SceneFormatError(f"{where}.{key}: expected a list of {n} numbers")
    return tuple(float(x) for x in v)


def _num(d: dict, key: str, where: str) -> float:
    v = _get(d, key, where)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneFormatError(f"{where}.{key}: expected a number")
    return float(v)


def _object_from_dict(d: dict, where: str) -> SceneObject:
    kind = _get(d, "kind", where)
    iid = _get(d, "instance_id", where)
    if not isinstance(iid, int):
        raise SceneFormatError(f"{where}.instance_id: expected an integer")
    try:
        if kind == "fruit":
            axes = [_num(d, k, where) for k in ("a", "b", "c")]
            if min(axes) <= 0:
                raise SceneFormatError(f"{where}: non-positive semi-axis")
            g = Superellipsoid(
                _vec(d, "center", where), *axes, _num(d, "e1", where), _num(d, "e2", where),
                _vec(d, "orientation", where, 4),
            )
        elif kind == "leaf":
            g = Disc(_vec(d, "center", where), _vec(d, "normal", where), _num(d, "radius", where))
        elif kind == "stem":
            g = Capsule(_vec(d, "base", where), _num(d, "height", where), _num(d, "radius", where))
        else:
            raise SceneFormatError(f"{where}.kind: unknown kind {kind!r}")
    except SceneFormatError:
        raise
    except ValueError as e:
        raise SceneFormatError(f"{where}: {e}") from e
    return SceneObject(kind, iid, g)


def scene_from_dict(d: dict) -> Scenario:
    version = _get(d, "version", "root")
    if version != FORMAT_VERSION:
        raise SceneFormatError(f"unsupported scene version {version!r} (expected {FORMAT_VERSION})")
    ws = _get(d, "workspace", "root")
    objs = _get(d, "objects", "root")
    if not isinstance(objs, list):
        raise SceneFormatError("root.objects: expected a list")
    intr = d.get("intrinsics", {})
    try:
        intrinsics = CameraIntrinsics(**intr)
        workspace = Box(_vec(ws, "lo", "workspace"), _vec(ws, "hi", "workspace"))
        return Scenario(
            tuple(_object_from_dict(o, f"objects[{i}]") for i, o in enumerate(objs)),
            workspace,
            intrinsics,
            int(_get(d, "seed", "root")),
        )
    except SceneFormatError:
        raise
    except (TypeError, ValueError) as e:
        raise SceneFormatError(str(e)) from e


def loads(text: str) -> Scenario:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"line {e.lineno}, column {e.colno}: {e.msg}") from e
    return scene_from_dict(d)


def load_scene(path) -> Scenario:
    return loads(Path(path).read_text())


def volume_band() -> Tuple[float, float]:
    """Smallest and largest fruit volume the generator can produce."""
    lo_e, hi_e = EXPONENT_RANGE
    s_lo, s_hi = SEMI_AXIS_RANGE
    vmin = volume(Superellipsoid((0, 0, 0), s_lo, s_lo, s_lo, hi_e, hi_e))
    vmax = volume(Superellipsoid((0, 0, 0), s_hi, s_hi, s_hi, lo_e, lo_e))
    return vmin, vmax

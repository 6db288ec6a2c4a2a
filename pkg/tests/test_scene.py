import json

import numpy as np
import pytest

from nbvsc.geometry import volume
from nbvsc.scene import (
    EXPONENT_RANGE,
    MIN_CLEARANCE,
    SEMI_AXIS_RANGE,
    SceneFormatError,
    SceneSpec,
    dumps,
    generate_scene,
    load_scene,
    loads,
    save_scene,
    scene_to_dict,
    volume_band,
)


@pytest.fixture(scope="module")
def row_scene():
    return generate_scene(SceneSpec(4, 3.5, 0.3, seed=7))


class TestGenerateScene:
    def test_fourteen_fruits(self, row_scene):
        assert SceneSpec(4, 3.5).fruit_count == 14
        assert len(row_scene.fruits) == 14

    def test_single_unoccluded_fruit(self):
        s = generate_scene(SceneSpec(1, 1, 0.0, seed=3))
        assert len(s.fruits) == 1
        assert not [o for o in s.objects if o.kind == "leaf"]

    def test_deterministic_serialization(self):
        spec = SceneSpec(4, 3.5, 0.3, seed=11)
        assert dumps(generate_scene(spec)) == dumps(generate_scene(spec))

    def test_seed_changes_scene(self):
        assert dumps(generate_scene(SceneSpec(seed=1))) != dumps(generate_scene(SceneSpec(seed=2)))

    def test_fruit_parameters_in_band(self, row_scene):
        for f in row_scene.fruit_shapes:
            assert all(SEMI_AXIS_RANGE[0] <= x <= SEMI_AXIS_RANGE[1] for x in (f.a, f.b, f.c))
            assert all(EXPONENT_RANGE[0] <= e <= EXPONENT_RANGE[1] for e in (f.e1, f.e2))
            assert 0.4 <= f.center[2] <= 1.2

    def test_volumes_within_band(self, row_scene):
        lo, hi = volume_band()
        for f in row_scene.fruit_shapes:
            assert lo <= volume(f) <= hi

    def test_bounding_spheres_clear(self, row_scene):
        shapes = row_scene.fruit_shapes
        for i in range(len(shapes)):
            for j in range(i + 1, len(shapes)):
                d = np.linalg.norm(shapes[i].center_array - shapes[j].center_array)
                assert d >= shapes[i].bounding_radius() + shapes[j].bounding_radius() + MIN_CLEARANCE - 1e-12

    def test_unique_ids(self, row_scene):
        ids = [o.instance_id for o in row_scene.objects]
        assert len(ids) == len(set(ids))

    def test_density_adds_leaves(self):
        none = generate_scene(SceneSpec(4, 3.5, 0.0, seed=5))
        full = generate_scene(SceneSpec(4, 3.5, 1.0, seed=5))
        assert sum(o.kind == "leaf" for o in none.objects) == 0
        assert sum(o.kind == "leaf" for o in full.objects) >= 10

    def test_overcrowded_spec_rejected(self):
        with pytest.raises(ValueError, match="clearance"):
            generate_scene(SceneSpec(1, 60, 0.0, seed=0))

    @pytest.mark.parametrize("spec", [SceneSpec(0, 3), SceneSpec(2, 0.1), SceneSpec(2, 2, 1.5)])
    def test_invalid_spec(self, spec):
        with pytest.raises(ValueError):
            generate_scene(spec)


class TestSceneIO:
    def test_round_trip(self, row_scene, tmp_path):
        p = tmp_path / "s.json"
        save_scene(row_scene, p)
        assert load_scene(p) == row_scene

    def test_truncated_file_reports_position(self, row_scene):
        text = dumps(row_scene)
        with pytest.raises(SceneFormatError, match="line"):
            loads(text[: len(text) // 2])

    def test_missing_field_named(self, row_scene):
        d = scene_to_dict(row_scene)
        idx = next(i for i, o in enumerate(d["objects"]) if o["kind"] == "fruit")
        del d["objects"][idx]["a"]
        with pytest.raises(SceneFormatError, match=rf"objects\[{idx}\]: missing field 'a'"):
            loads(json.dumps(d))

    def test_zero_semi_axis(self, row_scene):
        d = scene_to_dict(row_scene)
        fruit = next(o for o in d["objects"] if o["kind"] == "fruit")
        fruit["a"] = fruit["b"] = fruit["c"] = 0
        with pytest.raises(SceneFormatError, match="non-positive semi-axis"):
            loads(json.dumps(d))

    def test_version_mismatch(self, row_scene):
        d = scene_to_dict(row_scene)
        d["version"] = 99
        with pytest.raises(SceneFormatError, match="version"):
            loads(json.dumps(d))

    def test_unknown_kind(self, row_scene):
        d = scene_to_dict(row_scene)
        d["objects"][0]["kind"] = "rock"
        with pytest.raises(SceneFormatError, match="unknown kind"):
            loads(json.dumps(d))

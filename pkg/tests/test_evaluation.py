import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nbvsc.evaluation import (
    RunReport,
    chamfer_distance,
    emit_report,
    greedy_match,
    match_and_score,
    read_rows,
    volume_accuracy,
)
from nbvsc.geometry import Superellipsoid, fibonacci_surface_samples, volume
from nbvsc.ply import read_ply, write_ply

T1 = Superellipsoid((0, 0, 0), 0.04, 0.04, 0.04)
T2 = Superellipsoid((0.3, 0, 0), 0.035, 0.04, 0.045, 0.8, 1.2)


class TestVolumeAccuracy:
    def test_exact(self):
        assert volume_accuracy(2.5e-4, 2.5e-4) == 1.0

    def test_half(self):
        assert volume_accuracy(0.5, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_unclamped(self):
        assert volume_accuracy(3.0, 1.0) == pytest.approx(-1.0)

    @given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
    def test_at_most_one(self, v_det, v_gt):
        a = volume_accuracy(v_det, v_gt)
        assert a <= 1.0
        assert (a == 1.0) == (v_det == v_gt)


class TestChamfer:
    def test_identical(self):
        p = np.random.default_rng(0).normal(size=(50, 3))
        assert chamfer_distance(p, p) == 0.0

    def test_single_pair(self):
        assert chamfer_distance([[0, 0, 0]], [[0, 0, 0.003]]) == pytest.approx(3.0, abs=1e-9)

    def test_radial_offset(self):
        truth = fibonacci_surface_samples(T1, 2000)
        det = fibonacci_surface_samples(Superellipsoid((0, 0, 0), 0.042, 0.042, 0.042), 2000)
        assert chamfer_distance(det, truth) == pytest.approx(2.0, abs=0.1)

    def test_empty(self):
        assert chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]]) is None

    @settings(max_examples=25)
    @given(st.integers(0, 1000))
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.normal(size=(20, 3)), rng.normal(size=(30, 3))
        assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), abs=1e-12)


class TestMatching:
    def test_cutoff(self):
        far = T1.translated((0.15, 0.15, 0))
        rows = match_and_score([far], [T1])
        assert not rows[0].matched and rows[0].acc_v is None

    def test_closest_first(self):
        fits = [T1.translated((0.05, 0, 0)), T1.translated((0.01, 0, 0))]
        assert greedy_match([f.center for f in fits], [T1.center]) == {0: 1}

    def test_injective(self):
        fits = [T1, T1.translated((0.001, 0, 0)), T2]
        m = greedy_match([f.center for f in fits], [T1.center, T2.center])
        assert len(set(m.values())) == len(m) == 2

    @settings(max_examples=25)
    @given(st.permutations(range(5)))
    def test_permutation_invariant_count(self, perm):
        rng = np.random.default_rng(1)
        fits = rng.uniform(-0.2, 0.2, (5, 3))
        truth = rng.uniform(-0.2, 0.2, (4, 3))
        assert len(greedy_match(fits[list(perm)], truth)) == len(greedy_match(fits, truth))

    def test_scores(self):
        fit = Superellipsoid((0.001, 0, 0), 0.04, 0.04, 0.02)
        cloud = fibonacci_surface_samples(T1, 500)
        (row,) = match_and_score([fit], [T1], [7], detected_clouds=[cloud])
        assert row.truth_id == 7 and row.matched
        assert row.acc_v == pytest.approx(0.5)
        assert row.v_gt == pytest.approx(volume(T1))
        assert row.center_error == pytest.approx(0.001)
        # Chamfer compares the observed cloud with 2000 samples of the true surface.
        assert row.chamfer_mm == pytest.approx(chamfer_distance(cloud, fibonacci_surface_samples(T1, 2000)))


class TestEmitReport:
    def report(self):
        rows = match_and_score([T1, T2.scaled(1.1)], [T1, T2], [3, 4],
                               detected_clouds=[fibonacci_surface_samples(T1, 300), fibonacci_surface_samples(T2, 300)])
        return RunReport(rows, 2, 2, iterations=5, plan_length_s=60.0, budget_s=120.0, planning_ms=[1.0, 2.0])

    def test_files_and_round_trip(self, tmp_path):
        r = self.report()
        emit_report(r, tmp_path)
        assert read_rows(tmp_path / "evaluation.csv") == r.rows
        agg = json.loads((tmp_path / "report.json").read_text())
        assert agg["schema_version"] == 1
        assert agg["detected"] == 2
        assert isinstance(agg["mean_acc_v"], float)
        assert json.loads((tmp_path / "timing.json").read_text())["n"] == 2

    def test_reemit_identical(self, tmp_path):
        r = self.report()
        emit_report(r, tmp_path / "a")
        emit_report(r, tmp_path / "b")
        for name in ("evaluation.csv", "report.json", "timing.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_empty_run(self, tmp_path):
        emit_report(RunReport(match_and_score([], [T1]), 1, 0), tmp_path)
        agg = json.loads((tmp_path / "report.json").read_text())
        assert agg["detected"] == 0
        assert agg["mean_acc_v"] is None and agg["chamfer_mm"] is None

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="cannot write report"):
            emit_report(self.report(), blocker / "sub")


class TestPly:
    def test_round_trip(self, tmp_path):
        pts = np.random.default_rng(0).normal(size=(100, 3))
        labels = np.arange(100) % 7
        write_ply(tmp_path / "c.ply", pts, labels)
        p2, l2 = read_ply(tmp_path / "c.ply")
        np.testing.assert_array_equal(p2, pts)
        np.testing.assert_array_equal(l2, labels)

    def test_header(self, tmp_path):
        write_ply(tmp_path / "c.ply", np.zeros((2, 3)))
        head = (tmp_path / "c.ply").read_bytes()[:200]
        assert b"format binary_little_endian 1.0" in head
        assert b"property int label" in head

    def test_not_ply(self, tmp_path):
        (tmp_path / "x.ply").write_bytes(b"hello")
        with pytest.raises(ValueError):
            read_ply(tmp_path / "x.ply")

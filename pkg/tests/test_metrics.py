import math

import numpy as np
import pytest

from src.extract import box_sdf
from src.featgen import FeatGenConfig, detect_sharp_edges, strips_from_mesh
from src.geom import TriMesh
from src.metrics import (
    EmptyPointSetError,
    MetricReport,
    MetricsConfig,
    chamfer,
    evaluate_meshes,
    feature_curve_samples,
    feature_metrics,
    fscore,
    hausdorff,
    normal_error,
    sample_surface,
)
from src.train2d import polyline_samples


def brute_force_nearest(src, dst):
    return np.linalg.norm(src[:, None] - dst[None], axis=2).min(axis=1)


def cube_strip_normal(points):
    """Normal of the bisecting strip through the nearest cube edge."""
    p = np.asarray(points)
    along = np.argmax(0.5 - np.abs(p), axis=1)
    n = np.zeros_like(p)
    for row, axis in enumerate(along):
        a, b = [d for d in range(3) if d != axis]
        n[row, a] = -np.sign(p[row, b])
        n[row, b] = np.sign(p[row, a])
    return n / math.sqrt(2.0)


class TestPointMetrics:
    def test_identical_sets(self, rng):
        p = rng.uniform(size=(200, 3))
        assert chamfer(p, p) == 0.0
        assert hausdorff(p, p) == 0.0
        assert fscore(p, p, 1e-6) == 100.0

    def test_against_brute_force(self, rng):
        p1, p2 = rng.uniform(size=(80, 3)), rng.uniform(size=(50, 3))
        d12, d21 = brute_force_nearest(p1, p2), brute_force_nearest(p2, p1)
        assert chamfer(p1, p2) == pytest.approx(0.5 * d12.mean() + 0.5 * d21.mean())
        assert hausdorff(p1, p2) == pytest.approx(max(d12.max(), d21.max()))
        assert chamfer(p1, p2) == pytest.approx(chamfer(p2, p1))

    def test_shifted_grid(self):
        g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3), axis=-1).reshape(-1, 3)
        shifted = g + [0.1, 0.0, 0.0]
        assert chamfer(g, shifted) == pytest.approx(0.1)
        assert hausdorff(g, shifted) == pytest.approx(0.1)

    def test_fscore(self):
        p1 = np.zeros((1, 3))
        p2 = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        # precision 1, recall 1/2
        assert fscore(p1, p2, 0.1) == pytest.approx(200.0 / 3.0)
        assert fscore(p1, p2 + 5.0, 0.1) == 0.0

    def test_normal_error_ignores_orientation(self, rng):
        p = rng.uniform(size=(30, 3))
        n = np.tile([0.0, 0.0, 1.0], (30, 1))
        assert normal_error(p, n, p, -n) == pytest.approx(0.0)
        side = np.tile([1.0, 0.0, 0.0], (30, 1))
        assert normal_error(p, n, p, side) == pytest.approx(90.0)

    @pytest.mark.parametrize("fn", [chamfer, hausdorff, lambda a, b: fscore(a, b, 0.1)])
    def test_empty_sets(self, fn):
        with pytest.raises(EmptyPointSetError):
            fn(np.zeros((0, 3)), np.ones((3, 3)))


class TestMeshMetrics:
    def test_sampling_is_seeded(self, cube_mesh):
        a, na = sample_surface(cube_mesh, 500, seed=4)
        b, _ = sample_surface(cube_mesh, 500, seed=4)
        np.testing.assert_array_equal(a, b)
        assert np.all(np.isclose(np.abs(a).max(axis=1), 0.5))
        np.testing.assert_allclose(np.linalg.norm(na, axis=1), 1.0)

    def test_empty_mesh(self):
        with pytest.raises(EmptyPointSetError):
            sample_surface(TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), 10)

    def test_same_surface_scores_well(self, cube_mesh):
        cfg = MetricsConfig(samples=5000, fscore_radius=0.05, seed=1)
        same = evaluate_meshes(cube_mesh, cube_mesh, cfg)
        bigger = evaluate_meshes(cube_mesh, TriMesh(cube_mesh.vertices * 1.1, cube_mesh.faces), cfg)
        assert (same.cd, same.hd) == (0.0, 0.0)
        assert same.ne_degrees == pytest.approx(0.0, abs=1e-6)
        assert same.fc_percent == 100.0
        assert bigger.cd > same.cd
        assert (same.samples, same.seed) == (5000, 1)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MetricsConfig(samples=0)


class TestReport:
    def test_csv(self):
        report = MetricReport(cd=0.001, hd=0.01, ne_degrees=1.5, fc_percent=99.0, samples=10, seed=2, fscore_radius=0.005)
        assert report.csv_header() == "cd,hd,ne_degrees,fc_percent,fcd,fne_degrees,samples,seed,fscore_radius"
        assert report.csv_row() == "0.001,0.01,1.5,99,,,10,2,0.005"

    def test_pretty_lists_feature_metrics_when_present(self):
        report = MetricReport(cd=0.0, hd=0.0, ne_degrees=0.0, fc_percent=100.0)
        assert "Feature" not in report.pretty()
        report.fcd = 0.002
        assert "Feature chamfer" in report.pretty()


class TestFeatureMetrics:
    @pytest.fixture
    def cube_strips(self, cube_mesh):
        graph, strips = strips_from_mesh(cube_mesh, FeatGenConfig(half_width=0.04, segment_length=0.1))
        return strips.mesh.vertices, strips.quads

    def test_exact_field_recovers_edges(self, cube_mesh, cube_strips):
        vertices, quads = cube_strips
        sharp = detect_sharp_edges(cube_mesh)
        gt = polyline_samples(sharp.vertices, sharp.edges, 0.005)
        fcd, fne = feature_metrics(box_sdf, vertices, quads, gt, cube_strip_normal)
        assert fcd < 0.005
        assert fne < 10.0

    @pytest.mark.parametrize("delta", [0.01, 0.02, 0.03])
    def test_translated_strips_score_the_offset(self, cube_mesh, cube_strips, delta):
        vertices, quads = cube_strips
        centers = vertices[quads].mean(axis=1)
        along_x = np.all(np.isclose(np.abs(centers[:, 1:]), 0.5), axis=1)
        shift = np.array([0.0, 0.0, delta])
        sharp = detect_sharp_edges(cube_mesh)
        x_edges = sharp.edges[sharp.vertices[sharp.edges[:, 0], 0] != sharp.vertices[sharp.edges[:, 1], 0]]
        gt = polyline_samples(sharp.vertices, x_edges, 0.005)
        fcd, _ = feature_metrics(
            lambda p: box_sdf(p - shift), vertices + shift, quads[along_x], gt, cube_strip_normal
        )
        assert fcd == pytest.approx(delta, rel=0.05)

    def test_roots_sit_on_the_edges(self, cube_strips):
        vertices, quads = cube_strips
        roots, owner, skipped = feature_curve_samples(box_sdf, vertices, quads, sections=4)
        assert skipped == 0
        assert len(roots) == 4 * len(quads)
        np.testing.assert_allclose(np.sort(np.abs(roots), axis=1)[:, 1:], 0.5, atol=1e-6)
        np.testing.assert_array_equal(np.bincount(owner), 4)

    def test_no_crossing(self, cube_strips):
        vertices, quads = cube_strips
        _, _, skipped = feature_curve_samples(lambda p: np.ones(len(p)), vertices, quads)
        assert skipped == len(quads)
        with pytest.raises(EmptyPointSetError):
            feature_metrics(lambda p: np.ones(len(p)), vertices, quads, np.zeros((1, 3)), cube_strip_normal)

    def test_empty_ground_truth(self, cube_strips):
        vertices, quads = cube_strips
        with pytest.raises(EmptyPointSetError):
            feature_metrics(box_sdf, vertices, quads, np.zeros((0, 3)), cube_strip_normal)

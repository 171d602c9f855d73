from dataclasses import replace

import numpy as np
import pytest

from src import autodiff as ad
from src.extract import extract_mesh, model_value_fn, sphere_sdf
from src.featgen import detect_sharp_edges, strips_from_mesh
from src.feature import FeatureSet, MollifierConfig
from src.geom import PointCloud, TriMesh, dihedral_angle
from src.metrics import MetricsConfig, evaluate_meshes, feature_metrics, normal_error, sample_surface
from src.nnet import MlpArch, MlpModel, field_tensor
from src.partition import color_edges, split_strips
from src.train2d import TrainingLog, polyline_samples
from src.train3d import (
    Batch,
    Loss3DWeights,
    MissingNormalsError,
    SamplingConfig,
    Train3DConfig,
    boolean_combine,
    desk_sampling,
    knn_sigma,
    loss_sdf,
    loss_surface,
    loss_terms,
    model_field,
    normalize_points,
    sample_batch,
    train_sdf,
)


def sphere_cloud(n, rng, radius=0.5, normals=True) -> PointCloud:
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return PointCloud(radius * dirs, dirs if normals else None)


def sphere_field(X):
    return ad.norm_rows(X) - 0.5


def equator_strip() -> FeatureSet:
    vertices = np.array([[0.5, -0.3, -0.03], [0.5, 0.3, -0.03], [0.5, 0.3, 0.03], [0.5, -0.3, 0.03]])
    return FeatureSet(
        vertices, [[0, 1, 2], [0, 2, 3]], [0, 0], 1, MollifierConfig(0.2), reg_edges=[[0, 1], [3, 2]]
    )


def central_difference(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        step = np.zeros_like(x)
        step[idx] = h
        out[idx] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return out


# -- desk experiments -------------------------------------------------------------

CUBE_HALF = 0.95


def l_bracket() -> TriMesh:
    """L-shaped prism: the union of [0, 2] x [0, 1] and [0, 1] x [0, 2], one unit tall."""
    outline = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]])
    cap = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 5], [3, 4, 5]])
    n = len(outline)
    vertices = np.concatenate([np.hstack([outline, np.zeros((n, 1))]), np.hstack([outline, np.ones((n, 1))])])
    sides = []
    for a in range(n):
        b = (a + 1) % n
        sides += [[a, b, b + n], [a, b + n, a + n]]
    return TriMesh(vertices, np.concatenate([cap[:, ::-1], cap + n, sides]))


def desk_strips(mesh: TriMesh, radius: float = 0.1):
    vertices, _ = normalize_points(mesh.vertices)
    normalized = TriMesh(vertices, mesh.faces)
    graph, strips = strips_from_mesh(normalized)
    return normalized, strips, split_strips(strips, color_edges(graph), MollifierConfig(radius))


def desk_fit(mesh: TriMesh, fs: FeatureSet, seed: int = 0, **overrides):
    points, normals = sample_surface(mesh, 5000, seed)
    base = dict(seed=seed, sampling=desk_sampling(2000, 2000), log_every=500)
    base.update(overrides)
    return train_sdf(PointCloud(points, normals), fs, Train3DConfig(**base))


def local_normal_error(reference: TriMesh, candidate: TriMesh, keep, samples: int = 20000) -> float:
    p1, n1 = sample_surface(reference, samples, 0)
    p2, n2 = sample_surface(candidate, samples, 0)
    a, b = keep(p1), keep(p2)
    return normal_error(p1[a], n1[a], p2[b], n2[b])


def near_cube_edges(points: np.ndarray, band: float = 0.05) -> np.ndarray:
    return (np.abs(points) > CUBE_HALF - band).sum(axis=1) >= 2


def cube_strip_normal(points: np.ndarray) -> np.ndarray:
    p = np.asarray(points)
    along = np.argmin(np.abs(p), axis=1)
    n = np.zeros_like(p)
    for row, axis in enumerate(along):
        a, b = [d for d in range(3) if d != axis]
        n[row, a] = -np.sign(p[row, b])
        n[row, b] = np.sign(p[row, a])
    return n / np.sqrt(2.0)


def cube_crease_dihedrals(mesh: TriMesh, tol: float = 0.02) -> tuple[np.ndarray, set]:
    """Dihedral angles (degrees) of the creased mesh edges lying on the cube's
    edge lines away from the corners, and the edge lines they cover."""
    edges = np.array([key for key, faces in mesh.edge_faces.items() if len(faces) == 2])
    mid = mesh.vertices[edges].mean(axis=1)
    on_face = np.abs(np.abs(mid) - CUBE_HALF) < tol
    crease = (on_face.sum(axis=1) == 2) & (np.where(on_face, 0.0, np.abs(mid)).max(axis=1) < CUBE_HALF - 0.15)
    angles = np.degrees([dihedral_angle(mesh, tuple(e)) for e in edges[crease]])
    creased = angles < 135.0
    lines = {tuple((np.sign(m) * f).astype(int)) for m, f in zip(mid[crease][creased], on_face[crease][creased])}
    return angles[creased], lines


class TestWeights:
    @pytest.mark.parametrize(
        "mode, nor, reg, ekl",
        [("mesh", 15.0, 0.0, 50.0), ("points_normals", 15.0, 10.0, 35.0), ("points", 0.0, 10.0, 50.0)],
    )
    def test_presets(self, mode, nor, reg, ekl):
        w = Loss3DWeights.preset(mode)
        assert (w.sur, w.ext) == (7000.0, 600.0)
        assert (w.nor, w.reg, w.ekl) == (nor, reg, ekl)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            Loss3DWeights.preset("voxels")

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            Loss3DWeights(ekl=-1.0)

    @pytest.mark.parametrize("mode, learns", [("mesh", False), ("points_normals", True), ("points", True)])
    def test_feature_learning_follows_mode(self, mode, learns):
        assert Train3DConfig(mode=mode).learns_features() is learns
        assert Train3DConfig(mode=mode, learn_features=not learns).learns_features() is not learns

    def test_explicit_weights_win(self):
        w = Loss3DWeights(sur=1.0)
        assert Train3DConfig(weights=w).resolved_weights() is w


class TestNormalization:
    def test_fits_inside_margin(self):
        pts = np.array([[0.0, 0.0, 0.0], [2.0, 1.0, 1.0], [1.0, 0.5, 0.2]])
        out, transform = normalize_points(pts)
        assert out.min() == pytest.approx(-0.95)
        assert out.max() == pytest.approx(0.95)
        np.testing.assert_allclose(out[:, 1].min() + out[:, 1].max(), 0.0, atol=1e-12)
        np.testing.assert_allclose(transform.invert(out), pts, atol=1e-12)

    def test_single_point(self):
        out, transform = normalize_points(np.array([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out, 0.0)
        assert transform.scale == 1.0


class TestSampling:
    def test_knn_sigma(self):
        pts = np.array([[float(i), 0.0, 0.0] for i in range(5)])
        np.testing.assert_allclose(knn_sigma(pts, 1), 1.0)
        np.testing.assert_allclose(knn_sigma(pts, 2), [2.0, 1.0, 1.0, 1.0, 2.0])
        np.testing.assert_allclose(knn_sigma(pts, 50), [4.0, 3.0, 2.0, 3.0, 4.0])

    def test_batch_shapes(self, rng):
        cfg = SamplingConfig(surface_total=500, surface_per_epoch=200, near=50, ambient=30, knn=5, epochs=1)
        batch = sample_batch(sphere_cloud(500, rng), cfg, rng)
        assert batch.surface.shape == (200, 3)
        assert batch.normals.shape == (200, 3)
        assert batch.near.shape == (50, 3)
        assert batch.ambient.shape == (30, 3)
        assert np.abs(batch.ambient).max() <= 1.1
        np.testing.assert_allclose(np.linalg.norm(batch.surface, axis=1), 0.5)

    def test_small_cloud_samples_with_replacement(self, rng, caplog):
        cfg = SamplingConfig(surface_per_epoch=200, near=20, ambient=5, knn=3)
        batch = sample_batch(sphere_cloud(40, rng, normals=False), cfg, rng)
        assert batch.surface.shape == (200, 3)
        assert batch.normals is None
        assert "with replacement" in caplog.text

    def test_rejects_empty_counts(self):
        with pytest.raises(ValueError):
            SamplingConfig(near=0)


class TestLosses:
    def batch(self, rng, normals=True):
        cloud = sphere_cloud(100, rng)
        near = cloud.points * rng.uniform(0.8, 1.2, size=(100, 1))
        ambient = rng.uniform(-1.0, 1.0, size=(50, 3))
        return Batch(cloud.points, near, ambient, cloud.normals if normals else None)

    def test_exact_sdf_has_zero_geometric_terms(self, rng):
        terms = loss_terms(sphere_field, self.batch(rng), Loss3DWeights.preset("mesh"), "mesh")
        assert set(terms) == {"sur", "ext", "ekl", "nor"}
        assert terms["sur"].item() == pytest.approx(0.0, abs=1e-12)
        assert terms["ekl"].item() == pytest.approx(0.0, abs=1e-12)
        assert terms["nor"].item() == pytest.approx(0.0, abs=1e-12)
        assert 0.0 < terms["ext"].item() < 1.0

    def test_scaled_field_breaks_eikonal(self, rng):
        terms = loss_terms(lambda X: sphere_field(X) * 2.0, self.batch(rng), Loss3DWeights(), "points")
        assert terms["ekl"].item() == pytest.approx(1.0)
        assert "nor" not in terms

    def test_flipped_normals_cost_two(self, rng):
        terms = loss_terms(lambda X: sphere_field(X) * -1.0, self.batch(rng), Loss3DWeights(), "points_normals")
        assert terms["nor"].item() == pytest.approx(2.0)

    def test_regularizer_only_when_learning(self, rng):
        fs = equator_strip()
        w = Loss3DWeights.preset("points")
        assert "reg" in loss_terms(sphere_field, self.batch(rng), w, "points", fs)
        assert "reg" not in loss_terms(sphere_field, self.batch(rng), w, "mesh", fs)

    def test_weighted_sum(self, rng):
        batch = self.batch(rng)
        w = Loss3DWeights(sur=2.0, ext=3.0, ekl=0.0, nor=0.0)
        terms = loss_terms(sphere_field, batch, w, "points")
        expected = 2.0 * terms["sur"].item() + 3.0 * terms["ext"].item()
        assert loss_sdf(sphere_field, batch, w, "points").item() == pytest.approx(expected)

    @pytest.mark.parametrize("mode", ["mesh", "points_normals"])
    def test_missing_normals(self, rng, mode):
        with pytest.raises(MissingNormalsError):
            loss_terms(sphere_field, self.batch(rng, normals=False), Loss3DWeights(), mode)


class TestFeatureGradients:
    def test_surface_loss_wrt_segment_vertices(self, rng):
        fs = FeatureSet(np.array([[-0.05, 0.0], [0.05, 0.0]]), [[0, 1]], [0], 1, MollifierConfig(0.2))
        model = MlpModel.initialize(MlpArch(2, 1, hidden_layers=2, width=8), seed=3)
        points = rng.uniform(-0.15, 0.15, size=(40, 2))
        points[:, 1] += np.copysign(0.02, points[:, 1])

        def surface_loss(vertices):
            V = ad.leaf(vertices)
            return loss_surface(field_tensor(model, ad.Tensor(points), fs, None, V)), V

        loss, V = surface_loss(fs.vertices)
        (grad,) = ad.grad(loss, [V])
        expected = central_difference(lambda v: surface_loss(v)[0].item(), fs.vertices)
        np.testing.assert_allclose(grad.data, expected, rtol=1e-4, atol=1e-10)

    def test_surface_term_wrt_strip_vertices(self, rng):
        fs = equator_strip()
        model = MlpModel.initialize(MlpArch(3, 1, hidden_layers=1, width=8), seed=2)
        near = np.array([0.5, 0.0, 0.0]) + rng.uniform(-0.1, 0.1, size=(30, 3))
        near[:, 0] += np.copysign(0.02, near[:, 0] - 0.5)
        batch = Batch(near, near, rng.uniform(-1.0, 1.0, size=(10, 3)))

        def surface_term(vertices):
            V = ad.leaf(vertices)
            return loss_terms(model_field(model, fs, None, V), batch, Loss3DWeights(), "points")["sur"], V

        term, V = surface_term(fs.vertices)
        (grad,) = ad.grad(term, [V])
        expected = central_difference(lambda v: surface_term(v)[0].item(), fs.vertices)
        np.testing.assert_allclose(grad.data, expected, rtol=1e-4, atol=1e-10)


class TestTrainSdf:
    def config(self, mode, **overrides):
        sampling = replace(desk_sampling(64, 2), knn=8)
        base = dict(mode=mode, hidden_layers=1, width=8, activation="softplus", log_every=1, sampling=sampling)
        base.update(overrides)
        return Train3DConfig(**base)

    def test_points_mode_moves_strips(self, rng):
        fs = equator_strip()
        log = TrainingLog(None, ["epoch", "loss", "sur", "ext", "ekl", "nor", "reg"])
        model, moved = train_sdf(sphere_cloud(300, rng), fs, self.config("points_normals"), log)
        assert model.arch.n_channels == 1
        assert not np.array_equal(moved.vertices, fs.vertices)
        assert [row["epoch"] for row in log.rows] == [1, 2]
        assert log.rows[0]["reg"] != ""

    def test_mesh_mode_keeps_strips(self, rng):
        fs = equator_strip()
        _, kept = train_sdf(sphere_cloud(300, rng), fs, self.config("mesh"))
        np.testing.assert_array_equal(kept.vertices, fs.vertices)

    def test_without_features(self, rng):
        model, fs = train_sdf(sphere_cloud(300, rng, normals=False), equator_strip(), self.config("points", use_features=False))
        assert fs is None
        assert model.arch.n_channels == 0

    def test_needs_normals(self, rng):
        with pytest.raises(MissingNormalsError):
            train_sdf(sphere_cloud(50, rng, normals=False), None, self.config("mesh"))


class TestBoolean:
    def spheres(self):
        a = lambda x: sphere_sdf(x, 0.5, (-0.25, 0.0, 0.0))
        b = lambda x: sphere_sdf(x, 0.5, (0.25, 0.0, 0.0))
        return a, b

    @pytest.mark.parametrize(
        "op, signs",
        [
            ("union", [-1, -1, -1, 1]),
            ("intersect", [1, -1, 1, 1]),
            ("diffAB", [-1, 1, 1, 1]),
            ("diffBA", [1, 1, -1, 1]),
        ],
    )
    def test_signs(self, op, signs):
        # only in A, in both, only in B, outside
        pts = np.array([[-0.6, 0.0, 0.0], [0.0, 0.0, 0.0], [0.6, 0.0, 0.0], [0.0, 0.9, 0.0]])
        values = boolean_combine(*self.spheres(), op)(pts)
        np.testing.assert_array_equal(np.sign(values), signs)

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            boolean_combine(*self.spheres(), "xor")


@pytest.mark.slow
class TestDeskExperiments:
    def test_cube_pipeline(self, cube_mesh):
        reference, _, fs0 = desk_strips(cube_mesh)
        model, fs = desk_fit(reference, fs0)
        plain, _ = desk_fit(reference, fs0, use_features=False)
        mesh = extract_mesh(model, fs, (-1.0,) * 3, (1.0,) * 3, 64)
        plain_mesh = extract_mesh(plain, None, (-1.0,) * 3, (1.0,) * 3, 64)

        report = evaluate_meshes(reference, mesh, MetricsConfig(samples=20000, fscore_radius=0.01, seed=0))
        assert report.fc_percent >= 99.0
        edge_error = local_normal_error(reference, mesh, near_cube_edges)
        assert edge_error < local_normal_error(reference, plain_mesh, near_cube_edges)
        angles, lines = cube_crease_dihedrals(mesh)
        assert len(lines) == 12
        np.testing.assert_allclose(angles, 90.0, atol=10.0)

    def test_learned_strips_beat_fixed_ones(self, cube_mesh):
        reference, strips, fs0 = desk_strips(cube_mesh)
        offsets = np.random.default_rng(0).normal(size=(len(fs0.vertices) // 2, 3))
        offsets *= 0.02 / np.linalg.norm(offsets, axis=1, keepdims=True)
        # strip vertices 2v and 2v + 1 move with sharp vertex v
        perturbed = fs0.with_vertices(fs0.vertices + np.repeat(offsets, 2, axis=0))
        sharp = detect_sharp_edges(reference)
        gt = polyline_samples(sharp.vertices, sharp.edges, 0.005)

        scores = {}
        for learn in (True, False):
            model, fs = desk_fit(reference, perturbed, mode="points_normals", learn_features=learn)
            scores[learn] = feature_metrics(model_value_fn(model, fs), fs.vertices, strips.quads, gt, cube_strip_normal)
        (learned_fcd, learned_fne), (fixed_fcd, fixed_fne) = scores[True], scores[False]
        assert learned_fcd < fixed_fcd
        assert learned_fne < fixed_fne

    def test_split_channels_keep_corners(self):
        reference, _, fs0 = desk_strips(l_bracket())
        assert fs0.n_channels >= 3

        def near_corners(points):
            return np.linalg.norm(points[:, None] - reference.vertices[None], axis=2).min(axis=1) < 0.15

        errors = {}
        for merge in (False, True):
            model, fs = desk_fit(reference, fs0, merge_channels=merge)
            mesh = extract_mesh(model, fs, (-1.0,) * 3, (1.0,) * 3, 64)
            errors[merge] = local_normal_error(reference, mesh, near_corners)
        assert errors[False] <= 1.05 * errors[True]

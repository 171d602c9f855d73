"""2D experiments: geodesic distance around a disk with a fixed feature ray,
and joint learning of a rectangle's medial axis."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .feature import FeatureSet, MollifierConfig, feature_scale
from .geom import FeatureGraph
from .nnet import AdamState, MlpArch, MlpModel, adam_step, evaluate_field, field_tensor, loss_backward
from .partition import color_edges

logger = logging.getLogger("sharpfield.train2d")

PathLike = Union[str, Path]


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last state that was still finite."""

    def __init__(self, message: str, model: MlpModel, features: Optional[FeatureSet], iteration: int):
        super().__init__(message)
        self.model = model
        self.features = features
        self.iteration = iteration


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Loss2DWeights:
    alpha: float = 0.5
    lam: float = 0.3

    def __post_init__(self):
        if self.alpha < 0.0 or not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"need alpha >= 0 and lambda in [0, 1], got {self.alpha}, {self.lam}")


@dataclass(frozen=True)
class GeodesicScene:
    source: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (1.0, 0.0)
    radius: float = 0.5
    ray_start: float = 1.5
    domain: tuple[float, float, float, float] = (-0.2, 2.2, -1.2, 1.2)


@dataclass(frozen=True)
class RectangleScene:
    half_width: float = 0.5
    half_height: float = 0.25


class TrainingLog:
    """CSV training log; the header comment carries the seed and config hash."""

    def __init__(self, path: Optional[PathLike], columns: list[str], comments: Optional[list[str]] = None):
        self.columns = columns
        self.rows: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            with open(self.path, "w", encoding="utf-8", newline="") as fh:
                for c in comments or []:
                    fh.write(f"# {c}\n")
                csv.writer(fh).writerow(columns)

    def append(self, **values):
        row = {c: values.get(c, "") for c in self.columns}
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8", newline="") as fh:
                csv.writer(fh).writerow([_fmt(row[c]) for c in self.columns])


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


# -- ground truth ---------------------------------------------------------------


def geodesic_gt_batch(points: np.ndarray, scene: GeodesicScene = GeodesicScene()) -> np.ndarray:
    """Shortest path length from the source around the disk."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    s = np.asarray(scene.source)
    c = np.asarray(scene.center)
    r = scene.radius
    to_center = np.linalg.norm(points - c, axis=1)
    if np.any(to_center < r - 1e-12):
        raise SceneError("query point inside the obstacle disk")

    seg = points - s
    seg_len_sq = np.einsum("ij,ij->i", seg, seg)
    t = np.where(seg_len_sq > 0.0, ((c - s) @ seg.T) / np.where(seg_len_sq > 0.0, seg_len_sq, 1.0), 0.0)
    closest = s + np.clip(t, 0.0, 1.0)[:, None] * seg
    visible = np.linalg.norm(closest - c, axis=1) >= r

    direct = np.sqrt(seg_len_sq)
    sc = float(np.linalg.norm(s - c))
    xc = np.maximum(to_center, r)
    tangent_s = math.sqrt(sc * sc - r * r)
    tangent_x = np.sqrt(np.maximum(xc * xc - r * r, 0.0))
    alpha_s = math.acos(r / sc)
    alpha_x = np.arccos(np.clip(r / xc, -1.0, 1.0))
    cs = (s - c) / sc
    cx = (points - c) / xc[:, None]
    gamma = np.arccos(np.clip(cx @ cs, -1.0, 1.0))
    wrapped = tangent_s + tangent_x + r * (gamma - alpha_s - alpha_x)
    return np.where(visible, direct, wrapped)


def geodesic_gt(x, scene: GeodesicScene = GeodesicScene()) -> float:
    return float(geodesic_gt_batch(np.asarray(x, dtype=np.float64)[None], scene)[0])


def geodesic_gt_grad(points: np.ndarray, scene: GeodesicScene = GeodesicScene()) -> np.ndarray:
    """Unit gradient: away from the source when visible, else away from the
    tangent point the path leaves the disk at (upper side for y >= 0)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    s = np.asarray(scene.source)
    c = np.asarray(scene.center)
    r = scene.radius
    seg = points - s
    seg_len_sq = np.einsum("ij,ij->i", seg, seg)
    t = np.where(seg_len_sq > 0.0, ((c - s) @ seg.T) / np.where(seg_len_sq > 0.0, seg_len_sq, 1.0), 0.0)
    closest = s + np.clip(t, 0.0, 1.0)[:, None] * seg
    visible = np.linalg.norm(closest - c, axis=1) >= r

    rel = points - c
    xc = np.maximum(np.linalg.norm(rel, axis=1), r)
    side = np.where(rel[:, 1] >= 0.0, 1.0, -1.0)
    angle = np.arctan2(rel[:, 1], rel[:, 0]) + side * np.arccos(np.clip(r / xc, -1.0, 1.0))
    tangent_point = c + r * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    d_wrapped = points - tangent_point
    d = np.where(visible[:, None], seg, d_wrapped)
    length = np.linalg.norm(d, axis=1, keepdims=True)
    return d / np.where(length > 0.0, length, 1.0)


def rectangle_distance(points: np.ndarray, scene: RectangleScene = RectangleScene()) -> np.ndarray:
    """Distance to the boundary, for points inside the rectangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.minimum(scene.half_width - np.abs(points[:, 0]), scene.half_height - np.abs(points[:, 1]))


def rectangle_medial_axis(scene: RectangleScene = RectangleScene()) -> FeatureGraph:
    """The five medial-axis segments: the central one and four diagonals to the corners."""
    a, b = scene.half_width, scene.half_height
    j = a - b
    vertices = np.array([[-j, 0.0], [j, 0.0], [-a, -b], [-a, b], [a, -b], [a, b]])
    edges = np.array([[0, 1], [0, 2], [0, 3], [1, 4], [1, 5]])
    return FeatureGraph(vertices, edges)


# -- feature sets -----------------------------------------------------------------


def polyline_graph(points: np.ndarray) -> FeatureGraph:
    points = np.asarray(points, dtype=np.float64)
    edges = np.stack([np.arange(len(points) - 1), np.arange(1, len(points))], axis=1)
    return FeatureGraph(points, edges)


def geodesic_feature_set(
    scene: GeodesicScene = GeodesicScene(), spacing: float = 0.02, radius: float = 0.08
) -> FeatureSet:
    """The feature ray clipped to the domain, as fixed segments of about ``spacing``."""
    x_end = scene.domain[1]
    n = max(1, int(round((x_end - scene.ray_start) / spacing)))
    xs = np.linspace(scene.ray_start, x_end, n + 1)
    graph = polyline_graph(np.stack([xs, np.zeros_like(xs)], axis=1))
    return FeatureSet.from_graph(
        graph, MollifierConfig(radius), learnable=np.zeros(graph.n_vertices, dtype=bool)
    )


def perturbed_medial_graph(
    scene: RectangleScene = RectangleScene(),
    central_segments: int = 22,
    diagonal_segments: int = 18,
    sigma: float = 0.01,
    seed: int = 0,
) -> FeatureGraph:
    """Finely subdivided medial axis with every non-endpoint vertex jittered."""
    gt = rectangle_medial_axis(scene)
    j0, j1 = gt.vertices[0], gt.vertices[1]
    vertices = [j0 + (j1 - j0) * t for t in np.linspace(0.0, 1.0, central_segments + 1)]
    edges = [[k, k + 1] for k in range(central_segments)]
    junction = {0: 0, 1: central_segments}
    for start, corner in ((0, 2), (0, 3), (1, 4), (1, 5)):
        prev = junction[start]
        a, b = gt.vertices[start], gt.vertices[corner]
        for t in np.linspace(0.0, 1.0, diagonal_segments + 1)[1:]:
            vertices.append(a + (b - a) * t)
            edges.append([prev, len(vertices) - 1])
            prev = len(vertices) - 1

    graph = FeatureGraph(np.array(vertices), np.array(edges))
    degree = np.bincount(graph.edges.ravel(), minlength=graph.n_vertices)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=graph.vertices.shape)
    noise[degree <= 1] = 0.0
    return graph.with_vertices(graph.vertices + noise)


def polyline_samples(vertices: np.ndarray, edges: np.ndarray, spacing: float = 0.002) -> np.ndarray:
    chunks = []
    for i, j in edges:
        a, b = vertices[i], vertices[j]
        n = max(2, int(math.ceil(np.linalg.norm(b - a) / spacing)) + 1)
        t = np.linspace(0.0, 1.0, n)[:, None]
        chunks.append(a + t * (b - a))
    return np.concatenate(chunks) if chunks else np.zeros((0, vertices.shape[1]))


def axis_chamfer(learned: FeatureGraph, reference: FeatureGraph, spacing: float = 0.002) -> float:
    """Symmetric mean closest-point distance between densely sampled polylines."""
    p = polyline_samples(learned.vertices, learned.edges, spacing)
    q = polyline_samples(reference.vertices, reference.edges, spacing)
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    return 0.5 * (float(d_pq.mean()) + float(d_qp.mean()))


def find_folds(vertices: np.ndarray, edges: np.ndarray) -> list[tuple[int, int]]:
    """Pairs of non-adjacent edges that cross."""
    a, b = vertices[edges[:, 0]], vertices[edges[:, 1]]

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    A, B = a[:, None], b[:, None]
    C, D = a[None, :], b[None, :]
    crosses = (orient(A, B, C) * orient(A, B, D) < 0) & (orient(C, D, A) * orient(C, D, B) < 0)
    shared = (edges[:, None, :, None] == edges[None, :, None, :]).any(axis=(2, 3))
    i, j = np.nonzero(np.triu(crosses & ~shared, k=1))
    return list(zip(i.tolist(), j.tolist()))


# -- losses -----------------------------------------------------------------------


def loss_field_fit(
    model: MlpModel,
    fs: Optional[FeatureSet],
    points: np.ndarray,
    gt: np.ndarray,
    theta: Optional[Tensor] = None,
    V: Optional[Tensor] = None,
) -> Tensor:
    """Mean absolute error between the prediction and the ground truth."""
    if len(points) == 0:
        raise ValueError("field fit needs at least one sample")
    pred = field_tensor(model, Tensor(points), fs, theta, V)
    return ad.mean(ad.abs(pred - Tensor(gt)))


def regularizer_stencil(fs: FeatureSet) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """(center, left, right) indices of the degree-2 vertices of the
    regularization graph, and how many were skipped for coincident neighbors."""
    neighbors: dict[int, list[int]] = {}
    for i, j in fs.reg_edges.tolist():
        neighbors.setdefault(i, []).append(j)
        neighbors.setdefault(j, []).append(i)
    center, left, right = [], [], []
    excluded = 0
    for v in sorted(neighbors):
        nbrs = neighbors[v]
        if len(nbrs) != 2:
            continue
        if np.linalg.norm(fs.vertices[nbrs[1]] - fs.vertices[nbrs[0]]) < 1e-12:
            excluded += 1
            continue
        center.append(v)
        left.append(nbrs[0])
        right.append(nbrs[1])
    index = [np.array(values, dtype=np.int64) for values in (center, left, right)]
    return index[0], index[1], index[2], excluded


def loss_regularizer(fs: FeatureSet, lam: float = 0.3, V: Optional[Tensor] = None) -> Tensor:
    """Differential-coordinate penalty along the polylines of ``fs.reg_edges``:
    ``lam`` weighs its length, ``1 - lam`` its tangential part."""
    V = Tensor(fs.vertices) if V is None else V
    center, left, right, excluded = regularizer_stencil(fs)
    if excluded:
        logger.debug(f"Regularizer skipped {excluded} vertices with coincident neighbors")
    if len(center) == 0:
        return Tensor(0.0)
    a = ad.take(V, center)
    al = ad.take(V, left)
    ar = ad.take(V, right)
    v = (al + ar) * 0.5 - a
    chord = ar - al
    u = chord / ad.reshape(ad.norm_rows(chord), (-1, 1))
    vv = ad.dot_rows(v, v)
    nonzero = vv.data > 0.0
    length = ad.where(nonzero, ad.sqrt(ad.where(nonzero, vv, 1.0)), 0.0)
    tangential = ad.abs(ad.dot_rows(v, u))
    return ad.mean(length) * lam + ad.mean(tangential) * (1.0 - lam)


# -- sampling ---------------------------------------------------------------------


def sample_geodesic_domain(n: int, rng: np.random.Generator, scene: GeodesicScene = GeodesicScene()) -> np.ndarray:
    x0, x1, y0, y1 = scene.domain
    c = np.asarray(scene.center)
    out = np.zeros((0, 2))
    while len(out) < n:
        cand = rng.uniform([x0, y0], [x1, y1], size=(2 * (n - len(out)) + 16, 2))
        cand = cand[np.linalg.norm(cand - c, axis=1) >= scene.radius]
        out = np.concatenate([out, cand])
    return out[:n]


def sample_rectangle(n: int, rng: np.random.Generator, scene: RectangleScene = RectangleScene()) -> np.ndarray:
    return rng.uniform([-scene.half_width, -scene.half_height], [scene.half_width, scene.half_height], size=(n, 2))


def band_grid(nx: int = 41, ny: int = 10) -> np.ndarray:
    """Regular grid over 1.55 <= x <= 1.95, |y| <= 0.005 with no node on y = 0."""
    if ny % 2:
        ny += 1
    xs = np.linspace(1.55, 1.95, nx)
    ys = np.linspace(-0.005, 0.005, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def band_metrics(
    model: MlpModel, fs: Optional[FeatureSet], scene: GeodesicScene = GeodesicScene(), grid: Optional[np.ndarray] = None
) -> tuple[float, float]:
    """Mean value error and mean gradient error over the evaluation band."""
    grid = band_grid() if grid is None else grid
    value, grad = evaluate_field(model, fs, grid, with_grad=True)
    value_err = float(np.mean(np.abs(value - geodesic_gt_batch(grid, scene))))
    grad_err = float(np.mean(np.linalg.norm(grad - geodesic_gt_grad(grid, scene), axis=1)))
    return value_err, grad_err


# -- training ---------------------------------------------------------------------


@dataclass
class GeodesicConfig:
    iterations: int = 20000
    batch_size: int = 4096
    lr: float = 1e-4
    seed: int = 0
    hidden_layers: int = 4
    width: int = 256
    activation: str = "softplus"
    pe_frequencies: int = 4
    use_features: bool = True
    ray_spacing: float = 0.02
    radius: float = 0.08
    log_every: int = 100
    scene: GeodesicScene = field(default_factory=GeodesicScene)


@dataclass
class MedialConfig:
    iterations: int = 20000
    freeze_iterations: int = 10000
    batch_size: int = 4096
    lr: float = 1e-4
    feature_lr: float = 1e-4
    seed: int = 0
    hidden_layers: int = 4
    width: int = 256
    activation: str = "softplus"
    pe_frequencies: int = 8
    radius: float = 0.08
    sigma: float = 0.01
    learn_features: bool = True
    merge_channels: bool = False
    weights: Loss2DWeights = field(default_factory=Loss2DWeights)
    log_every: int = 100
    scene: RectangleScene = field(default_factory=RectangleScene)


def _arch(cfg, n_channels: int) -> MlpArch:
    return MlpArch(
        input_dim=2,
        n_channels=n_channels,
        hidden_layers=cfg.hidden_layers,
        width=cfg.width,
        activation=cfg.activation,
        pe_frequencies=cfg.pe_frequencies,
    )


def train_geodesic(cfg: GeodesicConfig, log: Optional[TrainingLog] = None) -> MlpModel:
    """Fit the geodesic distance with the feature ray held fixed."""
    rng = np.random.default_rng(cfg.seed)
    fs = geodesic_feature_set(cfg.scene, cfg.ray_spacing, cfg.radius) if cfg.use_features else None
    arch = _arch(cfg, fs.n_channels if fs is not None else 0)
    model = MlpModel.initialize(arch, cfg.seed)
    if fs is not None:
        model.feature_scale = feature_scale(sample_geodesic_domain(cfg.batch_size, rng, cfg.scene), fs)
    logger.info(
        f"Geodesic fit: {cfg.iterations} iterations, batch {cfg.batch_size}, "
        f"{arch.activation}, features={'on' if fs is not None else 'off'}"
    )

    state = AdamState(lr=cfg.lr)
    for it in range(cfg.iterations):
        points = sample_geodesic_domain(cfg.batch_size, rng, cfg.scene)
        gt = geodesic_gt_batch(points, cfg.scene)
        theta = ad.leaf(model.params)
        loss = loss_field_fit(model, fs, points, gt, theta)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", model, fs, it)
        (g_theta,) = loss_backward(loss, [theta])
        params, state = adam_step(model.params, g_theta, state)
        model = MlpModel(arch, params, model.feature_scale)

        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
            value_err, grad_err = band_metrics(model, fs, cfg.scene)
            logger.info(f"[{it + 1}/{cfg.iterations}] loss={loss.item():.3e} band value={value_err:.3e} grad={grad_err:.3e}")
            if log is not None:
                log.append(iter=it + 1, loss=loss.item(), band_value_err=value_err, band_grad_err=grad_err)
    return model


def medial_feature_set(cfg: MedialConfig) -> FeatureSet:
    graph = perturbed_medial_graph(cfg.scene, sigma=cfg.sigma, seed=cfg.seed)
    graph = graph.with_colors(color_edges(graph).colors)
    degree = np.bincount(graph.edges.ravel(), minlength=graph.n_vertices)
    fs = FeatureSet.from_graph(graph, MollifierConfig(cfg.radius), learnable=degree > 1)
    return fs.merged() if cfg.merge_channels else fs


def train_medial(cfg: MedialConfig, log: Optional[TrainingLog] = None) -> tuple[MlpModel, FeatureSet]:
    """Fit the rectangle's distance field while learning the medial axis.

    The axis stays frozen for ``freeze_iterations``; afterwards every vertex
    of degree greater than one moves with its own Adam state.
    """
    rng = np.random.default_rng(cfg.seed)
    fs = medial_feature_set(cfg)
    reference = rectangle_medial_axis(cfg.scene)
    arch = _arch(cfg, fs.n_channels)
    model = MlpModel.initialize(arch, cfg.seed)
    model.feature_scale = feature_scale(sample_rectangle(cfg.batch_size, rng, cfg.scene), fs)
    logger.info(
        f"Medial axis: {fs.n_elements} segments in {fs.n_channels} channels, "
        f"{int(fs.learnable.sum())} learnable vertices, freeze for {cfg.freeze_iterations} iterations"
    )

    theta_state = AdamState(lr=cfg.lr)
    vertex_state = AdamState(lr=cfg.feature_lr)
    weights = cfg.weights
    for it in range(cfg.iterations):
        points = sample_rectangle(cfg.batch_size, rng, cfg.scene)
        gt = rectangle_distance(points, cfg.scene)
        learning = cfg.learn_features and it >= cfg.freeze_iterations
        theta = ad.leaf(model.params)
        V = ad.leaf(fs.vertices) if learning else Tensor(fs.vertices)
        loss = loss_field_fit(model, fs, points, gt, theta, V)
        loss = loss + loss_regularizer(fs, weights.lam, V) * weights.alpha
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite loss at iteration {it}", model, fs, it)

        if learning:
            g_theta, g_v = loss_backward(loss, [theta, V])
            grads_v = np.where(fs.learnable[:, None], g_v, 0.0)
            moved, vertex_state = adam_step(fs.vertices, grads_v, vertex_state)
            fs = fs.with_vertices(np.where(fs.learnable[:, None], moved, fs.vertices))
        else:
            (g_theta,) = loss_backward(loss, [theta])
        params, theta_state = adam_step(model.params, g_theta, theta_state)
        model = MlpModel(arch, params, model.feature_scale)

        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
            chamfer = axis_chamfer(fs.graph(), reference)
            folds = find_folds(fs.vertices, fs.elements)
            if folds:
                logger.warning(f"Medial polyline folded at {len(folds)} segment pairs")
            logger.info(f"[{it + 1}/{cfg.iterations}] loss={loss.item():.3e} axis chamfer={chamfer:.3e}")
            if log is not None:
                log.append(iter=it + 1, loss=loss.item(), axis_chamfer=chamfer)
    return model, fs

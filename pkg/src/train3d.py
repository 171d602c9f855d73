"""Signed distance training on CAD-like shapes.

Three supervision modes share one loss assembly: ``mesh`` (points and
normals sampled from a mesh, strips fixed), ``points_normals`` and
``points`` (oriented or plain clouds, strips learned). Loss terms take a
``field`` callable mapping a ``(P, 3)`` tensor to ``(P,)`` so analytic
fields can stand in for a network.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .feature import FeatureSet, feature_scale
from .geom import PointCloud
from .nnet import AdamState, MlpArch, MlpModel, adam_step, field_tensor, loss_backward, warn_if_second_order
from .train2d import TrainingDiverged, TrainingLog, loss_regularizer

logger = logging.getLogger("sharpfield.train3d")

MODES = ("mesh", "points_normals", "points")

Field = Callable[[Tensor], Tensor]


class MissingNormalsError(ValueError):
    pass


@dataclass(frozen=True)
class Loss3DWeights:
    sur: float = 7000.0
    ext: float = 600.0
    ekl: float = 50.0
    nor: float = 0.0
    reg: float = 0.0
    exp_alpha: float = 100.0
    reg_lambda: float = 0.3

    def __post_init__(self):
        if min(self.sur, self.ext, self.ekl, self.nor, self.reg) < 0.0:
            raise ValueError("loss weights must be non-negative")
        if not self.exp_alpha > 0.0:
            raise ValueError("exterior exponent must be positive")

    @classmethod
    def preset(cls, mode: str) -> "Loss3DWeights":
        if mode == "mesh":
            return cls(sur=7000.0, ext=600.0, ekl=50.0, nor=15.0)
        if mode == "points_normals":
            return cls(sur=7000.0, ext=600.0, ekl=35.0, nor=15.0, reg=10.0)
        if mode == "points":
            return cls(sur=7000.0, ext=600.0, ekl=50.0, reg=10.0)
        raise ValueError(f"unknown mode '{mode}', expected one of {MODES}")


@dataclass(frozen=True)
class SamplingConfig:
    surface_total: int = 50000
    surface_per_epoch: int = 20000
    near: int = 20000
    ambient: int = 10000
    ambient_extent: float = 1.1
    knn: int = 50
    epochs: int = 15000

    def __post_init__(self):
        counts = (self.surface_total, self.surface_per_epoch, self.near, self.ambient, self.knn)
        if min(counts) < 1 or self.epochs < 0 or not self.ambient_extent > 0.0:
            raise ValueError("sampling counts must be positive")


@dataclass
class Train3DConfig:
    mode: str = "mesh"
    lr: float = 1e-4
    feature_lr: float = 1e-4
    seed: int = 0
    hidden_layers: int = 4
    width: int = 256
    activation: str = "sine"
    pe_frequencies: int = 0
    radius: float = 0.1
    use_features: bool = True
    learn_features: Optional[bool] = None
    merge_channels: bool = False
    log_every: int = 100
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    weights: Optional[Loss3DWeights] = None

    def resolved_weights(self) -> Loss3DWeights:
        return self.weights if self.weights is not None else Loss3DWeights.preset(self.mode)

    def learns_features(self) -> bool:
        if self.learn_features is not None:
            return self.learn_features
        return self.mode != "mesh"


@dataclass
class Batch:
    surface: np.ndarray
    near: np.ndarray
    ambient: np.ndarray
    normals: Optional[np.ndarray] = None


# -- normalization --------------------------------------------------------------


@dataclass(frozen=True)
class Normalization:
    center: np.ndarray
    scale: float

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + self.center


def normalize_points(points: np.ndarray, margin: float = 0.05) -> tuple[np.ndarray, Normalization]:
    """Isotropic scale and translation putting the bounding box inside
    ``[-(1 - margin), 1 - margin]^3``."""
    points = np.asarray(points, dtype=np.float64)
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = 0.5 * (lo + hi)
    half = float(np.max(hi - lo)) * 0.5
    scale = (1.0 - margin) / half if half > 0.0 else 1.0
    transform = Normalization(center, scale)
    return transform.apply(points), transform


# -- sampling -------------------------------------------------------------------


def knn_sigma(points: np.ndarray, k: int = 50) -> np.ndarray:
    """Distance from each point to its ``k``-th nearest other point."""
    k = min(k, len(points) - 1)
    if k < 1:
        return np.zeros(len(points))
    dist, _ = cKDTree(points).query(points, k=k + 1)
    return dist[:, k]


def sample_batch(
    cloud: PointCloud,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    sigma: Optional[np.ndarray] = None,
) -> Batch:
    n = len(cloud)
    m = cfg.surface_per_epoch
    replace_surface = n < m
    if replace_surface:
        logger.warning(f"Cloud has {n} points, fewer than {m} per epoch; sampling with replacement")
    idx = rng.choice(n, size=m, replace=replace_surface)
    sigma = knn_sigma(cloud.points, cfg.knn) if sigma is None else sigma

    near_idx = idx[rng.choice(m, size=cfg.near, replace=cfg.near > m)]
    near = cloud.points[near_idx] + rng.normal(size=(cfg.near, 3)) * sigma[near_idx, None]
    ambient = rng.uniform(-cfg.ambient_extent, cfg.ambient_extent, size=(cfg.ambient, 3))
    normals = cloud.normals[idx] if cloud.has_normals else None
    return Batch(cloud.points[idx], near, ambient, normals)


# -- losses ---------------------------------------------------------------------


def field_and_grad(field_fn: Field, points: np.ndarray) -> tuple[Tensor, Tensor]:
    """Field values and their spatial gradient, the latter still differentiable."""
    X = ad.leaf(points)
    values = field_fn(X)
    (grad,) = ad.grad(ad.tsum(values), [X], create_graph=True)
    return values, grad


def loss_surface(values: Tensor) -> Tensor:
    return ad.mean(ad.abs(values))


def loss_exterior(values: Tensor, exp_alpha: float = 100.0) -> Tensor:
    return ad.mean(ad.exp(ad.abs(values) * (-exp_alpha)))


def _safe_norm(v: Tensor) -> Tensor:
    sq = ad.dot_rows(v, v)
    nonzero = sq.data > 0.0
    return ad.where(nonzero, ad.sqrt(ad.where(nonzero, sq, 1.0)), 0.0)


def loss_normal(grad: Tensor, normals: np.ndarray) -> Tensor:
    return ad.mean(_safe_norm(grad - Tensor(normals)))


def loss_eikonal(grad: Tensor) -> Tensor:
    return ad.mean(ad.abs(1.0 - _safe_norm(grad)))


def loss_terms(
    field_fn: Field,
    batch: Batch,
    w: Loss3DWeights,
    mode: str,
    fs: Optional[FeatureSet] = None,
    V: Optional[Tensor] = None,
) -> dict[str, Tensor]:
    """Each loss term, unweighted; ``reg`` only when ``fs`` is given and the
    mode learns features."""
    if mode not in MODES:
        raise ValueError(f"unknown mode '{mode}', expected one of {MODES}")
    uses_normals = mode in ("mesh", "points_normals")
    if uses_normals and batch.normals is None:
        raise MissingNormalsError(f"mode '{mode}' needs oriented normals")

    surface_values, surface_grad = field_and_grad(field_fn, batch.surface)
    _, near_grad = field_and_grad(field_fn, batch.near)
    ambient_values = field_fn(Tensor(batch.ambient))

    terms = {
        "sur": loss_surface(surface_values),
        "ext": loss_exterior(ambient_values, w.exp_alpha),
        "ekl": loss_eikonal(ad.concat([surface_grad, near_grad], axis=0)),
    }
    if uses_normals:
        terms["nor"] = loss_normal(surface_grad, batch.normals)
    if fs is not None and mode != "mesh":
        terms["reg"] = loss_regularizer(fs, w.reg_lambda, V)
    return terms


def loss_sdf(
    field_fn: Field,
    batch: Batch,
    w: Loss3DWeights,
    mode: str,
    fs: Optional[FeatureSet] = None,
    V: Optional[Tensor] = None,
) -> Tensor:
    terms = loss_terms(field_fn, batch, w, mode, fs, V)
    total = Tensor(0.0)
    for name, term in terms.items():
        total = total + term * getattr(w, name)
    return total


def model_field(model: MlpModel, fs: Optional[FeatureSet], theta: Optional[Tensor] = None, V: Optional[Tensor] = None) -> Field:
    return lambda X: field_tensor(model, X, fs, theta, V)


# -- training -------------------------------------------------------------------


def train_sdf(
    cloud: PointCloud,
    fs0: Optional[FeatureSet],
    cfg: Train3DConfig,
    log: Optional[TrainingLog] = None,
) -> tuple[MlpModel, Optional[FeatureSet]]:
    """Train on a normalized cloud; returns the model and the (possibly moved) strips."""
    if cfg.mode not in MODES:
        raise ValueError(f"unknown mode '{cfg.mode}', expected one of {MODES}")
    if cfg.mode in ("mesh", "points_normals") and not cloud.has_normals:
        raise MissingNormalsError(f"mode '{cfg.mode}' needs oriented normals")
    rng = np.random.default_rng(cfg.seed)
    weights = cfg.resolved_weights()
    sampling = cfg.sampling

    fs = fs0 if cfg.use_features else None
    if fs is not None and cfg.merge_channels:
        fs = fs.merged()
    learning = fs is not None and cfg.learns_features()
    arch = MlpArch(
        input_dim=3,
        n_channels=fs.n_channels if fs is not None else 0,
        hidden_layers=cfg.hidden_layers,
        width=cfg.width,
        activation=cfg.activation,
        pe_frequencies=cfg.pe_frequencies,
    )
    warn_if_second_order(arch, weights.ekl > 0.0 or weights.nor > 0.0)
    model = MlpModel.initialize(arch, cfg.seed)

    sigma = knn_sigma(cloud.points, sampling.knn)
    if fs is not None:
        first = sample_batch(cloud, sampling, np.random.default_rng(cfg.seed + 1), sigma)
        model.feature_scale = feature_scale(np.concatenate([first.surface, first.near, first.ambient]), fs)
    logger.info(
        f"SDF training ({cfg.mode}): {sampling.epochs} epochs, {len(cloud)} points, "
        f"{arch.activation}, features={'learned' if learning else ('fixed' if fs is not None else 'off')}"
    )

    theta_state = AdamState(lr=cfg.lr)
    vertex_state = AdamState(lr=cfg.feature_lr)
    for epoch in range(sampling.epochs):
        batch = sample_batch(cloud, sampling, rng, sigma)
        theta = ad.leaf(model.params)
        V = ad.leaf(fs.vertices) if learning else None
        terms = loss_terms(model_field(model, fs, theta, V), batch, weights, cfg.mode, fs if learning else None, V)
        loss = Tensor(0.0)
        for name, term in terms.items():
            loss = loss + term * getattr(weights, name)
        if not np.isfinite(loss.item()):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}", model, fs, epoch)

        if learning:
            g_theta, g_v = loss_backward(loss, [theta, V])
            grads_v = np.where(fs.learnable[:, None], g_v, 0.0)
            moved, vertex_state = adam_step(fs.vertices, grads_v, vertex_state)
            fs = fs.with_vertices(np.where(fs.learnable[:, None], moved, fs.vertices))
        else:
            (g_theta,) = loss_backward(loss, [theta])
        params, theta_state = adam_step(model.params, g_theta, theta_state)
        model = MlpModel(arch, params, model.feature_scale)

        if (epoch + 1) % cfg.log_every == 0 or epoch + 1 == sampling.epochs:
            values = {name: term.item() for name, term in terms.items()}
            detail = " ".join(f"{k}={v:.3e}" for k, v in values.items())
            logger.info(f"[{epoch + 1}/{sampling.epochs}] loss={loss.item():.3e} {detail}")
            if log is not None:
                log.append(epoch=epoch + 1, loss=loss.item(), **values)
    return model, fs


def desk_sampling(surface_per_epoch: int = 2000, epochs: int = 500) -> SamplingConfig:
    """Scaled-down sampling for quick runs and tests."""
    return replace(
        SamplingConfig(),
        surface_total=max(surface_per_epoch, 5000),
        surface_per_epoch=surface_per_epoch,
        near=surface_per_epoch,
        ambient=max(1, surface_per_epoch // 2),
        epochs=epochs,
    )


# -- composition ----------------------------------------------------------------


BOOLEAN_OPS = ("union", "intersect", "diffAB", "diffBA")


def boolean_combine(f_a: Callable, f_b: Callable, op: str) -> Callable:
    """Pointwise min/max composition of two signed distance fields."""
    if op == "union":
        return lambda x: np.minimum(f_a(x), f_b(x))
    if op == "intersect":
        return lambda x: np.maximum(f_a(x), f_b(x))
    if op == "diffAB":
        return lambda x: np.maximum(f_a(x), -f_b(x))
    if op == "diffBA":
        return lambda x: np.maximum(f_b(x), -f_a(x))
    raise ValueError(f"unknown boolean op '{op}', expected one of {BOOLEAN_OPS}")

"""Multi-channel feature function: mollifier-weighted Green integrals over
the elements of each channel.

Channel ``k`` at ``x`` is ``sum_e phi(|x - c(e)|^2 / rho^2) * I_e(x)`` over
the elements of that channel, where ``I_e`` is the closed-form integral from
``green`` and ``phi`` the compactly supported bump with ``phi(0) = 1``.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .geom import (
    Element,
    FeatureGraph,
    GeometryError,
    TriMesh,
    element_centroid,
    make_element,
    read_feature_graph,
    read_obj_groups,
    write_feature_graph,
    write_obj,
)
from .green import distance_to_element, element_integral_tensor

logger = logging.getLogger("sharpfield.feature")

PathLike = Union[str, Path]


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class MollifierConfig:
    radius: float = 0.08
    normalizer: float = 1.0 / math.e

    def __post_init__(self):
        if not self.radius > 0.0:
            raise FeatureError(f"mollifier radius must be positive, got {self.radius}")
        if not self.normalizer > 0.0:
            raise FeatureError(f"mollifier normalizer must be positive, got {self.normalizer}")


@dataclass(frozen=True)
class FeatureSet:
    """Elements sharing one vertex array, each assigned to a channel.

    ``elements`` holds vertex indices, two per segment (2D) or three per
    triangle (3D). ``learnable`` marks the vertices whose positions training
    may move; ``reg_edges`` are the vertex pairs the length regularizer acts
    on.
    """

    vertices: np.ndarray
    elements: np.ndarray
    channels: np.ndarray
    n_channels: int
    mollifier: MollifierConfig = field(default_factory=MollifierConfig)
    learnable: Optional[np.ndarray] = None
    reg_edges: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64)
        if vertices.ndim != 2 or vertices.shape[1] not in (2, 3):
            raise FeatureError(f"vertices must be (V, 2) or (V, 3), got {vertices.shape}")
        d = vertices.shape[1]
        elements = np.asarray(self.elements, dtype=np.int64).reshape(-1, d)
        channels = np.asarray(self.channels, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "elements", elements)
        object.__setattr__(self, "channels", channels)
        learnable = np.ones(len(vertices), dtype=bool) if self.learnable is None else self.learnable
        object.__setattr__(self, "learnable", np.asarray(learnable, dtype=bool))
        reg = np.zeros((0, 2), dtype=np.int64) if self.reg_edges is None else self.reg_edges
        object.__setattr__(self, "reg_edges", np.asarray(reg, dtype=np.int64).reshape(-1, 2))

        if not np.all(np.isfinite(vertices)):
            raise FeatureError("feature vertices must be finite")
        if len(channels) != len(elements):
            raise FeatureError("exactly one channel per element is required")
        if self.n_channels < 1:
            raise FeatureError("at least one channel is required")
        if len(channels) and (channels.min() < 0 or channels.max() >= self.n_channels):
            raise FeatureError(f"channel index out of range [0, {self.n_channels})")
        if len(elements) and (elements.min() < 0 or elements.max() >= len(vertices)):
            raise FeatureError("element vertex index out of range")
        if self.learnable.shape != (len(vertices),):
            raise FeatureError("one learnable flag per vertex is required")

    @classmethod
    def from_graph(
        cls,
        graph: FeatureGraph,
        mollifier: Optional[MollifierConfig] = None,
        learnable: Optional[np.ndarray] = None,
    ) -> "FeatureSet":
        """2D feature set whose elements are the graph edges, channels from its colors."""
        if graph.dim != 2:
            raise FeatureError("graph features are segments; use strip triangles in 3D")
        colors = graph.colors if graph.colors is not None else np.zeros(graph.n_edges, dtype=np.int64)
        n_channels = int(colors.max()) + 1 if len(colors) else 1
        return cls(
            vertices=graph.vertices,
            elements=graph.edges,
            channels=colors,
            n_channels=n_channels,
            mollifier=mollifier or MollifierConfig(),
            learnable=learnable,
            reg_edges=graph.edges,
        )

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def element(self, i: int) -> Element:
        return make_element(self.vertices[self.elements[i]])

    def centroids(self, vertices: Optional[np.ndarray] = None) -> np.ndarray:
        v = self.vertices if vertices is None else vertices
        if not len(self.elements):
            return np.zeros((0, self.dim))
        return v[self.elements].mean(axis=1)

    def with_vertices(self, vertices: np.ndarray) -> "FeatureSet":
        return FeatureSet(
            vertices, self.elements, self.channels, self.n_channels,
            self.mollifier, self.learnable, self.reg_edges,
        )

    def merged(self) -> "FeatureSet":
        """All elements on a single channel."""
        return FeatureSet(
            self.vertices, self.elements, np.zeros_like(self.channels), 1,
            self.mollifier, self.learnable, self.reg_edges,
        )

    def graph(self) -> FeatureGraph:
        if self.dim != 2:
            raise FeatureError("only 2D feature sets are graphs")
        return FeatureGraph(self.vertices, self.elements, self.channels)


@dataclass
class FeatureEval:
    values: np.ndarray
    grad_query: np.ndarray
    grad_vertices: dict[int, np.ndarray]
    one_sided: bool = False


def mollifier(r: float, cfg: MollifierConfig) -> float:
    if abs(r) >= 1.0:
        return 0.0
    return math.exp(-1.0 / (1.0 - r * r)) / cfg.normalizer


def mollifier_tensor(r: Tensor, cfg: MollifierConfig) -> Tensor:
    inside = np.abs(r.data) < 1.0
    safe = ad.where(inside, r, 0.0)
    bump = ad.exp(-1.0 / (1.0 - safe * safe)) / cfg.normalizer
    return ad.where(inside, bump, 0.0)


def local_weight(x, e: Element, cfg: MollifierConfig) -> float:
    diff = np.asarray(x, dtype=np.float64) - element_centroid(e)
    return mollifier(float(diff @ diff) / cfg.radius**2, cfg)


def support_pairs(
    points: np.ndarray, fs: FeatureSet, vertices: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray]:
    """(query, element) index pairs with the query strictly inside the
    element's support ball, ordered by query then element."""
    if fs.n_elements == 0 or len(points) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    centroids = fs.centroids(vertices)
    tree = cKDTree(centroids)
    hits = tree.query_ball_point(points, r=fs.mollifier.radius, return_sorted=True)
    counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
    qi = np.repeat(np.arange(len(points), dtype=np.int64), counts)
    ei = np.fromiter((e for h in hits for e in h), dtype=np.int64, count=int(counts.sum()))
    diff = points[qi] - centroids[ei]
    inside = np.einsum("ij,ij->i", diff, diff) < fs.mollifier.radius**2
    return qi[inside], ei[inside]


def feature_tensor(X: Tensor, fs: FeatureSet, V: Optional[Tensor] = None) -> Tensor:
    """Raw channel values ``(P, n_channels)`` for query rows ``X``.

    ``V`` replaces the stored vertex positions (pass a leaf to differentiate
    with respect to them).
    """
    V = Tensor(fs.vertices) if V is None else V
    n_points = X.shape[0]
    qi, ei = support_pairs(X.data, fs, V.data)
    if len(qi) == 0:
        return Tensor(np.zeros((n_points, fs.n_channels)))

    xp = ad.take(X, qi)
    verts = [ad.take(V, fs.elements[ei, k]) for k in range(fs.elements.shape[1])]
    centroid = verts[0]
    for v in verts[1:]:
        centroid = centroid + v
    centroid = centroid / float(len(verts))
    diff = xp - centroid
    r = ad.dot_rows(diff, diff) / fs.mollifier.radius**2
    weight = mollifier_tensor(r, fs.mollifier)
    contrib = weight * element_integral_tensor(xp, verts)
    slots = qi * fs.n_channels + fs.channels[ei]
    flat = ad.segment_sum(contrib, slots, n_points * fs.n_channels)
    return ad.reshape(flat, (n_points, fs.n_channels))


def feature_values(points: np.ndarray, fs: FeatureSet) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, fs.dim)
    with ad.no_grad():
        return feature_tensor(Tensor(points), fs).data.copy()


def eval_feature(x, fs: FeatureSet) -> FeatureEval:
    x = np.asarray(x, dtype=np.float64).reshape(fs.dim)
    xt = ad.leaf(x[None])
    vt = ad.leaf(fs.vertices)
    out = feature_tensor(xt, fs, vt)

    _, ei = support_pairs(x[None], fs)
    touched = np.unique(fs.elements[ei]) if len(ei) else np.zeros(0, dtype=np.int64)
    one_sided = any(distance_to_element(x, fs.element(int(e))) <= 1e-12 for e in ei)
    if one_sided:
        logger.debug("query lies on a feature element; gradient is one-sided")

    grad_query = np.zeros((fs.n_channels, fs.dim))
    grad_vertices = {int(v): np.zeros((fs.n_channels, fs.dim)) for v in touched}
    if out.requires_grad:
        for k in range(fs.n_channels):
            gx, gv = ad.grad(out[0, k], [xt, vt])
            grad_query[k] = gx.data[0]
            for v in touched:
                grad_vertices[int(v)][k] = gv.data[v]
    return FeatureEval(out.data[0].copy(), grad_query, grad_vertices, one_sided)


def normal_jump(fs: FeatureSet, x0, n, eps: float, tol: float = 1e-10) -> float:
    """Normal-derivative jump of the channel sum across M at ``x0``.

    One-sided difference quotients at ``eps`` and ``eps/2`` are combined by
    Richardson extrapolation. The ``+n`` and ``-n`` samples are added before
    anything else, so the result does not depend on the sign of ``n``.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(fs.dim)
    n = np.asarray(n, dtype=np.float64).reshape(fs.dim)
    if not eps > 0.0:
        raise FeatureError("difference step must be positive")
    if not any(distance_to_element(x0, fs.element(i)) <= tol for i in range(fs.n_elements)):
        raise FeatureError("jump point is not on the feature set")

    def quotient(h: float) -> float:
        samples = feature_values(np.stack([x0 + h * n, x0 - h * n, x0]), fs).sum(axis=1)
        return ((samples[0] + samples[1]) - 2.0 * samples[2]) / h

    return 2.0 * quotient(0.5 * eps) - quotient(eps)


def feature_scale(points: np.ndarray, fs: FeatureSet) -> float:
    """Multiplier bringing the RMS of the raw channel values over ``points`` to 1."""
    values = feature_values(points, fs)
    rms = float(np.sqrt(np.mean(values**2))) if values.size else 0.0
    if rms == 0.0 or not np.isfinite(rms):
        logger.warning("feature values vanish on the initial batch; using scale 1")
        return 1.0
    return 1.0 / rms


# -- persistence --------------------------------------------------------------


def _header(fs: FeatureSet, scale: float, comments: Optional[list[str]]) -> list[str]:
    head = [f"mollifier rho={fs.mollifier.radius!r} scale={scale!r}"]
    head.append("learnable=" + "".join("1" if f else "0" for f in fs.learnable))
    return head + list(comments or [])


def save_feature_set(
    path: PathLike, fs: FeatureSet, scale: float = 1.0, comments: Optional[list[str]] = None
):
    """2D sets go to the FG text format, 3D strip sets to OBJ with channel groups."""
    head = _header(fs, scale, comments)
    if fs.dim == 2:
        write_feature_graph(path, fs.graph(), head)
    else:
        write_obj(path, TriMesh(fs.vertices, fs.elements), groups=fs.channels, comments=head, lines=fs.reg_edges)
    logger.debug(f"Saved {fs.n_elements} elements in {fs.n_channels} channels to {path}")


def load_feature_set(path: PathLike) -> tuple[FeatureSet, float]:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        mesh, groups, rails = read_obj_groups(path)
        header = _read_obj_header(path)
        channels = groups if groups is not None else np.zeros(len(mesh.faces), dtype=np.int64)
        if np.any(channels < 0):
            raise GeometryError(f"{path}: faces outside a channel group")
        vertices, elements = mesh.vertices, mesh.faces
        reg_edges = rails
    else:
        graph, header = read_feature_graph(path)
        channels = graph.colors if graph.colors is not None else np.zeros(graph.n_edges, dtype=np.int64)
        vertices, elements = graph.vertices, graph.edges
        reg_edges = graph.edges

    radius = float(header.get("rho", MollifierConfig.radius))
    scale = float(header.get("scale", 1.0))
    learnable = None
    if "learnable" in header and len(header["learnable"]) == len(vertices):
        learnable = np.array([c == "1" for c in header["learnable"]], dtype=bool)
    n_channels = int(channels.max()) + 1 if len(channels) else 1
    fs = FeatureSet(vertices, elements, channels, n_channels, MollifierConfig(radius), learnable, reg_edges)
    return fs, scale


def _read_obj_header(path: Path) -> dict[str, str]:
    header: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            for token in line[1:].split():
                if "=" in token:
                    key, value = token.split("=", 1)
                    header[key] = value
    return header

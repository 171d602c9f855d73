"""Strip feature surfaces around sharp curves.

Each sharp edge is widened into a thin quad along per-vertex guiding
directions, so the strips approximate the medial surface near the crease.
Strip vertex ``2v`` is ``v - w*g_v`` and ``2v + 1`` is ``v + w*g_v``.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial import cKDTree

from .geom import FeatureGraph, PointCloud, StripMesh, TriMesh

logger = logging.getLogger("sharpfield.featgen")

FALLBACK_DIR = np.array([0.0, 0.0, 1.0])


class FlatEdgeError(ValueError):
    pass


@dataclass(frozen=True)
class FeatGenConfig:
    threshold: float = math.radians(30.0)
    half_width: float = 0.04
    energy_lambda: float = 0.1
    knn: int = 32
    segment_length: float = 0.025
    steps: int = 200
    step_size: float = 0.05

    def __post_init__(self):
        if not self.half_width > 0.0:
            raise ValueError("strip half-width must be positive")
        if not 0.0 < self.threshold < math.pi:
            raise ValueError("sharpness threshold must lie in (0, pi)")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# -- mesh pipeline ----------------------------------------------------------------


def sharp_mesh_edges(m: TriMesh, cfg: FeatGenConfig = FeatGenConfig()) -> np.ndarray:
    """Mesh edges ``(low, high)`` whose face normals differ by more than the threshold."""
    cos_threshold = math.cos(cfg.threshold)
    sharp = []
    for key, faces in sorted(m.edge_faces.items()):
        if len(faces) != 2:
            continue
        n0, n1 = m.face_normals[faces[0]], m.face_normals[faces[1]]
        if float(n0 @ n1) < cos_threshold:
            sharp.append(key)
    return np.array(sharp, dtype=np.int64).reshape(-1, 2)


def detect_sharp_edges(m: TriMesh, cfg: FeatGenConfig = FeatGenConfig()) -> FeatureGraph:
    graph, _ = _sharp_graph(m, cfg)
    return graph


def _sharp_graph(m: TriMesh, cfg: FeatGenConfig) -> tuple[FeatureGraph, np.ndarray]:
    mesh_edges = sharp_mesh_edges(m, cfg)
    used = np.unique(mesh_edges)
    remap = np.full(len(m.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    graph = FeatureGraph(m.vertices[used].reshape(-1, 3), remap[mesh_edges])
    logger.info(f"Found {graph.n_edges} sharp edges on {graph.n_vertices} vertices")
    return graph, mesh_edges


def edge_guiding_dir(m: TriMesh, edge: tuple[int, int]) -> np.ndarray:
    """Unit direction perpendicular to the edge in the dihedral's bisector
    plane, pointing away from the solid."""
    key = (min(edge), max(edge))
    faces = m.edge_faces.get(key, [])
    if len(faces) != 2:
        raise FlatEdgeError(f"edge {key} does not have two incident faces")
    n0, n1 = m.face_normals[faces[0]], m.face_normals[faces[1]]
    total = n0 + n1
    if float(n0 @ n1) > 1.0 - 1e-12 or np.linalg.norm(total) < 1e-12:
        raise FlatEdgeError(f"edge {key} has no defined crease direction")
    return _unit(total)


def vertex_energy(g: np.ndarray, bisector_normals: np.ndarray, mean: np.ndarray, lam: float) -> float:
    return float(np.abs(bisector_normals @ g).sum() + lam * np.linalg.norm(g - mean))


def vertex_guiding_dir(
    S: FeatureGraph, edge_dirs: np.ndarray, lam: float = 0.1, cfg: FeatGenConfig = FeatGenConfig()
) -> np.ndarray:
    """Per-vertex guiding directions aligned with the bisector planes of the
    incident edges (projected subgradient descent on the sphere).

    The mean term measures distance to the plain average of the incident
    directions, which is not unit length; descent starts from its
    normalization.
    """
    dirs = np.zeros((S.n_vertices, 3))
    for v, incident in enumerate(S.incident_edges):
        if not incident:
            dirs[v] = FALLBACK_DIR
            continue
        if len(incident) == 1:
            dirs[v] = edge_dirs[incident[0]]
            continue

        normals = []
        for k in incident:
            tangent = _unit(S.vertices[S.edges[k, 1]] - S.vertices[S.edges[k, 0]])
            normals.append(np.cross(edge_dirs[k], tangent))
        normals = np.array(normals)
        mean = edge_dirs[incident].mean(axis=0)
        if np.linalg.norm(mean) < 1e-12:
            logger.warning(f"Vertex {v}: incident guiding directions cancel; using the first")
            dirs[v] = edge_dirs[incident[0]]
            continue
        start = _unit(mean)

        g = start.copy()
        best, best_energy = g.copy(), vertex_energy(g, normals, mean, lam)
        for _ in range(cfg.steps):
            sub = np.sign(normals @ g) @ normals
            offset = g - mean
            dist = np.linalg.norm(offset)
            if dist > 0.0:
                sub = sub + lam * offset / dist
            sub = sub - (sub @ g) * g
            if np.linalg.norm(sub) < 1e-15:
                break
            g = g - cfg.step_size * sub
            g = g / np.linalg.norm(g)
            energy = vertex_energy(g, normals, mean, lam)
            if energy < best_energy:
                best, best_energy = g.copy(), energy
        if not np.all(np.isfinite(best)):
            logger.warning(f"Vertex {v}: direction optimization failed; using the mean direction")
            best = start
        dirs[v] = best
    return dirs


def resample_graph(
    graph: FeatureGraph, max_length: float, edge_dirs: Optional[np.ndarray] = None
) -> tuple[FeatureGraph, Optional[np.ndarray]]:
    """Split every edge into equal pieces no longer than ``max_length``.

    New edges keep the guiding direction and the color of the edge they
    came from.
    """
    vertices = [row for row in graph.vertices]
    edges, dirs, colors = [], [], []
    for k, (i, j) in enumerate(graph.edges):
        a, b = graph.vertices[i], graph.vertices[j]
        pieces = max(1, int(math.ceil(np.linalg.norm(b - a) / max_length - 1e-9)))
        prev = int(i)
        for p in range(1, pieces + 1):
            if p == pieces:
                nxt = int(j)
            else:
                vertices.append(a + (b - a) * (p / pieces))
                nxt = len(vertices) - 1
            edges.append([prev, nxt])
            if edge_dirs is not None:
                dirs.append(edge_dirs[k])
            if graph.colors is not None:
                colors.append(graph.colors[k])
            prev = nxt
    out = FeatureGraph(
        np.array(vertices).reshape(-1, graph.dim),
        np.array(edges, dtype=np.int64).reshape(-1, 2),
        np.array(colors, dtype=np.int64) if graph.colors is not None else None,
    )
    return out, (np.array(dirs).reshape(-1, 3) if edge_dirs is not None else None)


def _rail_alignment(vi, vj, gi, gj, w, flipped: bool) -> float:
    sign = -1.0 if flipped else 1.0
    r1 = (vj + w * gj) - (vi + sign * w * gi)
    r2 = (vj - w * gj) - (vi - sign * w * gi)
    denom = np.linalg.norm(r1) * np.linalg.norm(r2)
    return abs(float(r1 @ r2) / denom) if denom > 0.0 else 0.0


def connect_strips(S: FeatureGraph, dirs: np.ndarray, w: float) -> StripMesh:
    """One quad per graph edge, choosing between the straight and the crossed
    pairing of offset points by which keeps the two rails closer to parallel."""
    n = S.n_vertices
    strip_vertices = np.empty((2 * n, 3))
    strip_vertices[0::2] = S.vertices - w * dirs
    strip_vertices[1::2] = S.vertices + w * dirs

    quads = np.zeros((S.n_edges, 4), dtype=np.int64)
    crossed = 0
    for k, (i, j) in enumerate(S.edges):
        vi, vj, gi, gj = S.vertices[i], S.vertices[j], dirs[i], dirs[j]
        straight = _rail_alignment(vi, vj, gi, gj, w, flipped=False)
        flipped = _rail_alignment(vi, vj, gi, gj, w, flipped=True)
        if flipped > straight:
            quads[k] = [2 * i, 2 * i + 1, 2 * j, 2 * j + 1]
            crossed += 1
        else:
            quads[k] = [2 * i, 2 * i + 1, 2 * j + 1, 2 * j]
    if crossed:
        logger.debug(f"{crossed} of {S.n_edges} strips use the crossed pairing")

    faces = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])
    source = np.concatenate([np.arange(S.n_edges), np.arange(S.n_edges)])
    order = np.argsort(source, kind="stable")
    rails = np.concatenate([quads[:, [1, 2]], quads[:, [0, 3]]])
    return StripMesh(TriMesh(strip_vertices, faces[order]), source[order], quads, rails)


def build_strip_mesh(S: FeatureGraph, vertex_dirs: np.ndarray, w: float) -> StripMesh:
    return connect_strips(S, vertex_dirs, w)


def strips_from_mesh(m: TriMesh, cfg: FeatGenConfig = FeatGenConfig()) -> tuple[FeatureGraph, StripMesh]:
    """Sharp-edge graph (resampled) and its strips for a mesh."""
    graph, mesh_edges = _sharp_graph(m, cfg)
    edge_dirs = np.array([edge_guiding_dir(m, tuple(e)) for e in mesh_edges]).reshape(-1, 3)
    graph, edge_dirs = resample_graph(graph, cfg.segment_length, edge_dirs)
    dirs = vertex_guiding_dir(graph, edge_dirs, cfg.energy_lambda, cfg)
    return graph, build_strip_mesh(graph, dirs, cfg.half_width)


# -- point cloud pipeline ---------------------------------------------------------


def cloud_guiding_dirs(S: FeatureGraph, cloud: PointCloud, k: int = 32) -> np.ndarray:
    """Direction from the centroid of each vertex's neighborhood to the vertex.

    Orientation is not consistent across vertices; strip construction copes.
    """
    if len(cloud) == 0:
        raise ValueError("guiding directions need a nonempty cloud")
    k = min(k, len(cloud))
    _, idx = cKDTree(cloud.points).query(S.vertices, k=k)
    idx = np.asarray(idx).reshape(S.n_vertices, k)
    offsets = S.vertices - cloud.points[idx].mean(axis=1)
    length = np.linalg.norm(offsets, axis=1)
    degenerate = length < 1e-12
    if degenerate.any():
        logger.warning(f"{int(degenerate.sum())} vertices sit on their neighborhood centroid; using +z")
    dirs = offsets / np.where(degenerate, 1.0, length)[:, None]
    dirs[degenerate] = FALLBACK_DIR
    return dirs


def build_strip_points(S: FeatureGraph, dirs: np.ndarray, w: float) -> StripMesh:
    return connect_strips(S, dirs, w)


def strips_from_points(
    S: FeatureGraph, cloud: PointCloud, cfg: FeatGenConfig = FeatGenConfig()
) -> tuple[FeatureGraph, StripMesh]:
    graph, _ = resample_graph(S, cfg.segment_length)
    dirs = cloud_guiding_dirs(graph, cloud, cfg.knn)
    return graph, build_strip_points(graph, dirs, cfg.half_width)


def sharp_graph_from_cloud(cloud: PointCloud, k: int = 32, variation: float = 0.05) -> FeatureGraph:
    """Rough sharp-curve guess: points whose neighborhood covariance is far
    from planar, joined by a minimum spanning tree with long links dropped."""
    k = min(k, len(cloud))
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k)
    neighborhoods = cloud.points[np.asarray(idx).reshape(len(cloud), k)]
    centered = neighborhoods - neighborhoods.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eig = np.linalg.eigvalsh(cov)
    score = eig[:, 0] / np.maximum(eig.sum(axis=1), 1e-300)
    candidates = np.nonzero(score > variation)[0]
    if len(candidates) < 2:
        return FeatureGraph(np.zeros((0, 3)), np.zeros((0, 2), dtype=np.int64))

    pts = cloud.points[candidates]
    sub = cKDTree(pts)
    pairs = sub.query_pairs(r=np.inf if len(pts) < 3 else _link_radius(sub, pts), output_type="ndarray")
    if len(pairs) == 0:
        return FeatureGraph(pts, np.zeros((0, 2), dtype=np.int64))
    lengths = np.linalg.norm(pts[pairs[:, 0]] - pts[pairs[:, 1]], axis=1)
    adjacency = coo_matrix((lengths, (pairs[:, 0], pairs[:, 1])), shape=(len(pts), len(pts)))
    mst = minimum_spanning_tree(adjacency).tocoo()
    edges = np.stack([mst.row, mst.col], axis=1).astype(np.int64)
    keep = mst.data <= 3.0 * np.median(mst.data)
    logger.info(f"Cloud heuristic: {len(candidates)} candidate points, {int(keep.sum())} links")
    return FeatureGraph(pts, edges[keep])


def _link_radius(tree: cKDTree, pts: np.ndarray) -> float:
    dist, _ = tree.query(pts, k=2)
    return 3.0 * float(np.median(dist[:, 1]))

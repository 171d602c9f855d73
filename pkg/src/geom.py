import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Union

import numpy as np

logger = logging.getLogger("sharpfield.geom")

PathLike = Union[str, Path]


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64))

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.a, self.b])

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))


@dataclass(frozen=True)
class Triangle:
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    def __post_init__(self):
        for name in ("v0", "v1", "v2"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))

    @property
    def points(self) -> np.ndarray:
        return np.stack([self.v0, self.v1, self.v2])

    @property
    def area(self) -> float:
        return 0.5 * float(np.linalg.norm(np.cross(self.v1 - self.v0, self.v2 - self.v0)))

    @property
    def diameter(self) -> float:
        p = self.points
        return float(max(np.linalg.norm(p[i] - p[j]) for i, j in ((0, 1), (1, 2), (2, 0))))


Element = Union[Segment, Triangle]


def element_centroid(e: Element) -> np.ndarray:
    return e.points.mean(axis=0)


def make_element(points: np.ndarray) -> Element:
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 2:
        return Segment(points[0], points[1])
    if len(points) == 3:
        return Triangle(points[0], points[1], points[2])
    raise GeometryError(f"an element has 2 or 3 vertices, got {len(points)}")


@dataclass(frozen=True)
class FeatureGraph:
    """Undirected graph of feature vertices; optional channel color per edge."""

    vertices: np.ndarray
    edges: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64)
        if vertices.ndim != 2:
            vertices = vertices.reshape(0, 2) if vertices.size == 0 else vertices
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "edges", edges)
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.int64)
            if colors.shape != (len(edges),):
                raise GeometryError("one color per edge is required")
            object.__setattr__(self, "colors", colors)

        if not np.all(np.isfinite(vertices)):
            raise GeometryError("feature vertices must be finite")
        if len(edges) == 0:
            return
        if edges.min() < 0 or edges.max() >= len(vertices):
            raise GeometryError("edge index out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise GeometryError("self-loop in feature graph")
        keys = np.sort(edges, axis=1)
        if len(np.unique(keys, axis=0)) != len(keys):
            raise GeometryError("duplicate edge in feature graph")

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def incident_edges(self) -> list[list[int]]:
        incident: list[list[int]] = [[] for _ in range(len(self.vertices))]
        for k, (i, j) in enumerate(self.edges):
            incident[i].append(k)
            incident[j].append(k)
        return incident

    def with_colors(self, colors: np.ndarray) -> "FeatureGraph":
        return FeatureGraph(self.vertices, self.edges, colors)

    def with_vertices(self, vertices: np.ndarray) -> "FeatureGraph":
        return FeatureGraph(vertices, self.edges, self.colors)


def vertex_degrees(g: FeatureGraph) -> list[int]:
    degrees = np.zeros(len(g.vertices), dtype=np.int64)
    if len(g.edges):
        np.add.at(degrees, g.edges.ravel(), 1)
    return degrees.tolist()


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)
        if len(faces) and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise GeometryError("face index out of range")

    @cached_property
    def face_normals(self) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0.0, length, 1.0)

    @cached_property
    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    @cached_property
    def edge_faces(self) -> dict[tuple[int, int], list[int]]:
        """Undirected edge (low, high) -> incident faces, built on first use."""
        adjacency: dict[tuple[int, int], list[int]] = {}
        for f, (a, b, c) in enumerate(self.faces.tolist()):
            for i, j in ((a, b), (b, c), (c, a)):
                adjacency.setdefault((min(i, j), max(i, j)), []).append(f)
        return adjacency

    @property
    def edges(self) -> np.ndarray:
        return np.array(sorted(self.edge_faces), dtype=np.int64).reshape(-1, 2)

    def is_closed(self) -> bool:
        return all(len(faces) == 2 for faces in self.edge_faces.values())

    def triangle(self, f: int) -> Triangle:
        a, b, c = self.vertices[self.faces[f]]
        return Triangle(a, b, c)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", points)
        if self.normals is None:
            return
        normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(normals) != len(points):
            raise GeometryError("one normal per point is required")
        if len(normals) and np.max(np.abs(np.linalg.norm(normals, axis=1) - 1.0)) > 1e-6:
            raise GeometryError("normals must be unit length")
        object.__setattr__(self, "normals", normals)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None


def dihedral_angle(m: TriMesh, edge: tuple[int, int]) -> float:
    """Interior angle between the two faces sharing ``edge``, in [0, pi].

    Coplanar faces give pi, a cube edge pi/2. Faces must be consistently
    oriented.
    """
    key = (min(edge), max(edge))
    faces = m.edge_faces.get(key)
    if faces is None or len(faces) != 2:
        count = 0 if faces is None else len(faces)
        raise GeometryError(f"no dihedral for edge {key}: {count} incident faces")
    n0, n1 = m.face_normals[faces[0]], m.face_normals[faces[1]]
    cos_normals = float(np.clip(np.dot(n0, n1), -1.0, 1.0))
    return math.pi - math.acos(cos_normals)


# -- file formats -------------------------------------------------------------


def read_obj(path: PathLike) -> TriMesh:
    """Read ``v`` and ``f`` records of an ASCII Wavefront file; polygons are fanned."""
    return read_obj_groups(path)[0]


def read_obj_groups(path: PathLike) -> tuple[TriMesh, Optional[np.ndarray], np.ndarray]:
    """Like ``read_obj``, also returning the ``g channel_<k>`` group of each face
    (``None`` when the file has no such groups) and the two-point ``l`` records."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    groups: list[int] = []
    current = -1
    lines: list[list[int]] = []
    seen_group = False
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    vertices.append([float(t) for t in parts[1:4]])
                elif tag == "g" and len(parts) > 1 and parts[1].startswith("channel_"):
                    current = int(parts[1][len("channel_"):])
                    seen_group = True
                elif tag == "f":
                    idx = []
                    for token in parts[1:]:
                        k = int(token.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(vertices) + k)
                    for t in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[t], idx[t + 1]])
                        groups.append(current)
                elif tag == "l":
                    idx = [int(t.split("/")[0]) - 1 for t in parts[1:]]
                    lines.extend([a, b] for a, b in zip(idx[:-1], idx[1:]))
            except ValueError as e:
                raise GeometryError(f"{path}:{line_no}: malformed '{tag}' record") from e
    logger.debug(f"Read {path}: {len(vertices)} vertices, {len(faces)} faces")
    mesh = TriMesh(np.array(vertices).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    groups_out = np.array(groups, dtype=np.int64) if seen_group else None
    return mesh, groups_out, np.array(lines, dtype=np.int64).reshape(-1, 2)


def write_obj(
    path: PathLike,
    mesh: TriMesh,
    groups: Optional[np.ndarray] = None,
    normals: Optional[np.ndarray] = None,
    comments: Optional[list[str]] = None,
    lines: Optional[np.ndarray] = None,
):
    """Write a mesh; ``groups`` (per face) become ``g channel_<k>`` blocks and
    ``lines`` (vertex pairs) become ``l`` records."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in comments or []:
            fh.write(f"# {c}\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        if normals is not None:
            for n in normals:
                fh.write(f"vn {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}\n")
        order = np.arange(len(mesh.faces))
        if groups is not None:
            order = np.argsort(groups, kind="stable")
        current = None
        for f in order:
            if groups is not None and groups[f] != current:
                current = groups[f]
                fh.write(f"g channel_{int(current)}\n")
            a, b, c = mesh.faces[f] + 1
            if normals is not None:
                fh.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")
            else:
                fh.write(f"f {a} {b} {c}\n")
        for a, b in np.asarray(lines if lines is not None else [], dtype=np.int64).reshape(-1, 2) + 1:
            fh.write(f"l {a} {b}\n")


def read_xyz(path: PathLike) -> PointCloud:
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] not in (3, 6):
        raise GeometryError(f"{path}: expected 3 or 6 columns, got {data.shape[1]}")
    if data.shape[1] == 3:
        return PointCloud(data)
    normals = data[:, 3:]
    length = np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(data[:, :3], normals / np.where(length > 0, length, 1.0))


def write_xyz(path: PathLike, cloud: PointCloud):
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    np.savetxt(path, data, fmt="%.17g")


def read_feature_graph(path: PathLike) -> tuple[FeatureGraph, dict[str, str]]:
    """Read the ``FG <dim>`` text format; ``# key=value`` comments are returned."""
    header: dict[str, str] = {}
    vertices: list[list[float]] = []
    edges: list[list[int]] = []
    colors: list[int] = []
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0].startswith("#"):
                for token in parts[1:]:
                    if "=" in token:
                        key, value = token.split("=", 1)
                        header[key] = value
                continue
            try:
                if parts[0] == "FG":
                    dim = int(parts[1])
                elif parts[0] == "v":
                    vertices.append([float(t) for t in parts[1:]])
                elif parts[0] == "e":
                    edges.append([int(parts[1]), int(parts[2])])
                    if len(parts) > 3:
                        colors.append(int(parts[3]))
                else:
                    raise GeometryError(f"{path}:{line_no}: unknown record '{parts[0]}'")
            except (IndexError, ValueError) as e:
                raise GeometryError(f"{path}:{line_no}: malformed record") from e
    if dim is None:
        raise GeometryError(f"{path}: missing 'FG <dim>' line")
    if any(len(v) != dim for v in vertices):
        raise GeometryError(f"{path}: vertex arity does not match dimension {dim}")
    if colors and len(colors) != len(edges):
        raise GeometryError(f"{path}: colors must be given for all edges or none")
    graph = FeatureGraph(
        np.array(vertices, dtype=np.float64).reshape(-1, dim),
        np.array(edges, dtype=np.int64).reshape(-1, 2),
        np.array(colors, dtype=np.int64) if colors else None,
    )
    return graph, header


def write_feature_graph(
    path: PathLike, graph: FeatureGraph, comments: Optional[list[str]] = None
):
    with open(path, "w", encoding="utf-8") as fh:
        for c in comments or []:
            fh.write(f"# {c}\n")
        fh.write(f"FG {graph.dim}\n")
        for v in graph.vertices:
            fh.write("v " + " ".join(f"{x:.17g}" for x in v) + "\n")
        for k, (i, j) in enumerate(graph.edges):
            if graph.colors is not None:
                fh.write(f"e {i} {j} {graph.colors[k]}\n")
            else:
                fh.write(f"e {i} {j}\n")


@dataclass(frozen=True)
class StripMesh:
    """Strip triangles plus the bookkeeping needed to turn them into features.

    ``source_edge[f]`` is the sharp-graph edge face ``f`` was built from
    (``-1`` means untagged); ``quads[e]`` holds the four strip-vertex
    indices of edge ``e`` with ``quads[e, 0:2]`` the cross-section at the
    edge's first vertex and ``quads[e, 3], quads[e, 2]`` the one at its
    second; ``rails`` are the boundary edges of the strip.
    """

    mesh: TriMesh
    source_edge: np.ndarray
    quads: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.int64))
    rails: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        object.__setattr__(self, "source_edge", np.asarray(self.source_edge, dtype=np.int64))
        object.__setattr__(self, "quads", np.asarray(self.quads, dtype=np.int64).reshape(-1, 4))
        object.__setattr__(self, "rails", np.asarray(self.rails, dtype=np.int64).reshape(-1, 2))
        if len(self.source_edge) != len(self.mesh.faces):
            raise GeometryError("one source edge per strip triangle is required")

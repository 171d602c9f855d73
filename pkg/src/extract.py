"""Sampling fields on regular grids, iso-curves and dual-contoured meshes."""

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import cv2
import numpy as np

from .feature import FeatureSet
from .geom import TriMesh
from .nnet import MlpModel, evaluate_field

logger = logging.getLogger("sharpfield.extract")

PathLike = Union[str, Path]
ValueFn = Callable[[np.ndarray], np.ndarray]

MAGIC = b"SFG1"
BISECTION_TOL = 1e-6
QEF_MASS_WEIGHT = 1e-2
CHUNK = 8192


class GridFormatError(ValueError):
    pass


@dataclass
class FieldGrid:
    """Values on the nodes of a box, row-major with x varying fastest."""

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.resolution = tuple(int(r) for r in self.resolution)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if len(self.resolution) not in (2, 3) or len(self.bbox_min) != len(self.resolution):
            raise GridFormatError("grid must be 2D or 3D with a matching box")
        if min(self.resolution) < 2:
            raise GridFormatError("at least two nodes per axis are required")
        if self.values.size != math.prod(self.resolution):
            raise GridFormatError(f"expected {math.prod(self.resolution)} values, got {self.values.size}")

    @property
    def dim(self) -> int:
        return len(self.resolution)

    @property
    def spacing(self) -> np.ndarray:
        return (self.bbox_max - self.bbox_min) / (np.asarray(self.resolution) - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.bbox_min, self.bbox_max, self.resolution)]

    def as_array(self) -> np.ndarray:
        """Values indexed ``[k, j, i]`` (``[j, i]`` in 2D)."""
        return self.values.reshape(self.resolution[::-1])


def grid_nodes(bbox_min, bbox_max, resolution) -> np.ndarray:
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(bbox_min, bbox_max, resolution)]
    mesh = np.meshgrid(*axes[::-1], indexing="ij")
    return np.stack([m.ravel() for m in mesh[::-1]], axis=1)


def evaluate_chunked(fn: ValueFn, points: np.ndarray, threads: int = 1, chunk: int = CHUNK) -> np.ndarray:
    """``fn`` over ``points`` in chunks; chunk results are reassembled in order."""
    if len(points) == 0:
        return np.zeros(0)
    parts = [points[s : s + chunk] for s in range(0, len(points), chunk)]
    if threads <= 1 or len(parts) == 1:
        return np.concatenate([np.asarray(fn(p), dtype=np.float64).reshape(-1) for p in parts])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(fn, parts))
    return np.concatenate([np.asarray(r, dtype=np.float64).reshape(-1) for r in results])


def model_value_fn(model: MlpModel, fs: Optional[FeatureSet]) -> ValueFn:
    return lambda points: evaluate_field(model, fs, points)


def model_grad_fn(model: MlpModel, fs: Optional[FeatureSet]) -> ValueFn:
    return lambda points: evaluate_field(model, fs, points, with_grad=True)[1]


def sample_function(fn: ValueFn, bbox_min, bbox_max, resolution, threads: int = 1) -> FieldGrid:
    nodes = grid_nodes(bbox_min, bbox_max, resolution)
    return FieldGrid(bbox_min, bbox_max, resolution, evaluate_chunked(fn, nodes, threads))


def sample_grid(
    model: MlpModel, fs: Optional[FeatureSet], bbox_min, bbox_max, resolution, threads: int = 1
) -> FieldGrid:
    logger.debug(f"Sampling field on a {'x'.join(map(str, resolution))} grid with {threads} threads")
    return sample_function(model_value_fn(model, fs), bbox_min, bbox_max, resolution, threads)


# -- file output ----------------------------------------------------------------


def write_field_grid(path: PathLike, grid: FieldGrid, metadata: Optional[dict] = None):
    """Binary grid (magic, u8 dim, u32 per-axis resolution, f64 box, f32
    values); ``metadata`` goes to a ``.json`` sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", grid.dim))
        fh.write(struct.pack(f"<{grid.dim}I", *grid.resolution))
        fh.write(struct.pack(f"<{grid.dim}d", *grid.bbox_min))
        fh.write(struct.pack(f"<{grid.dim}d", *grid.bbox_max))
        fh.write(grid.values.astype("<f4").tobytes())
    if metadata is not None:
        path.with_name(path.name + ".json").write_text(json.dumps(metadata, indent=2, sort_keys=True))


def read_field_grid(path: PathLike) -> FieldGrid:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise GridFormatError(f"{path}: not a field grid")
    try:
        (dim,) = struct.unpack_from("<B", blob, 4)
        offset = 5
        res = struct.unpack_from(f"<{dim}I", blob, offset)
        offset += 4 * dim
        lo = struct.unpack_from(f"<{dim}d", blob, offset)
        offset += 8 * dim
        hi = struct.unpack_from(f"<{dim}d", blob, offset)
        offset += 8 * dim
        values = np.frombuffer(blob, dtype="<f4", count=math.prod(res), offset=offset)
    except (struct.error, ValueError) as e:
        raise GridFormatError(f"{path}: truncated grid file") from e
    return FieldGrid(lo, hi, res, values.astype(np.float64))


def write_grid_preview(grid: FieldGrid, path: PathLike, iso: Optional[float] = 0.0):
    """Colour-mapped PNG of a 2D grid, y up, with the ``iso`` contour in white."""
    if grid.dim != 2:
        raise GridFormatError("previews are only defined for 2D grids")
    values = grid.as_array()
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi <= lo else (values - lo) / (hi - lo)
    image = cv2.applyColorMap((scaled * 255.0).astype(np.uint8), cv2.COLORMAP_JET)
    if iso is not None and lo <= iso <= hi:
        mask = (values >= iso).astype(np.uint8)
        contours, _ = cv2.findContours(mask, cv2.RETR_LIST, cv2.CHAIN_APPROX_NONE)
        cv2.drawContours(image, contours, -1, (255, 255, 255), 1)
    if not cv2.imwrite(str(path), np.flipud(image)):
        raise OSError(f"could not write preview {path}")


# -- marching squares -------------------------------------------------------------


def marching_squares(grid: FieldGrid, iso: float = 0.0) -> list[np.ndarray]:
    """Iso-lines of the bilinear interpolant, chained into polylines.

    Closed loops repeat their first point at the end. Saddle cells are
    resolved by the cell-center value (mean of the corners): when it is on
    the same side as the lower-left corner, that corner's diagonal pair is
    connected.
    """
    if grid.dim != 2:
        raise GridFormatError("marching squares needs a 2D grid")
    v = grid.as_array().T  # [i, j]
    nx, ny = grid.resolution
    xs, ys = grid.axes()
    above = v >= iso

    cache: dict[tuple, np.ndarray] = {}

    def crossing(key: tuple) -> np.ndarray:
        if key not in cache:
            kind, i, j = key
            i2, j2 = (i + 1, j) if kind == "h" else (i, j + 1)
            a, b = v[i, j], v[i2, j2]
            t = (iso - a) / (b - a)
            p0 = np.array([xs[i], ys[j]])
            p1 = np.array([xs[i2], ys[j2]])
            cache[key] = p0 + t * (p1 - p0)
        return cache[key]

    segments: list[tuple[tuple, tuple]] = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            corners = (above[i, j], above[i + 1, j], above[i + 1, j + 1], above[i, j + 1])
            if all(corners) or not any(corners):
                continue
            # edges: bottom, right, top, left
            edges = [("h", i, j), ("v", i + 1, j), ("h", i, j + 1), ("v", i, j)]
            crossed = [e for k, e in enumerate(edges) if corners[k] != corners[(k + 1) % 4]]
            if len(crossed) == 2:
                segments.append((crossed[0], crossed[1]))
                continue
            center = 0.25 * (v[i, j] + v[i + 1, j] + v[i + 1, j + 1] + v[i, j + 1])
            bottom, right, top, left = edges
            if (center >= iso) == corners[0]:
                # the lower-left corner connects through the center to the upper-right
                segments += [(bottom, right), (top, left)]
            else:
                segments += [(left, bottom), (right, top)]

    return [np.array([crossing(k) for k in chain]) for chain in _chain(segments)]


def _chain(segments: list[tuple[tuple, tuple]]) -> list[list[tuple]]:
    adjacency: dict[tuple, list[int]] = {}
    for s, (a, b) in enumerate(segments):
        adjacency.setdefault(a, []).append(s)
        adjacency.setdefault(b, []).append(s)
    used = [False] * len(segments)
    chains = []

    def extend(chain: list[tuple]):
        while True:
            nxt = [s for s in adjacency[chain[-1]] if not used[s]]
            if not nxt:
                return
            s = nxt[0]
            used[s] = True
            a, b = segments[s]
            chain.append(b if a == chain[-1] else a)

    # open chains start at keys used once
    starts = [k for k, segs in adjacency.items() if len(segs) == 1]
    for key in sorted(starts) + sorted(adjacency):
        for s in adjacency[key]:
            if used[s]:
                continue
            used[s] = True
            a, b = segments[s]
            chain = [key, b if a == key else a]
            extend(chain)
            chains.append(chain)
    return chains


# -- dual contouring --------------------------------------------------------------


def _bisect(fn: ValueFn, p0: np.ndarray, p1: np.ndarray, v0: np.ndarray, threads: int) -> np.ndarray:
    lo, hi = p0.copy(), p1.copy()
    lo_sign = v0 < 0.0
    length = float(np.max(np.linalg.norm(p1 - p0, axis=1))) if len(p0) else 0.0
    steps = max(1, int(math.ceil(math.log2(max(length, BISECTION_TOL) / BISECTION_TOL))))
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        same = (evaluate_chunked(fn, mid, threads) < 0.0) == lo_sign
        lo = np.where(same[:, None], mid, lo)
        hi = np.where(same[:, None], hi, mid)
    return 0.5 * (lo + hi)


def dual_contouring(
    value_fn: ValueFn,
    grad_fn: ValueFn,
    bbox_min,
    bbox_max,
    resolution: int,
    threads: int = 1,
) -> TriMesh:
    """Zero level set of a 3D field as a triangle mesh.

    One vertex per cell with a sign change, placed at the regularized QEF
    minimizer of the Hermite planes on its edges and clamped to the cell;
    one quad per sign-changing grid edge, facing towards increasing values.
    """
    n = resolution
    grid = sample_function(value_fn, bbox_min, bbox_max, (n, n, n), threads)
    v = grid.as_array().transpose(2, 1, 0)  # [i, j, k]
    inside = v < 0.0
    h = grid.spacing
    origin = grid.bbox_min

    starts, axes, crossings = [], [], []
    for axis in range(3):
        others = [d for d in range(3) if d != axis]
        moved = np.moveaxis(inside, axis, 0)
        idx = np.argwhere(moved[:-1] != moved[1:])
        if len(idx) == 0:
            continue
        start = np.zeros_like(idx)
        start[:, axis] = idx[:, 0]
        start[:, others[0]] = idx[:, 1]
        start[:, others[1]] = idx[:, 2]
        end = start.copy()
        end[:, axis] += 1
        v0 = v[start[:, 0], start[:, 1], start[:, 2]]
        crossings.append(_bisect(value_fn, origin + start * h, origin + end * h, v0, threads))
        starts.append(start)
        axes.append(np.full(len(start), axis))
    if not crossings:
        logger.info("No sign change on the grid; empty mesh")
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    points = np.concatenate(crossings)
    start = np.concatenate(starts)
    axis = np.concatenate(axes)
    rising = inside[start[:, 0], start[:, 1], start[:, 2]]
    grads = evaluate_chunked(lambda p: grad_fn(p).reshape(-1), points, threads).reshape(-1, 3)
    length = np.linalg.norm(grads, axis=1, keepdims=True)
    normals = grads / np.where(length > 0.0, length, 1.0)

    # the four cells around each edge, counterclockwise about the edge axis
    rows = np.arange(len(points))
    u, w = (axis + 1) % 3, (axis + 2) % 3
    ring = np.repeat(start[:, None, :], 4, axis=1)
    for slot, (du, dw) in enumerate(((-1, -1), (0, -1), (0, 0), (-1, 0))):
        ring[rows, slot, u] += du
        ring[rows, slot, w] += dw
    in_range = np.all((ring >= 0) & (ring < n - 1), axis=2)
    cell_ids = ring[..., 0] + (n - 1) * (ring[..., 1] + (n - 1) * ring[..., 2])
    cell_ids[~in_range] = -1

    flat_cells = cell_ids.reshape(-1)
    flat_edges = np.repeat(rows, 4)
    keep = flat_cells >= 0
    used_cells, compact = np.unique(flat_cells[keep], return_inverse=True)
    flat_edges = flat_edges[keep]
    m = len(used_cells)

    nn = normals[flat_edges]
    pp = points[flat_edges]
    ata = np.zeros((m, 3, 3))
    atb = np.zeros((m, 3))
    mass = np.zeros((m, 3))
    count = np.zeros(m)
    np.add.at(ata, compact, nn[:, :, None] * nn[:, None, :])
    np.add.at(atb, compact, nn * np.einsum("ij,ij->i", nn, pp)[:, None])
    np.add.at(mass, compact, pp)
    np.add.at(count, compact, 1.0)
    mass /= count[:, None]

    lhs = ata + QEF_MASS_WEIGHT * np.eye(3)[None]
    rhs = atb + QEF_MASS_WEIGHT * mass
    vertices = np.linalg.solve(lhs, rhs[..., None])[..., 0]
    cell = np.stack([used_cells % (n - 1), (used_cells // (n - 1)) % (n - 1), used_cells // (n - 1) ** 2], axis=1)
    cell_lo = origin + cell * h
    vertices = np.clip(vertices, cell_lo, cell_lo + h)

    lookup = np.full((n - 1) ** 3, -1, dtype=np.int64)
    lookup[used_cells] = np.arange(m)
    complete = in_range.all(axis=1)
    quads = lookup[cell_ids[complete]]
    falling = ~rising[complete]
    quads[falling] = quads[falling][:, ::-1]
    faces = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])
    logger.info(f"Dual contouring: {m} vertices, {len(faces)} triangles at {n}^3")
    return TriMesh(vertices, faces)


def extract_mesh(
    model: MlpModel, fs: Optional[FeatureSet], bbox_min, bbox_max, resolution: int = 128, threads: int = 1
) -> TriMesh:
    return dual_contouring(
        model_value_fn(model, fs), model_grad_fn(model, fs), bbox_min, bbox_max, resolution, threads
    )


# -- analytic reference fields ----------------------------------------------------


def sphere_sdf(points: np.ndarray, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return np.linalg.norm(points - np.asarray(center), axis=-1) - radius


def sphere_sdf_grad(points: np.ndarray, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    d = np.asarray(points, dtype=np.float64) - np.asarray(center)
    length = np.linalg.norm(d, axis=-1, keepdims=True)
    return d / np.where(length > 0.0, length, 1.0)


def box_sdf(points: np.ndarray, half=0.5) -> np.ndarray:
    """Exact Euclidean signed distance to an axis-aligned box."""
    q = np.abs(np.asarray(points, dtype=np.float64)) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def box_maxnorm(points: np.ndarray, half=0.5) -> np.ndarray:
    """``max_i(|x_i| - h_i)``: exact inside the box, zero set is the box surface."""
    q = np.abs(np.asarray(points, dtype=np.float64)) - np.asarray(half)
    return np.max(q, axis=-1)


def box_maxnorm_grad(points: np.ndarray, half=0.5) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    q = np.abs(p) - np.asarray(half)
    axis = np.argmax(q, axis=-1)
    g = np.zeros_like(p)
    rows = np.arange(len(p))
    g[rows, axis] = np.where(p[rows, axis] >= 0.0, 1.0, -1.0)
    return g


def box_sdf_grad(points: np.ndarray, half=0.5, h: float = 1e-7) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    g = np.zeros_like(p)
    for d in range(p.shape[1]):
        step = np.zeros(p.shape[1])
        step[d] = h
        g[:, d] = (box_sdf(p + step, half) - box_sdf(p - step, half)) / (2.0 * h)
    return g

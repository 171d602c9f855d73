import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np
import trimesh
from scipy.spatial import cKDTree

from .geom import TriMesh

logger = logging.getLogger("sharpfield.metrics")


class EmptyPointSetError(ValueError):
    pass


@dataclass(frozen=True)
class MetricsConfig:
    samples: int = 100000
    fscore_radius: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or not self.fscore_radius > 0.0:
            raise ValueError("sample count and F-score radius must be positive")


@dataclass
class MetricReport:
    cd: float
    hd: float
    ne_degrees: float
    fc_percent: float
    fcd: Optional[float] = None
    fne_degrees: Optional[float] = None
    samples: int = 0
    seed: int = 0
    fscore_radius: float = 0.0

    FIELDS = ("cd", "hd", "ne_degrees", "fc_percent", "fcd", "fne_degrees", "samples", "seed", "fscore_radius")

    def csv_header(self) -> str:
        return ",".join(self.FIELDS)

    def csv_row(self) -> str:
        values = asdict(self)
        return ",".join("" if values[k] is None else f"{values[k]:.10g}" for k in self.FIELDS)

    def pretty(self) -> str:
        lines = [
            f"Chamfer distance   {self.cd:.6e}",
            f"Hausdorff distance {self.hd:.6e}",
            f"Normal error       {self.ne_degrees:.4f} deg",
            f"F-score (r={self.fscore_radius:g})  {self.fc_percent:.2f} %",
        ]
        if self.fcd is not None:
            lines.append(f"Feature chamfer    {self.fcd:.6e}")
        if self.fne_degrees is not None:
            lines.append(f"Feature normal err {self.fne_degrees:.4f} deg")
        lines.append(f"({self.samples} samples per surface, seed {self.seed})")
        return "\n".join(lines)


def _check(*sets: np.ndarray):
    for s in sets:
        if len(s) == 0:
            raise EmptyPointSetError("metric needs nonempty point sets")


def _nearest(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist, idx = cKDTree(dst).query(src)
    return dist, idx


def chamfer(p1: np.ndarray, p2: np.ndarray) -> float:
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    _check(p1, p2)
    d12, _ = _nearest(p1, p2)
    d21, _ = _nearest(p2, p1)
    return 0.5 * float(d12.mean()) + 0.5 * float(d21.mean())


def hausdorff(p1: np.ndarray, p2: np.ndarray) -> float:
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    _check(p1, p2)
    d12, _ = _nearest(p1, p2)
    d21, _ = _nearest(p2, p1)
    return max(float(d12.max()), float(d21.max()))


def normal_error(p1: np.ndarray, n1: np.ndarray, p2: np.ndarray, n2: np.ndarray) -> float:
    """Symmetric mean angle, in degrees, between normals of nearest neighbors
    (unsigned, so flipped normals count as aligned)."""
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    _check(p1, p2)
    _, i12 = _nearest(p1, p2)
    _, i21 = _nearest(p2, p1)
    a12 = np.arccos(np.clip(np.abs(np.einsum("ij,ij->i", n1, n2[i12])), 0.0, 1.0))
    a21 = np.arccos(np.clip(np.abs(np.einsum("ij,ij->i", n2, n1[i21])), 0.0, 1.0))
    return math.degrees(0.5 * float(a12.mean()) + 0.5 * float(a21.mean()))


def fscore(p1: np.ndarray, p2: np.ndarray, r: float) -> float:
    """Harmonic mean of the two fractions of points within ``r`` of the other set, in percent."""
    p1, p2 = np.asarray(p1, dtype=np.float64), np.asarray(p2, dtype=np.float64)
    _check(p1, p2)
    d12, _ = _nearest(p1, p2)
    d21, _ = _nearest(p2, p1)
    r1 = float(np.mean(d12 <= r))
    r2 = float(np.mean(d21 <= r))
    if r1 + r2 == 0.0:
        return 0.0
    return 100.0 * 2.0 * r1 * r2 / (r1 + r2)


def sample_surface(mesh: TriMesh, count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform samples and their face normals."""
    if len(mesh.faces) == 0:
        raise EmptyPointSetError("cannot sample an empty mesh")
    tm = trimesh.Trimesh(vertices=mesh.vertices, faces=mesh.faces, process=False)
    points, face_index = trimesh.sample.sample_surface(tm, count, seed=seed)
    return np.asarray(points), mesh.face_normals[face_index]


def evaluate_meshes(reference: TriMesh, candidate: TriMesh, cfg: MetricsConfig = MetricsConfig()) -> MetricReport:
    p_ref, n_ref = sample_surface(reference, cfg.samples, cfg.seed)
    p_cand, n_cand = sample_surface(candidate, cfg.samples, cfg.seed)
    report = MetricReport(
        cd=chamfer(p_ref, p_cand),
        hd=hausdorff(p_ref, p_cand),
        ne_degrees=normal_error(p_ref, n_ref, p_cand, n_cand),
        fc_percent=fscore(p_ref, p_cand, cfg.fscore_radius),
        samples=cfg.samples,
        seed=cfg.seed,
        fscore_radius=cfg.fscore_radius,
    )
    logger.info(f"CD={report.cd:.3e} HD={report.hd:.3e} NE={report.ne_degrees:.3f} FC={report.fc_percent:.2f}")
    return report


# -- feature metrics ----------------------------------------------------------------


def _root(value_fn: Callable, a: np.ndarray, b: np.ndarray, va: np.ndarray, steps: int = 50) -> np.ndarray:
    lo, hi = a.copy(), b.copy()
    lo_neg = va < 0.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        same = (value_fn(mid) < 0.0) == lo_neg
        lo = np.where(same[:, None], mid, lo)
        hi = np.where(same[:, None], hi, mid)
    return 0.5 * (lo + hi)


def feature_curve_samples(
    value_fn: Callable,
    strip_vertices: np.ndarray,
    quads: np.ndarray,
    sections: int = 16,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Zero crossings of the field along cross-sections of each strip quad.

    Returns the crossing points, the index of the quad each came from, and
    the number of quads that had no crossing at all.
    """
    if len(quads) == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64), 0
    t = (np.arange(sections) + 0.5) / sections
    q = strip_vertices[quads]  # (Q, 4, 3)
    # q0-q1 is the cross-section at the first end, q3-q2 at the other
    a = q[:, None, 0] + t[None, :, None] * (q[:, None, 3] - q[:, None, 0])
    b = q[:, None, 1] + t[None, :, None] * (q[:, None, 2] - q[:, None, 1])
    a = a.reshape(-1, 3)
    b = b.reshape(-1, 3)
    owner = np.repeat(np.arange(len(quads)), sections)
    va, vb = value_fn(a), value_fn(b)
    crossing = (va < 0.0) != (vb < 0.0)
    roots = _root(value_fn, a[crossing], b[crossing], va[crossing])
    hit = np.zeros(len(quads), dtype=bool)
    hit[owner[crossing]] = True
    skipped = int((~hit).sum())
    if skipped:
        logger.warning(f"{skipped} of {len(quads)} strips have no zero crossing; skipped")
    return roots, owner[crossing], skipped


def strip_normals(strip_vertices: np.ndarray, quads: np.ndarray) -> np.ndarray:
    q = strip_vertices[quads]
    n = np.cross(q[:, 2] - q[:, 0], q[:, 3] - q[:, 1])
    length = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(length > 0.0, length, 1.0)


def feature_metrics(
    value_fn: Callable,
    strip_vertices: np.ndarray,
    quads: np.ndarray,
    gt_curve_points: np.ndarray,
    gt_normals: Callable[[np.ndarray], np.ndarray],
    sections: int = 16,
) -> tuple[float, float]:
    """Chamfer distance from the zero level restricted to the strips to the
    ground-truth sharp curves, and the mean angle between strip normals and
    the ground-truth strip normals at those points (degrees)."""
    gt_curve_points = np.asarray(gt_curve_points, dtype=np.float64)
    if len(gt_curve_points) == 0:
        raise EmptyPointSetError("ground-truth sharp curves are empty")
    roots, owner, _ = feature_curve_samples(value_fn, strip_vertices, quads, sections)
    if len(roots) == 0:
        raise EmptyPointSetError("the zero level set never meets the strips")
    fcd = chamfer(roots, gt_curve_points)
    normals = strip_normals(strip_vertices, quads)[owner]
    reference = np.asarray(gt_normals(roots), dtype=np.float64)
    cos = np.abs(np.einsum("ij,ij->i", normals, reference))
    fne = math.degrees(float(np.mean(np.arccos(np.clip(cos, 0.0, 1.0)))))
    return fcd, fne

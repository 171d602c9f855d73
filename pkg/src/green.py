"""Laplacian Green's function and its integrals over feature elements.

Closed forms (constant unit density):

* segment ``[a, b]`` in 2D, with ``s`` the coordinate of ``x`` along the
  segment and ``h`` its distance from the supporting line::

      2*pi * I = F(L - s) - F(-s),
      F(t) = t/2 * ln(t^2 + h^2) - t + |h| * atan2(t, |h|)

* triangle in 3D, per edge with outward in-plane normal ``u``,
  signed in-plane distance ``P0``, end abscissae ``l-``/``l+``, end
  distances ``R-``/``R+``, ``R0^2 = P0^2 + w^2`` and plane offset ``w``::

      -4*pi * I = sum_edges  P0 * ln((R+ + l+) / (R- + l-))
                  - |w| * [atan(P0 l+ / (R0^2 + |w| R+)) - atan(P0 l- / (R0^2 + |w| R-))]

Both are written with ``autodiff`` operations so gradients with respect to
the query point and every element vertex are exact. The places where the
generic expressions hit ``0 * log 0`` or ``atan2(0, 0)`` (query on the
supporting line or plane, on an edge line, at a vertex) are replaced by
their limits through guarded ``where`` branches.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geom import Element, Segment, Triangle

logger = logging.getLogger("sharpfield.green")

ON_ELEMENT_TOL = 1e-12
_TINY = 1e-30


class SingularityError(ValueError):
    pass


class OnFeatureGradientError(ValueError):
    pass


@dataclass
class KernelEval:
    value: float
    grad_query: np.ndarray
    grad_vertices: np.ndarray


def green_2d(x, y) -> float:
    r = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)))
    if r == 0.0:
        raise SingularityError("2D Green's function is singular at x = y")
    return math.log(r) / (2.0 * math.pi)


def green_3d(x, y) -> float:
    r = float(np.linalg.norm(np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)))
    if r == 0.0:
        raise SingularityError("3D Green's function is singular at x = y")
    return -1.0 / (4.0 * math.pi * r)


# -- closed forms on tensors --------------------------------------------------


def segment_integral_tensor(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """``(1/2pi) * int_[a,b] ln|x - y| ds`` for rows of ``(P, 2)`` tensors."""
    d = b - a
    length = ad.norm_rows(d)
    valid = length.data > _TINY
    safe_length = ad.where(valid, length, 1.0)
    u = d / ad.reshape(safe_length, (-1, 1))
    r = x - a
    s = ad.dot_rows(r, u)
    h = ad.abs(u[:, 0] * r[:, 1] - u[:, 1] * r[:, 0])

    def antiderivative(t: Tensor) -> Tensor:
        q = t * t + h * h
        nonzero = q.data > 0.0
        safe_q = ad.where(nonzero, q, 1.0)
        safe_h = ad.where(nonzero, h, 1.0)
        log_term = ad.where(nonzero, 0.5 * t * ad.log(safe_q), 0.0)
        atan_term = ad.where(nonzero, h * ad.atan2(t, safe_h), 0.0)
        return log_term - t + atan_term

    value = (antiderivative(safe_length - s) - antiderivative(-s)) / (2.0 * math.pi)
    return ad.where(valid, value, 0.0)


def triangle_integral_tensor(x: Tensor, v0: Tensor, v1: Tensor, v2: Tensor) -> Tensor:
    """``-(1/4pi) * int_T dA / |x - y|`` for rows of ``(P, 3)`` tensors."""
    normal = ad.cross_rows(v1 - v0, v2 - v0)
    area2 = ad.norm_rows(normal)
    valid_area = area2.data > _TINY
    n = normal / ad.reshape(ad.where(valid_area, area2, 1.0), (-1, 1))
    w = ad.dot_rows(x - v0, n)
    aw = ad.abs(w)
    foot = x - ad.reshape(w, (-1, 1)) * n

    total = None
    for p_minus, p_plus in ((v0, v1), (v1, v2), (v2, v0)):
        edge = p_plus - p_minus
        edge_len = ad.norm_rows(edge)
        valid_edge = edge_len.data > _TINY
        lhat = edge / ad.reshape(ad.where(valid_edge, edge_len, 1.0), (-1, 1))
        u = ad.cross_rows(lhat, n)

        l_plus = ad.dot_rows(p_plus - foot, lhat)
        l_minus = ad.dot_rows(p_minus - foot, lhat)
        p0 = ad.dot_rows(p_minus - foot, u)
        r_plus = ad.norm_rows(x - p_plus)
        r_minus = ad.norm_rows(x - p_minus)
        r0_sq = p0 * p0 + w * w
        valid = (r0_sq.data > _TINY) & valid_edge

        def log_arg(r: Tensor, l: Tensor) -> Tensor:
            # R + l, rewritten as R0^2 / (R - l) when l < 0 to avoid cancellation
            forward = l.data >= 0.0
            direct = r + l
            reflected = r0_sq / ad.where(forward, 1.0, r - l)
            value = ad.where(forward, direct, reflected)
            return ad.where(valid, value, 1.0)

        log_term = p0 * (ad.log(log_arg(r_plus, l_plus)) - ad.log(log_arg(r_minus, l_minus)))
        den_plus = ad.where(valid, r0_sq + aw * r_plus, 1.0)
        den_minus = ad.where(valid, r0_sq + aw * r_minus, 1.0)
        atan_term = ad.atan2(p0 * l_plus, den_plus) - ad.atan2(p0 * l_minus, den_minus)
        contribution = ad.where(valid, log_term - aw * atan_term, 0.0)
        total = contribution if total is None else total + contribution

    return ad.where(valid_area, total * (-1.0 / (4.0 * math.pi)), 0.0)


def element_integral_tensor(x: Tensor, vertices: list[Tensor]) -> Tensor:
    if len(vertices) == 2:
        return segment_integral_tensor(x, vertices[0], vertices[1])
    return triangle_integral_tensor(x, vertices[0], vertices[1], vertices[2])


# -- point API ----------------------------------------------------------------


def integral_segments(x: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized segment integrals for rows of ``(P, 2)`` arrays."""
    with ad.no_grad():
        return segment_integral_tensor(Tensor(x), Tensor(a), Tensor(b)).data.copy()


def integral_triangles(x: np.ndarray, v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return triangle_integral_tensor(Tensor(x), Tensor(v0), Tensor(v1), Tensor(v2)).data.copy()


def integral_segment(x, s: Segment) -> float:
    x = np.asarray(x, dtype=np.float64)[None]
    return float(integral_segments(x, s.a[None], s.b[None])[0])


def integral_triangle(x, t: Triangle) -> float:
    x = np.asarray(x, dtype=np.float64)[None]
    return float(integral_triangles(x, t.v0[None], t.v1[None], t.v2[None])[0])


def integral(x, e: Element) -> float:
    if isinstance(e, Segment):
        return integral_segment(x, e)
    return integral_triangle(x, e)


def distance_to_element(x, e: Element) -> float:
    x = np.asarray(x, dtype=np.float64)
    if isinstance(e, Segment):
        d = e.b - e.a
        len_sq = float(d @ d)
        t = 0.0 if len_sq == 0.0 else float(np.clip((x - e.a) @ d / len_sq, 0.0, 1.0))
        return float(np.linalg.norm(x - (e.a + t * d)))
    return _point_triangle_distance(x, e.v0, e.v1, e.v2)


def _point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> float:
    # Closest point by Voronoi regions of the triangle.
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return float(np.linalg.norm(ap))
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return float(np.linalg.norm(bp))
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        v = d1 / (d1 - d3)
        return float(np.linalg.norm(p - (a + v * ab)))
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return float(np.linalg.norm(cp))
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        w = d2 / (d2 - d6)
        return float(np.linalg.norm(p - (a + w * ac)))
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        return float(np.linalg.norm(p - (b + w * (c - b))))
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    return float(np.linalg.norm(p - (a + ab * v + ac * w)))


def on_element(x, e: Element, tol: float = ON_ELEMENT_TOL) -> bool:
    return distance_to_element(x, e) <= tol


def integral_with_grads(x, e: Element) -> KernelEval:
    if on_element(x, e):
        raise OnFeatureGradientError("gradient requested on the feature element")
    xt = ad.leaf(np.asarray(x, dtype=np.float64)[None])
    verts = [ad.leaf(p[None]) for p in e.points]
    value = element_integral_tensor(xt, verts)
    grads = ad.grad(ad.tsum(value), [xt] + verts)
    return KernelEval(
        value=float(value.data[0]),
        grad_query=grads[0].data[0].copy(),
        grad_vertices=np.stack([g.data[0] for g in grads[1:]]),
    )


# -- quadrature oracles -------------------------------------------------------


def _gauss01(order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return 0.5 * (nodes + 1.0), 0.5 * weights


def _segment_rule(x: np.ndarray, a: np.ndarray, b: np.ndarray, order: int) -> np.ndarray:
    """Gauss-Legendre estimate per sub-interval; ``a``, ``b`` are ``(k, 2)``."""
    t, w = _gauss01(order)
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    r = np.linalg.norm(pts - x, axis=2)
    length = np.linalg.norm(b - a, axis=1)
    return (np.log(r) @ w) * length / (2.0 * math.pi)


def _triangle_rule(x: np.ndarray, tri: np.ndarray, order: int) -> np.ndarray:
    """Collapsed-square Gauss estimate per triangle; ``tri`` is ``(k, 3, 3)``."""
    t, w = _gauss01(order)
    s_grid, t_grid = np.meshgrid(t, t, indexing="ij")
    weights = np.outer(w, w).ravel() * s_grid.ravel()
    s_flat, t_flat = s_grid.ravel(), t_grid.ravel()
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    pts = (
        v0[:, None, :]
        + s_flat[None, :, None] * (v1 - v0)[:, None, :]
        + (s_flat * t_flat)[None, :, None] * (v2 - v1)[:, None, :]
    )
    r = np.linalg.norm(pts - x, axis=2)
    area2 = np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)
    return -((1.0 / r) @ weights) * area2 / (4.0 * math.pi)


def _split_segments(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = 0.5 * (a + b)
    return np.concatenate([a, m]), np.concatenate([m, b])


def _split_triangles(tri: np.ndarray) -> np.ndarray:
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    m01, m12, m20 = 0.5 * (v0 + v1), 0.5 * (v1 + v2), 0.5 * (v2 + v0)
    return np.concatenate(
        [
            np.stack([v0, m01, m20], axis=1),
            np.stack([m01, v1, m12], axis=1),
            np.stack([m20, m12, v2], axis=1),
            np.stack([m01, m12, m20], axis=1),
        ]
    )


def integral_quadrature(x, e: Element, refinement: int, order: int = 2) -> float:
    """Uniformly refined Gauss quadrature: ``2**refinement`` pieces per segment,
    ``4**refinement`` per triangle. Test oracle only."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(e, Segment):
        if e.length == 0.0:
            return 0.0
        a, b = e.a[None], e.b[None]
        for _ in range(refinement):
            a, b = _split_segments(a, b)
        return float(_segment_rule(x, a, b, order).sum())
    if e.area == 0.0:
        return 0.0
    tri = e.points[None]
    for _ in range(refinement):
        tri = _split_triangles(tri)
    return float(_triangle_rule(x, tri, order).sum())


def integral_adaptive(x, e: Element, rtol: float = 1e-13, max_depth: int = 60) -> float:
    """Adaptive Gauss quadrature; a piece is accepted once its children agree
    with it to ``rtol`` of the running total, scaled by the piece's share."""
    x = np.asarray(x, dtype=np.float64)
    if isinstance(e, Segment):
        if e.length == 0.0:
            return 0.0
        order = 10
        a, b = e.a[None], e.b[None]
        estimate = _segment_rule(x, a, b, order)
        scale = max(abs(float(estimate.sum())), 1e-300)
        total = 0.0
        share = np.ones(1)
        for _ in range(max_depth):
            ca, cb = _split_segments(a, b)
            children = _segment_rule(x, ca, cb, order)
            n = len(a)
            refined = children[:n] + children[n:]
            done = np.abs(refined - estimate) <= rtol * scale * share
            total += float(refined[done].sum())
            keep = ~done
            if not keep.any():
                return total
            a = np.concatenate([ca[:n][keep], ca[n:][keep]])
            b = np.concatenate([cb[:n][keep], cb[n:][keep]])
            estimate = np.concatenate([children[:n][keep], children[n:][keep]])
            share = np.concatenate([share[keep], share[keep]]) * 0.5
        logger.warning("adaptive segment quadrature hit the depth limit")
        return total + float(estimate.sum())

    if e.area == 0.0:
        return 0.0
    order = 8
    tri = e.points[None]
    estimate = _triangle_rule(x, tri, order)
    scale = max(abs(float(estimate.sum())), 1e-300)
    total = 0.0
    share = np.ones(1)
    for _ in range(max_depth):
        children_tri = _split_triangles(tri)
        children = _triangle_rule(x, children_tri, order)
        n = len(tri)
        refined = children.reshape(4, n).sum(axis=0)
        done = np.abs(refined - estimate) <= rtol * scale * share
        total += float(refined[done].sum())
        keep = ~done
        if not keep.any():
            return total
        tri = children_tri.reshape(4, n, 3, 3)[:, keep].reshape(-1, 3, 3)
        estimate = children.reshape(4, n)[:, keep].ravel()
        share = np.tile(share[keep] * 0.25, 4)
    logger.warning("adaptive triangle quadrature hit the depth limit")
    return total + float(estimate.sum())

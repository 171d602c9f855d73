import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .feature import FeatureSet, MollifierConfig
from .geom import FeatureGraph, StripMesh, vertex_degrees

logger = logging.getLogger("sharpfield.partition")

BACKTRACK_BUDGET = 20000


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeColoring:
    colors: np.ndarray
    n_colors: int


@dataclass
class _Chain:
    edges: list[int]
    ends: tuple[int, int]


def _walk(g: FeatureGraph, degrees: list[int], start: int, first_edge: int, used: np.ndarray) -> _Chain:
    edges = [first_edge]
    used[first_edge] = True
    cur = _other(g, first_edge, start)
    while degrees[cur] == 2 and cur != start:
        nxt = next(k for k in g.incident_edges[cur] if not used[k])
        edges.append(nxt)
        used[nxt] = True
        cur = _other(g, nxt, cur)
    return _Chain(edges, (start, cur))


def _other(g: FeatureGraph, edge: int, v: int) -> int:
    i, j = g.edges[edge]
    return int(j) if i == v else int(i)


def contract_chains(g: FeatureGraph) -> tuple[list[_Chain], list[list[int]]]:
    """Maximal runs of edges through degree-2 vertices.

    Returns the chains between non-degree-2 vertices (a chain leaving and
    re-entering the same junction is split in two halves) and, separately,
    the edge lists of closed loops made only of degree-2 vertices.
    """
    degrees = vertex_degrees(g)
    used = np.zeros(g.n_edges, dtype=bool)
    chains: list[_Chain] = []
    for v in range(g.n_vertices):
        if degrees[v] == 2 or degrees[v] == 0:
            continue
        for k in g.incident_edges[v]:
            if used[k]:
                continue
            chain = _walk(g, degrees, v, k, used)
            if chain.ends[0] == chain.ends[1] and degrees[v] >= 3:
                half = len(chain.edges) // 2
                first, second = chain.edges[:half], chain.edges[half:]
                mid = _shared_vertex(g, first[-1], second[0])
                chains.append(_Chain(first, (v, mid)))
                chains.append(_Chain(second, (mid, v)))
            else:
                chains.append(chain)

    loops: list[list[int]] = []
    for k in range(g.n_edges):
        if used[k]:
            continue
        start = int(g.edges[k, 0])
        loops.append(_walk(g, degrees, start, k, used).edges)
    return chains, loops


def _shared_vertex(g: FeatureGraph, e0: int, e1: int) -> int:
    common = set(g.edges[e0].tolist()) & set(g.edges[e1].tolist())
    return int(min(common))


def _conflicts(chains: list[_Chain], degrees: list[int]) -> list[set[int]]:
    at_junction: dict[int, list[int]] = {}
    for c, chain in enumerate(chains):
        for v in set(chain.ends):
            if degrees[v] >= 3:
                at_junction.setdefault(v, []).append(c)
    conflicts: list[set[int]] = [set() for _ in chains]
    for members in at_junction.values():
        for c in members:
            conflicts[c].update(m for m in members if m != c)
    return conflicts


def _order(chains: list[_Chain], degrees: list[int]) -> list[int]:
    def key(c: int):
        ends = chains[c].ends
        junction_degree = max(degrees[v] if degrees[v] >= 3 else 0 for v in ends)
        return (-junction_degree, min(ends), chains[c].edges[0])

    return sorted(range(len(chains)), key=key)


def _greedy(order: list[int], conflicts: list[set[int]]) -> list[int]:
    color = [-1] * len(conflicts)
    for c in order:
        taken = {color[o] for o in conflicts[c] if color[o] >= 0}
        k = 0
        while k in taken:
            k += 1
        color[c] = k
    return color


def _backtrack(order: list[int], conflicts: list[set[int]], n_colors: int) -> Optional[list[int]]:
    color = [-1] * len(conflicts)
    steps = 0

    def assign(pos: int) -> bool:
        nonlocal steps
        if pos == len(order):
            return True
        c = order[pos]
        taken = {color[o] for o in conflicts[c] if color[o] >= 0}
        for k in range(n_colors):
            steps += 1
            if steps > BACKTRACK_BUDGET:
                return False
            if k in taken:
                continue
            color[c] = k
            if assign(pos + 1):
                return True
            color[c] = -1
        return False

    return color if assign(0) else None


def color_edges(g: FeatureGraph) -> EdgeColoring:
    """Channel per edge: distinct colors around every junction, constant
    along chains of degree-2 vertices."""
    degrees = vertex_degrees(g)
    colors = np.zeros(g.n_edges, dtype=np.int64)
    if g.n_edges == 0:
        return EdgeColoring(colors, 0)

    chains, loops = contract_chains(g)
    conflicts = _conflicts(chains, degrees)
    order = _order(chains, degrees)
    chain_colors = _greedy(order, conflicts)

    target = max([d for d in degrees if d >= 3], default=1)
    used = max(chain_colors, default=0) + 1
    if used > target:
        # assign() recurses once per chain
        if len(chains) < 800:
            better = _backtrack(order, conflicts, target)
            if better is not None:
                chain_colors = better
            else:
                logger.debug(f"Backtracking budget exhausted; keeping {used} colors")

    for chain, k in zip(chains, chain_colors):
        colors[chain.edges] = k
    for loop in loops:
        colors[loop] = 0
    n_colors = int(colors.max()) + 1
    logger.info(f"Colored {g.n_edges} edges ({len(chains)} chains, {len(loops)} loops) with {n_colors} colors")
    return EdgeColoring(colors, n_colors)


def junction_violations(g: FeatureGraph, colors: np.ndarray) -> list[int]:
    """Vertices of degree >= 3 whose incident edges repeat a color."""
    bad = []
    for v, incident in enumerate(g.incident_edges):
        if len(incident) < 3:
            continue
        seen = [int(colors[k]) for k in incident]
        if len(set(seen)) != len(seen):
            bad.append(v)
    return bad


def split_strips(
    strips: StripMesh, coloring: EdgeColoring, mollifier: Optional[MollifierConfig] = None
) -> FeatureSet:
    """Strip triangles as a feature set, each on the channel of its source edge."""
    source = strips.source_edge
    if len(source) and (source.min() < 0 or source.max() >= len(coloring.colors)):
        raise PartitionError("strip triangle without a valid source edge")
    channels = coloring.colors[source] if len(source) else np.zeros(0, dtype=np.int64)
    return FeatureSet(
        vertices=strips.mesh.vertices,
        elements=strips.mesh.faces,
        channels=channels,
        n_channels=max(coloring.n_colors, 1),
        mollifier=mollifier or MollifierConfig(),
        reg_edges=strips.rails,
    )

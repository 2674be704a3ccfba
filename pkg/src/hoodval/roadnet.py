"""Road graph construction and cutoff-bounded shortest-path queries.

The walkability features only ever need distances up to the maximum
walking distance, so the workhorse is a cutoff Dijkstra; station and
industrial-area distances reuse the same machinery seeded from multiple
sources at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from heapq import heappop, heappush

import numpy as np

from .geo import haversine_many_m, LocalProjection
from .geomodel import Amenity, HoodvalError, RoadEdge


class GraphError(HoodvalError):
    pass


@dataclass
class RoadGraph:
    """Undirected weighted graph; node ids map to (lon, lat)."""

    nodes: dict[str, tuple[float, float]] = field(default_factory=dict)
    adjacency: dict[str, list[tuple[str, float]]] = field(default_factory=dict)

    def __contains__(self, node_id: str) -> bool:
        return node_id in self.nodes


def build_graph(edges: list[RoadEdge]) -> RoadGraph:
    """Build the undirected graph, collapsing duplicate edges to the
    minimum length.  Non-positive lengths are rejected."""
    if not edges:
        raise GraphError("road edge list is empty")
    bad = [f"{e.node_a}-{e.node_b}" for e in edges if e.length_m <= 0]
    if bad:
        raise GraphError(f"non-positive edge lengths on: {', '.join(bad[:10])}")

    nodes: dict[str, tuple[float, float]] = {}
    best: dict[tuple[str, str], float] = {}
    for e in edges:
        nodes.setdefault(e.node_a, e.lonlat_a)
        nodes.setdefault(e.node_b, e.lonlat_b)
        key = (e.node_a, e.node_b) if e.node_a <= e.node_b else (e.node_b, e.node_a)
        cur = best.get(key)
        if cur is None or e.length_m < cur:
            best[key] = e.length_m

    adjacency: dict[str, list[tuple[str, float]]] = {n: [] for n in nodes}
    for (a, b), w in best.items():
        adjacency[a].append((b, w))
        if a != b:
            adjacency[b].append((a, w))
    for lst in adjacency.values():
        lst.sort()
    return RoadGraph(nodes=nodes, adjacency=adjacency)


def network_distances(graph: RoadGraph, source: str, cutoff_m: float) -> dict[str, float]:
    """Exact shortest-path distances from ``source`` to every node within
    ``cutoff_m`` (inclusive); nodes beyond the cutoff are absent."""
    if source not in graph.nodes:
        raise GraphError(f"unknown source node {source!r}")
    return multi_source_distances(graph, [source], cutoff_m)


def multi_source_distances(graph: RoadGraph, sources: list[str],
                           cutoff_m: float = float("inf")) -> dict[str, float]:
    """Dijkstra seeded from several sources at distance zero."""
    dist: dict[str, float] = {}
    heap: list[tuple[float, str]] = []
    for s in sources:
        if s not in graph.nodes:
            raise GraphError(f"unknown source node {s!r}")
        dist[s] = 0.0
        heappush(heap, (0.0, s))
    adj = graph.adjacency
    while heap:
        d, u = heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd <= cutoff_m and nd < dist.get(v, float("inf")):
                dist[v] = nd
                heappush(heap, (nd, v))
    return dist


class SnapIndex:
    """Nearest-road-node lookup; distance ties break to the smallest node id."""

    def __init__(self, graph: RoadGraph):
        self.node_ids = sorted(graph.nodes)
        self._lons = np.array([graph.nodes[n][0] for n in self.node_ids], dtype=float)
        self._lats = np.array([graph.nodes[n][1] for n in self.node_ids], dtype=float)

    def snap(self, lon: float, lat: float) -> str:
        d = haversine_many_m(lon, lat, self._lons, self._lats)
        return self.node_ids[int(np.argmin(d))]

    def snap_polygon(self, ring: list[tuple[float, float]]) -> str:
        """Road node nearest to the polygon boundary, standing in for the
        entrance of parks and industrial areas."""
        from shapely.geometry import LinearRing, Point

        arr = np.asarray(ring, dtype=float)
        proj = LocalProjection(arr[:, 0].mean(), arr[:, 1].mean())
        boundary = LinearRing(proj.project_ring(arr))
        xs, ys = proj.to_plane(self._lons, self._lats)
        best_i, best_d = 0, float("inf")
        for i in range(len(self.node_ids)):
            d = boundary.distance(Point(xs[i], ys[i]))
            if d < best_d:
                best_i, best_d = i, d
        return self.node_ids[best_i]


def snap_amenities(amenities: list[Amenity], snap_index: SnapIndex) -> dict[str, list[str]]:
    """Map each amenity category to the (snapped) road nodes of its members."""
    by_cat: dict[str, list[str]] = {}
    for a in amenities:
        if a.polygon is not None:
            node = snap_index.snap_polygon(a.polygon)
        else:
            node = snap_index.snap(*a.location)
        by_cat.setdefault(a.category, []).append(node)
    return by_cat


def k_nearest_from_map(dist_map: dict[str, float], amenity_nodes: list[str],
                       k: int, cutoff_m: float) -> list[float]:
    """The k smallest network distances to the amenity nodes, ascending,
    each <= cutoff; may return fewer than k (or none)."""
    ds = sorted(dist_map[n] for n in amenity_nodes if n in dist_map and dist_map[n] <= cutoff_m)
    return ds[:k]


def k_nearest_amenities(graph: RoadGraph, source_node: str, amenity_nodes: list[str],
                        k: int, cutoff_m: float) -> list[float]:
    """Cutoff Dijkstra from ``source_node``, then gather the k nearest
    amenity distances.  Convenience wrapper around the shared-map path."""
    if k < 1:
        raise GraphError("k must be >= 1")
    dist_map = network_distances(graph, source_node, cutoff_m)
    return k_nearest_from_map(dist_map, amenity_nodes, k, cutoff_m)

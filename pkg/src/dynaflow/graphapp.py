"""Road-graph applications of the speed predictions.

Builds a directed graph from segments (endpoints snapped within 0.5 m),
weights edges with travel times from per-slot speed predictions, and answers
shortest-path and isochrone queries. Routing uses a single (day, hour) slice;
speeds do not evolve en route.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field

from . import geo
from .geo import GeoPoint, RoadSegment

SNAP_TOLERANCE_M = 0.5


class GraphError(ValueError):
    pass


@dataclass
class Edge:
    src: str
    dst: str
    segment_id: str
    length_m: float
    speed_kmh: float | None = None

    @property
    def time_s(self) -> float:
        if self.speed_kmh is None:
            raise GraphError(f"edge {self.segment_id} has no speed assigned")
        return 3.6 * self.length_m / self.speed_kmh


@dataclass
class RoadGraph:
    nodes: dict[str, GeoPoint]
    edges: list[Edge]
    out_edges: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.out_edges:
            for i, e in enumerate(self.edges):
                self.out_edges.setdefault(e.src, []).append(i)

    def edge_for_segment(self, segment_id: str) -> Edge:
        for e in self.edges:
            if e.segment_id == segment_id:
                return e
        raise GraphError(f"no edge for segment {segment_id}")


@dataclass
class Route:
    nodes: list[str]
    total_length_m: float
    total_time_s: float | None

    @property
    def found(self) -> bool:
        return bool(self.nodes)


@dataclass
class IsochroneResult:
    source: str
    levels: list[tuple[float, set[str]]]  # (budget_s, reachable nodes)


def build_graph(segments: list[RoadSegment]) -> RoadGraph:
    """One directed edge per segment; endpoints within 0.5 m share a node."""
    if not segments:
        return RoadGraph(nodes={}, edges=[])
    for s in segments:
        if s.length_m <= 0:
            raise GraphError(f"zero-length segment rejected: {s.id}")
    ref = segments[0].points[0]
    placed: list[tuple[float, float, str]] = []  # (x, y, node_id)
    nodes: dict[str, GeoPoint] = {}

    def node_for(p: GeoPoint) -> str:
        x, y = geo.local_xy_m(p, ref.lat, ref.lon)
        for (px, py, nid) in placed:
            if (px - x) ** 2 + (py - y) ** 2 <= SNAP_TOLERANCE_M ** 2:
                return nid
        nid = f"n{len(placed)}"
        placed.append((x, y, nid))
        nodes[nid] = p
        return nid

    edges = []
    for s in segments:
        a = node_for(s.points[0])
        b = node_for(s.points[-1])
        edges.append(Edge(src=a, dst=b, segment_id=s.id, length_m=s.length_m))
    return RoadGraph(nodes=nodes, edges=edges)


def assign_speeds(graph: RoadGraph, predictions: dict[str, float]) -> int:
    """Set per-edge speeds from a segment->km/h map; uncovered edges get the
    mean predicted speed. Returns the number of edges that used the fallback."""
    if not predictions:
        raise GraphError("no predictions supplied")
    for sid, v in predictions.items():
        if not v > 0:
            raise GraphError(f"non-positive speed for {sid}: {v}")
    fallback = sum(predictions.values()) / len(predictions)
    misses = 0
    for e in graph.edges:
        if e.segment_id in predictions:
            e.speed_kmh = predictions[e.segment_id]
        else:
            e.speed_kmh = fallback
            misses += 1
    return misses


def _dijkstra(graph: RoadGraph, src: str, weight_fn):
    dist = {src: 0.0}
    prev: dict[str, tuple[str, int]] = {}
    heap = [(0.0, src)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, math.inf):
            continue
        for ei in graph.out_edges.get(u, ()):
            e = graph.edges[ei]
            nd = d + weight_fn(e)
            if nd < dist.get(e.dst, math.inf):
                dist[e.dst] = nd
                prev[e.dst] = (u, ei)
                heapq.heappush(heap, (nd, e.dst))
    return dist, prev


def shortest_path(graph: RoadGraph, src: str, dst: str, weight: str = "time") -> Route:
    """Minimal route under nonnegative weights; ``weight`` is length or time."""
    if src not in graph.nodes:
        raise GraphError(f"unknown node {src}")
    if dst not in graph.nodes:
        raise GraphError(f"unknown node {dst}")
    if weight == "length":
        weight_fn = lambda e: e.length_m
    elif weight == "time":
        weight_fn = lambda e: e.time_s
    else:
        raise GraphError(f"unknown weight {weight}")
    dist, prev = _dijkstra(graph, src, weight_fn)
    if dst not in dist:
        return Route(nodes=[], total_length_m=math.inf, total_time_s=None)
    path_edges = []
    node = dst
    chain = [dst]
    while node != src:
        node, ei = prev[node]
        chain.append(node)
        path_edges.append(graph.edges[ei])
    chain.reverse()
    total_len = sum(e.length_m for e in path_edges)
    has_speeds = all(e.speed_kmh is not None for e in path_edges)
    total_time = sum(e.time_s for e in path_edges) if has_speeds else None
    return Route(nodes=chain, total_length_m=total_len, total_time_s=total_time)


def isochrone(graph: RoadGraph, src: str, budgets_s: list[float]) -> IsochroneResult:
    """Reachable node sets within each time budget; sets are nested."""
    if src not in graph.nodes:
        raise GraphError(f"unknown node {src}")
    if list(budgets_s) != sorted(budgets_s):
        raise GraphError("budgets must be ascending")
    dist, _ = _dijkstra(graph, src, lambda e: e.time_s)
    levels = []
    for b in budgets_s:
        levels.append((b, {n for n, d in dist.items() if d <= b}))
    return IsochroneResult(source=src, levels=levels)


# --- geojson export ---------------------------------------------------------------

def route_to_geojson(graph: RoadGraph, route: Route, properties: dict | None = None) -> dict:
    coords = [[graph.nodes[n].lon, graph.nodes[n].lat] for n in route.nodes]
    props = {"total_length_m": route.total_length_m,
             "total_time_s": route.total_time_s}
    if properties:
        props.update(properties)
    return {
        "type": "FeatureCollection",
        "features": [{
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": props,
        }],
    }


def isochrone_to_geojson(graph: RoadGraph, result: IsochroneResult,
                         properties: dict | None = None) -> dict:
    features = []
    for budget, reachable in result.levels:
        coords = [[graph.nodes[n].lon, graph.nodes[n].lat] for n in sorted(reachable)]
        props = {"budget_s": budget, "source": result.source,
                 "n_nodes": len(reachable)}
        if properties:
            props.update(properties)
        features.append({
            "type": "Feature",
            "geometry": {"type": "MultiPoint", "coordinates": coords},
            "properties": props,
        })
    return {"type": "FeatureCollection", "features": features}


def write_geojson(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def predictions_from_csv(stream, day: int, hour: int) -> dict[str, float]:
    """Read the canonical segment-speed CSV and select one (day, hour) slot."""
    import csv

    r = csv.reader(stream)
    header = next(r, None)
    if header is None or header[:4] != ["segment_id", "day", "hour", "speed_kmh"]:
        raise GraphError(f"unexpected predictions header: {header}")
    out = {}
    for row in r:
        if int(row[1]) == day and int(row[2]) == hour:
            out[row[0]] = float(row[3])
    return out

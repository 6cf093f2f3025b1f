"""Road network graph: polyline geometry, nearest-segment queries and routing.

All geometry lives in a local planar frame (meters) produced by an
equirectangular projection anchored at the network centroid.  Directed edges
are the unit of everything downstream; a two-way street becomes two directed
edges with ids ``2 * street`` and ``2 * street + 1``.
"""
from __future__ import annotations

import heapq
import json
import math
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

EARTH_RADIUS = 6378137.0
METERS_PER_DEGREE = 2.0 * math.pi * EARTH_RADIUS / 360.0


class NetworkError(ValueError):
    """Raised for malformed or inconsistent network documents."""


class PlanarPoint(NamedTuple):
    x: float
    y: float


class RoadState(NamedTuple):
    """Position on a directed edge, ``offset`` meters from its start."""

    edge: int
    offset: float


@dataclass(frozen=True)
class LocalProjection:
    lat0: float
    lon0: float

    @property
    def m_per_deg_lat(self) -> float:
        return METERS_PER_DEGREE

    @property
    def m_per_deg_lon(self) -> float:
        return METERS_PER_DEGREE * math.cos(math.radians(self.lat0))

    def to_planar(self, lat, lon):
        """Works on scalars or numpy arrays."""
        x = (np.asarray(lon, dtype=float) - self.lon0) * self.m_per_deg_lon
        y = (np.asarray(lat, dtype=float) - self.lat0) * self.m_per_deg_lat
        if np.ndim(x) == 0:
            return float(x), float(y)
        return x, y

    def to_latlon(self, x, y):
        lat = np.asarray(y, dtype=float) / self.m_per_deg_lat + self.lat0
        lon = np.asarray(x, dtype=float) / self.m_per_deg_lon + self.lon0
        if np.ndim(lat) == 0:
            return float(lat), float(lon)
        return lat, lon


@dataclass(frozen=True, eq=False)
class Edge:
    id: int
    source: int
    target: int
    coords: np.ndarray  # (k, 2) planar vertices
    street: int
    oneway: bool
    cum: np.ndarray = field(repr=False)  # cumulative arc length at each vertex

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    @classmethod
    def build(cls, id, source, target, coords, street, oneway):
        coords = np.asarray(coords, dtype=float).reshape(-1, 2)
        if len(coords) > 2:
            keep = np.concatenate([[True], np.any(np.diff(coords, axis=0) != 0, axis=1)])
            coords = coords[keep]
        if len(coords) < 2:
            raise NetworkError(f"edge {id}: geometry needs at least two points")
        seg = np.hypot(*np.diff(coords, axis=0).T)
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        coords.setflags(write=False)
        cum.setflags(write=False)
        return cls(id, source, target, coords, street, oneway, cum)

    def locate(self, offset: float) -> tuple[int, float]:
        """Segment index containing ``offset`` (a vertex belongs to the following
        segment) and the fraction along it."""
        k = len(self.coords) - 1
        i = min(bisect_right(self.cum, offset) - 1, k - 1)
        i = max(i, 0)
        seg = self.cum[i + 1] - self.cum[i]
        frac = 0.0 if seg == 0.0 else (offset - self.cum[i]) / seg
        return i, min(max(frac, 0.0), 1.0)


class RoadNetwork:
    """Immutable directed road graph with a uniform-grid segment index."""

    def __init__(self, nodes: dict[int, tuple[float, float]], edges: Iterable[Edge],
                 projection: LocalProjection, cell_size: float = 50.0):
        self.nodes = {int(k): PlanarPoint(float(v[0]), float(v[1])) for k, v in nodes.items()}
        self.edges: dict[int, Edge] = {}
        for e in sorted(edges, key=lambda e: e.id):
            if e.id in self.edges:
                raise NetworkError(f"duplicate edge id {e.id}")
            self.edges[e.id] = e
        self.projection = projection
        self.cell_size = float(cell_size)
        self._validate()

        self.out_edges: dict[int, list[int]] = {n: [] for n in self.nodes}
        self.in_edges: dict[int, list[int]] = {n: [] for n in self.nodes}
        self._adj: dict[int, list[tuple[int, float]]] = {n: [] for n in self.nodes}
        for e in self.edges.values():
            self.out_edges[e.source].append(e.id)
            self.in_edges[e.target].append(e.id)
            self._adj[e.source].append((e.target, e.length))
        self._build_index()

    def _validate(self):
        for e in self.edges.values():
            for n in (e.source, e.target):
                if n not in self.nodes:
                    raise NetworkError(f"edge {e.id}: references missing node {n}")
            if not e.length > 0.0:
                raise NetworkError(f"edge {e.id}: zero-length edge")
            if (np.hypot(*(e.coords[0] - self.nodes[e.source])) > 1e-6
                    or np.hypot(*(e.coords[-1] - self.nodes[e.target])) > 1e-6):
                raise NetworkError(f"edge {e.id}: geometry does not meet its end nodes")

    # -- spatial index -------------------------------------------------

    def _build_index(self):
        a, b, eid, seg, base = [], [], [], [], []
        for e in self.edges.values():
            k = len(e.coords) - 1
            a.append(e.coords[:-1])
            b.append(e.coords[1:])
            eid.append(np.full(k, e.id))
            seg.append(np.arange(k))
            base.append(e.cum[:-1])
        if a:
            a, b = np.concatenate(a), np.concatenate(b)
            self._seg_edge = np.concatenate(eid)
            self._seg_base = np.concatenate(base)
        else:
            a = b = np.zeros((0, 2))
            self._seg_edge = np.zeros(0, dtype=int)
            self._seg_base = np.zeros(0)
        # Distances are computed on a canonically ordered copy of each segment
        # so that the two directions of a street give bit-identical results.
        swap = (a[:, 0] > b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] > b[:, 1]))
        self._seg_swap = swap
        self._seg_p = np.where(swap[:, None], b, a)
        self._seg_q = np.where(swap[:, None], a, b)
        self._seg_len = np.hypot(*(b - a).T)

        cs = self.cell_size
        grid = defaultdict(list)
        for i in range(len(a)):
            x0, x1 = sorted((a[i, 0], b[i, 0]))
            y0, y1 = sorted((a[i, 1], b[i, 1]))
            for cx in range(math.floor(x0 / cs), math.floor(x1 / cs) + 1):
                for cy in range(math.floor(y0 / cs), math.floor(y1 / cs) + 1):
                    grid[cx, cy].append(i)
        self._grid = {k: np.array(v, dtype=int) for k, v in grid.items()}

    def _segments_near(self, x: float, y: float, radius: float) -> np.ndarray:
        cs = self.cell_size
        cx0, cx1 = math.floor((x - radius) / cs), math.floor((x + radius) / cs)
        cy0, cy1 = math.floor((y - radius) / cs), math.floor((y + radius) / cs)
        if (cx1 - cx0 + 1) * (cy1 - cy0 + 1) > 4 * len(self._grid) + 16:
            return np.arange(len(self._seg_edge))
        found = [self._grid[c] for cx in range(cx0, cx1 + 1) for cy in range(cy0, cy1 + 1)
                 if (c := (cx, cy)) in self._grid]
        if not found:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate(found))

    def g2r_project(self, p, radius: float, max_candidates: int | None = None
                    ) -> list[tuple[RoadState, float]]:
        """Closest point on every directed edge within ``radius`` of ``p``.

        Sorted by distance, then edge id; one entry per edge.
        """
        if radius <= 0:
            raise ValueError("radius must be positive")
        x, y = float(p[0]), float(p[1])
        idx = self._segments_near(x, y, radius)
        if len(idx) == 0:
            return []
        P, Q = self._seg_p[idx], self._seg_q[idx]
        d = Q - P
        dd = np.einsum("ij,ij->i", d, d)
        t = np.clip(((x - P[:, 0]) * d[:, 0] + (y - P[:, 1]) * d[:, 1]) / np.where(dd > 0, dd, 1.0),
                    0.0, 1.0)
        fx, fy = P[:, 0] + t * d[:, 0], P[:, 1] + t * d[:, 1]
        dist = np.hypot(x - fx, y - fy)
        t = np.where(self._seg_swap[idx], 1.0 - t, t)
        offset = self._seg_base[idx] + t * self._seg_len[idx]
        eids = self._seg_edge[idx]
        keep = dist <= radius
        if not keep.any():
            return []
        dist, offset, eids = dist[keep], offset[keep], eids[keep]
        order = np.lexsort((offset, eids, dist))
        out, seen = [], set()
        for i in order:
            e = int(eids[i])
            if e in seen:
                continue
            seen.add(e)
            off = min(max(float(offset[i]), 0.0), self.edges[e].length)
            out.append((RoadState(e, off), float(dist[i])))
            if max_candidates is not None and len(out) >= max_candidates:
                break
        return out

    def g2r_nearest(self, p, radius: float) -> RoadState | None:
        found = self.g2r_project(p, radius, 1)
        return found[0][0] if found else None

    # -- geometry along edges --------------------------------------------

    def point_at(self, s: RoadState) -> PlanarPoint:
        e = self.edges[s.edge]
        i, f = e.locate(s.offset)
        a, b = e.coords[i], e.coords[i + 1]
        return PlanarPoint(float(a[0] + f * (b[0] - a[0])), float(a[1] + f * (b[1] - a[1])))

    def tangent_at(self, s: RoadState) -> tuple[float, float]:
        e = self.edges[s.edge]
        i, _ = e.locate(s.offset)
        d = e.coords[i + 1] - e.coords[i]
        n = math.hypot(d[0], d[1])
        return float(d[0] / n), float(d[1] / n)

    def r2g_embed(self, s: RoadState, speed: float) -> np.ndarray:
        """Road state as an off-road state vector ``[x, y, vx, vy]``."""
        p = self.point_at(s)
        ux, uy = self.tangent_at(s)
        return np.array([p.x, p.y, ux * speed, uy * speed])

    # -- routing -----------------------------------------------------------

    def node_distances(self, source: int, limit: float, targets: Iterable[int] | None = None
                       ) -> dict[int, float]:
        """Dijkstra from ``source``; stops at ``limit`` or once all targets settle.

        Only settled nodes are returned, so the values are exact shortest
        distances.
        """
        remaining = set(targets) if targets is not None else None
        best = {source: 0.0}
        settled: dict[int, float] = {}
        heap = [(0.0, source)]
        adj = self._adj
        while heap:
            d, u = heapq.heappop(heap)
            if u in settled:
                continue
            settled[u] = d
            if remaining is not None:
                remaining.discard(u)
                if not remaining:
                    break
            for v, w in adj[u]:
                nd = d + w
                if nd <= limit and nd < best.get(v, math.inf):
                    best[v] = nd
                    heapq.heappush(heap, (nd, v))
        return settled

    def route_distances(self, a: RoadState, targets: Sequence[RoadState], cutoff: float,
                        _cache: dict | None = None) -> list[float]:
        """Directed route length from ``a`` to each target; ``inf`` beyond cutoff."""
        ea = self.edges[a.edge]
        rem = ea.length - a.offset
        out = [math.inf] * len(targets)
        need = []
        for k, b in enumerate(targets):
            if b.edge == a.edge and b.offset >= a.offset:
                out[k] = b.offset - a.offset
            else:
                need.append(k)
        if need and rem <= cutoff:
            if _cache is not None and ea.target in _cache:
                nd = _cache[ea.target]
            else:
                want = {self.edges[targets[k].edge].source for k in need}
                nd = self.node_distances(ea.target, cutoff, want)
            for k in need:
                b = targets[k]
                d = nd.get(self.edges[b.edge].source)
                if d is not None:
                    out[k] = rem + d + b.offset
        return [d if d <= cutoff else math.inf for d in out]

    def route_matrix(self, sources: Sequence[RoadState], targets: Sequence[RoadState],
                     cutoff: float) -> np.ndarray:
        """Route distances for every (source, target) pair.

        Searches are shared between sources that leave from the same node;
        each search runs until every target's start node is settled.
        """
        cache: dict = {}
        m = np.full((len(sources), len(targets)), math.inf)
        if not targets:
            return m
        want = {self.edges[b.edge].source for b in targets}
        for j, a in enumerate(sources):
            node = self.edges[a.edge].target
            if node not in cache:
                cache[node] = self.node_distances(node, cutoff, want)
            m[j] = self.route_distances(a, targets, cutoff, cache)
        return m

    def route_distance(self, a: RoadState, b: RoadState, cutoff: float = math.inf) -> float:
        if cutoff <= 0:
            raise ValueError("cutoff must be positive")
        return self.route_distances(a, [b], cutoff)[0]

    def shortest_path(self, a: RoadState, b: RoadState, cutoff: float = math.inf) -> list[int] | None:
        """Edge ids traversed from ``a`` to ``b`` (both end edges included)."""
        if a.edge == b.edge and b.offset >= a.offset:
            return [a.edge]
        start, goal = self.edges[a.edge].target, self.edges[b.edge].source
        best = {start: 0.0}
        prev: dict[int, int] = {}
        done = set()
        heap = [(0.0, start)]
        while heap:
            d, u = heapq.heappop(heap)
            if u in done:
                continue
            done.add(u)
            if u == goal:
                break
            for eid in self.out_edges[u]:
                e = self.edges[eid]
                nd = d + e.length
                if nd <= cutoff and nd < best.get(e.target, math.inf):
                    best[e.target] = nd
                    prev[e.target] = eid
                    heapq.heappush(heap, (nd, e.target))
        if goal not in done:
            return None
        path, n = [], goal
        while n != start:
            eid = prev[n]
            path.append(eid)
            n = self.edges[eid].source
        return [a.edge] + path[::-1] + [b.edge]

    def path_coords(self, a: RoadState, b: RoadState, cutoff: float = math.inf) -> list[PlanarPoint] | None:
        """Polyline followed along the road from ``a`` to ``b``."""
        edges = self.shortest_path(a, b, cutoff)
        if edges is None:
            return None
        pts = [self.point_at(a)]
        for k, eid in enumerate(edges):
            e = self.edges[eid]
            lo = a.offset if k == 0 else 0.0
            hi = b.offset if k == len(edges) - 1 else e.length
            for v, c in zip(e.coords, e.cum):
                if lo < c < hi:
                    pts.append(PlanarPoint(float(v[0]), float(v[1])))
            if k < len(edges) - 1:
                pts.append(PlanarPoint(*map(float, e.coords[-1])))
        pts.append(self.point_at(b))
        return pts

    # -- (de)serialization ----------------------------------------------

    @classmethod
    def from_streets(cls, nodes: dict[int, tuple[float, float]], streets: Iterable[dict],
                     projection: LocalProjection, cell_size: float = 50.0) -> RoadNetwork:
        """Build from planar street records ``{id, from, to, oneway, coords?}``."""
        edges = []
        for s in streets:
            sid, u, v = int(s["id"]), int(s["from"]), int(s["to"])
            for n in (u, v):
                if n not in nodes:
                    raise NetworkError(f"edge {sid}: references missing node {n}")
            coords = s.get("coords")
            if coords is None:
                coords = [nodes[u], nodes[v]]
            coords = np.asarray(coords, dtype=float)
            oneway = bool(s.get("oneway", False))
            edges.append(Edge.build(2 * sid, u, v, coords, sid, oneway))
            if not oneway:
                edges.append(Edge.build(2 * sid + 1, v, u, coords[::-1].copy(), sid, oneway))
        return cls(nodes, edges, projection, cell_size)

    def streets(self) -> list[dict]:
        """Inverse of :meth:`from_streets` (planar street records)."""
        out = []
        for e in self.edges.values():
            if e.id % 2 == 1 and (e.id - 1) in self.edges and not e.oneway:
                continue
            out.append({"id": e.street, "from": e.source, "to": e.target,
                        "oneway": e.oneway, "coords": e.coords.tolist()})
        return out

    def to_document(self) -> dict:
        proj = self.projection
        nodes = []
        for nid, p in sorted(self.nodes.items()):
            lat, lon = proj.to_latlon(p.x, p.y)
            nodes.append({"id": nid, "lat": lat, "lon": lon})
        edges = []
        for s in self.streets():
            c = np.asarray(s["coords"])
            lat, lon = proj.to_latlon(c[:, 0], c[:, 1])
            rec = {"id": s["id"], "from": s["from"], "to": s["to"], "oneway": s["oneway"]}
            if len(c) > 2:
                rec["geometry"] = [[float(a), float(b)] for a, b in zip(lat, lon)]
            edges.append(rec)
        return {"nodes": nodes, "edges": edges}

    def __len__(self):
        return len(self.edges)


def load_network(source, cell_size: float = 50.0) -> RoadNetwork:
    """Parse a network JSON document (path, file object, str or dict)."""
    if isinstance(source, dict):
        doc = source
    elif hasattr(source, "read"):
        doc = json.load(source)
    else:
        text = str(source)
        if text.lstrip().startswith("{"):
            doc = json.loads(text)
        else:
            with open(text, encoding="utf-8") as fh:
                doc = json.load(fh)
    try:
        raw_nodes = {int(n["id"]): (float(n["lat"]), float(n["lon"])) for n in doc["nodes"]}
        raw_edges = list(doc["edges"])
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkError(f"malformed network document: {exc}") from exc
    if not raw_nodes:
        raise NetworkError("network has no nodes")
    lats = [p[0] for p in raw_nodes.values()]
    lons = [p[1] for p in raw_nodes.values()]
    proj = LocalProjection((min(lats) + max(lats)) / 2.0, (min(lons) + max(lons)) / 2.0)
    nodes = {k: proj.to_planar(lat, lon) for k, (lat, lon) in raw_nodes.items()}
    streets = []
    for rec in raw_edges:
        try:
            sid, u, v = int(rec["id"]), int(rec["from"]), int(rec["to"])
            oneway = bool(rec.get("oneway", False))
        except (KeyError, TypeError, ValueError) as exc:
            raise NetworkError(f"malformed edge record {rec!r}") from exc
        for n in (u, v):
            if n not in nodes:
                raise NetworkError(f"edge {sid}: references missing node {n}")
        geom = rec.get("geometry")
        if geom:
            g = np.asarray(geom, dtype=float)
            x, y = proj.to_planar(g[:, 0], g[:, 1])
            coords = np.column_stack([x, y])
            # Snap the ends to the nodes so float noise in the document does not
            # break the endpoint invariant.
            coords[0], coords[-1] = nodes[u], nodes[v]
        else:
            coords = None
        streets.append({"id": sid, "from": u, "to": v, "oneway": oneway, "coords": coords})
    return RoadNetwork.from_streets(nodes, streets, proj, cell_size)


def save_network(net: RoadNetwork, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(net.to_document(), fh, indent=1)
        fh.write("\n")

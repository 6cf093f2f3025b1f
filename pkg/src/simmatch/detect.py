"""Pool off-road stretches from many matched traces to find map errors.

Each maximal off-road run of a matched trajectory becomes an
:class:`OffroadSegment`.  Segments are rasterised onto a square grid that
records, per cell, which traces passed through and how many densified
points landed there.  Cells crossed by at least ``min_traces`` distinct
traces are grouped into 8-connected regions and reported.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from shapely.geometry import box, mapping
from shapely.ops import unary_union

from .roadnet import RoadState

DEFAULT_CELL = 25.0
DEFAULT_MIN_TRACES = 3


@dataclass
class OffroadSegment:
    trace_id: str
    points: np.ndarray  # (n, 2) planar
    t_start: float
    t_end: float
    entry: RoadState | None = None
    exit: RoadState | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(self.points) == 0:
            raise ValueError("segment needs at least one point")
        if self.t_end < self.t_start:
            raise ValueError("segment ends before it starts")


def _g_runs(modes: Sequence[str]):
    k, n = 0, len(modes)
    while k < n:
        if modes[k] != "g":
            k += 1
            continue
        j = k
        while j < n and modes[j] == "g":
            j += 1
        yield k, j
        k = j


def extract_segments(traj, trace_id) -> list[OffroadSegment]:
    """One segment per maximal off-road run of a :class:`MapTrajectory`."""
    modes = [p.mode.value for p in traj]
    out = []
    for a, b in _g_runs(modes):
        pts = [(traj[k].x, traj[k].y) for k in range(a, b)]
        entry = traj[a - 1].road if a > 0 else None
        exit_ = traj[b].road if b < len(traj) else None
        out.append(OffroadSegment(str(trace_id), np.array(pts), traj[a].t, traj[b - 1].t, entry, exit_))
    return out


def segments_from_points(points: Sequence[dict], trace_id, projection) -> list[OffroadSegment]:
    """Same as :func:`extract_segments` for trajectory GeoJSON point records."""
    modes = ["g" if p["mode"] == "offroad" else "r" for p in points]

    def road(p):
        if p.get("edge_id") is None:
            return None
        return RoadState(int(p["edge_id"]), float(p.get("offset", 0.0)))

    out = []
    for a, b in _g_runs(modes):
        pts = [projection.to_planar(points[k]["lat"], points[k]["lon"]) for k in range(a, b)]
        entry = road(points[a - 1]) if a > 0 else None
        exit_ = road(points[b]) if b < len(points) else None
        out.append(OffroadSegment(str(trace_id), np.array(pts), float(points[a]["t"]),
                                  float(points[b - 1]["t"]), entry, exit_))
    return out


def densify(points: np.ndarray, step: float) -> np.ndarray:
    """Polyline resampled so consecutive points are at most ``step`` apart."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    out = [pts[:1]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(np.hypot(*(b - a)) / step)))
        f = np.arange(1, n + 1)[:, None] / n
        out.append(a + f * (b - a))
    return np.vstack(out)


@dataclass
class DensityGrid:
    """Per-cell distinct traces and point counts on a ``cell_size`` grid."""

    cell_size: float = DEFAULT_CELL
    traces: dict[tuple[int, int], set] = field(default_factory=dict)
    points: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.cell_size > 0:
            raise ValueError("cell size must be positive")

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(math.floor(x / self.cell_size)), int(math.floor(y / self.cell_size))

    def counts(self, cell) -> tuple[int, int]:
        return len(self.traces.get(cell, ())), self.points.get(cell, 0)

    def cell_box(self, cell):
        i, j = cell
        c = self.cell_size
        return box(i * c, j * c, (i + 1) * c, (j + 1) * c)

    def copy(self) -> DensityGrid:
        return DensityGrid(self.cell_size, {k: set(v) for k, v in self.traces.items()}, dict(self.points))

    def __eq__(self, other):
        return (isinstance(other, DensityGrid) and self.cell_size == other.cell_size
                and self.traces == other.traces and self.points == other.points)


def accumulate(grid: DensityGrid, segs: Iterable[OffroadSegment]) -> DensityGrid:
    """Add segments to ``grid`` in place and return it.

    Each segment is densified to a fifth of the cell size; every densified
    point adds one to its cell's point count and the trace id to its set.
    """
    step = grid.cell_size / 5.0
    for s in segs:
        for x, y in densify(s.points, step):
            c = grid.cell_of(x, y)
            grid.traces.setdefault(c, set()).add(s.trace_id)
            grid.points[c] = grid.points.get(c, 0) + 1
    return grid


def merge(a: DensityGrid, b: DensityGrid) -> DensityGrid:
    """Grid holding the union of two independently built grids."""
    if a.cell_size != b.cell_size:
        raise ValueError("cannot merge grids with different cell sizes")
    out = a.copy()
    for c, ids in b.traces.items():
        out.traces.setdefault(c, set()).update(ids)
    for c, n in b.points.items():
        out.points[c] = out.points.get(c, 0) + n
    return out


@dataclass
class Region:
    id: int
    cells: list[tuple[int, int]]
    trace_ids: frozenset
    points: int
    geometry: object  # shapely polygon in planar coordinates

    @property
    def n_traces(self) -> int:
        return len(self.trace_ids)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        return self.geometry.bounds


def _components(cells: set) -> list[list[tuple[int, int]]]:
    seen, comps = set(), []
    for start in sorted(cells):
        if start in seen:
            continue
        seen.add(start)
        stack, comp = [start], []
        while stack:
            i, j = stack.pop()
            comp.append((i, j))
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    n = (i + di, j + dj)
                    if n in cells and n not in seen:
                        seen.add(n)
                        stack.append(n)
        comps.append(sorted(comp))
    return comps


def report(grid: DensityGrid, min_traces: int = DEFAULT_MIN_TRACES) -> list[Region]:
    """8-connected regions of cells seen by ``min_traces`` or more traces.

    Regions are ranked by distinct traces over the region, then by points.
    """
    if min_traces < 1:
        raise ValueError("min_traces must be at least 1")
    hot = {c for c, ids in grid.traces.items() if len(ids) >= min_traces}
    regions = []
    for comp in _components(hot):
        ids = frozenset().union(*(grid.traces[c] for c in comp))
        pts = sum(grid.points.get(c, 0) for c in comp)
        geom = unary_union([grid.cell_box(c) for c in comp])
        regions.append(Region(0, comp, ids, pts, geom))
    regions.sort(key=lambda r: (-r.n_traces, -r.points, r.cells[0]))
    for k, r in enumerate(regions, 1):
        r.id = k
    return regions


def _to_lonlat(geom, projection):
    def conv(ring):
        out = []
        for x, y in ring:
            lat, lon = projection.to_latlon(x, y)
            out.append([round(lon, 8), round(lat, 8)])
        return out

    doc = mapping(geom)
    if doc["type"] == "Polygon":
        return {"type": "Polygon", "coordinates": [conv(r) for r in doc["coordinates"]]}
    return {"type": "MultiPolygon", "coordinates": [[conv(r) for r in poly] for poly in doc["coordinates"]]}


def regions_geojson(regions: Sequence[Region], projection) -> dict:
    feats = []
    for r in regions:
        feats.append({
            "type": "Feature",
            "geometry": _to_lonlat(r.geometry, projection),
            "properties": {"region": r.id, "traces": r.n_traces, "points": r.points, "cells": len(r.cells)},
        })
    return {"type": "FeatureCollection", "features": feats}


def write_summary(regions: Sequence[Region], sink, projection=None) -> None:
    """CSV: region, traces, points, bounding box (planar, or lon/lat with a projection)."""
    owned = not hasattr(sink, "write")
    fh = open(sink, "w", newline="", encoding="utf-8") if owned else sink
    try:
        w = csv.writer(fh, lineterminator="\n")
        if projection is None:
            w.writerow(["region", "traces", "points", "min_x", "min_y", "max_x", "max_y"])
        else:
            w.writerow(["region", "traces", "points", "min_lon", "min_lat", "max_lon", "max_lat"])
        for r in regions:
            x0, y0, x1, y1 = r.bbox
            if projection is not None:
                lat0, lon0 = projection.to_latlon(x0, y0)
                lat1, lon1 = projection.to_latlon(x1, y1)
                x0, y0, x1, y1 = lon0, lat0, lon1, lat1
            w.writerow([r.id, r.n_traces, r.points] + [repr(round(v, 8)) for v in (x0, y0, x1, y1)])
    finally:
        if owned:
            fh.close()

"""Trace CSV input and trajectory GeoJSON / mode-trace CSV output."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

logger = logging.getLogger(__name__)

MODE_NAMES = {"r": "road", "g": "offroad"}
COORD_DIGITS = 8


class TraceError(ValueError):
    """Malformed trace input; ``line`` is the 1-based CSV line when known."""

    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


@dataclass(frozen=True)
class Observation:
    t: float
    lat: float
    lon: float
    accuracy: float | None = None

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.t, self.lat, self.lon)):
            raise ValueError("observation fields must be finite")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} out of range")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} out of range")
        if self.accuracy is not None and not self.accuracy > 0:
            raise ValueError(f"accuracy {self.accuracy} must be positive")


def _open_text(source):
    if hasattr(source, "read"):
        return source, False
    if isinstance(source, str) and "\n" in source:
        return io.StringIO(source), False
    return open(source, newline="", encoding="utf-8"), True


def read_trace(source) -> list[Observation]:
    """Read ``t,lat,lon[,accuracy]`` CSV (path, file object or CSV text).

    Rows are sorted by time (stable); repeated timestamps keep the first row.
    """
    fh, owned = _open_text(source)
    try:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise TraceError("empty trace file")
        cols = [h.strip().lower() for h in header]
        missing = {"t", "lat", "lon"} - set(cols)
        if missing:
            raise TraceError(f"header lacks column(s) {sorted(missing)}", 1)
        it, ilat, ilon = cols.index("t"), cols.index("lat"), cols.index("lon")
        iacc = cols.index("accuracy") if "accuracy" in cols else None
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                acc = row[iacc].strip() if iacc is not None and iacc < len(row) else ""
                obs = Observation(float(row[it]), float(row[ilat]), float(row[ilon]),
                                  float(acc) if acc else None)
            except (ValueError, IndexError) as exc:
                raise TraceError(str(exc) or "malformed row", line) from None
            rows.append(obs)
    finally:
        if owned:
            fh.close()
    if not rows:
        raise TraceError("trace has no observations")
    rows.sort(key=lambda o: o.t)
    out = [rows[0]]
    for o in rows[1:]:
        if o.t != out[-1].t:
            out.append(o)
    dropped = len(rows) - len(out)
    if dropped:
        logger.warning("dropped %d observation(s) with duplicate timestamps", dropped)
    return out


def write_trace(observations, sink) -> None:
    owned = not hasattr(sink, "write")
    fh = open(sink, "w", newline="", encoding="utf-8") if owned else sink
    try:
        w = csv.writer(fh, lineterminator="\n")
        with_acc = any(o.accuracy is not None for o in observations)
        w.writerow(["t", "lat", "lon"] + (["accuracy"] if with_acc else []))
        for o in observations:
            row = [repr(o.t), repr(o.lat), repr(o.lon)]
            if with_acc:
                row.append("" if o.accuracy is None else repr(o.accuracy))
            w.writerow(row)
    finally:
        if owned:
            fh.close()


def _lonlat(proj, x, y) -> list[float]:
    lat, lon = proj.to_latlon(x, y)
    return [round(lon, COORD_DIGITS), round(lat, COORD_DIGITS)]


def _runs(modes):
    start = 0
    for k in range(1, len(modes) + 1):
        if k == len(modes) or modes[k] != modes[start]:
            yield start, k
            start = k


def trajectory_geojson(traj, net, route_cutoff: float = 10000.0) -> dict:
    """FeatureCollection: a LineString per same-mode run, then a Point per stage.

    Each run's line continues to the first point of the following run so the
    drawn path is unbroken; consecutive road points follow the road geometry.
    """
    proj = net.projection
    modes = [p.mode.value for p in traj]
    features = []
    for a, b in _runs(modes):
        coords = []
        for k in range(a, min(b + 1, len(traj))):
            p = traj[k]
            if k > a and traj[k - 1].road is not None and p.road is not None:
                leg = net.path_coords(traj[k - 1].road, p.road, route_cutoff)
                if leg is not None:
                    coords.extend(_lonlat(proj, q.x, q.y) for q in leg[1:-1])
            coords.append(_lonlat(proj, p.x, p.y))
        if len(coords) == 1:
            coords.append(list(coords[0]))
        features.append({
            "type": "Feature",
            "geometry": {"type": "LineString", "coordinates": coords},
            "properties": {"mode": MODE_NAMES[modes[a]], "start": a, "end": b - 1},
        })
    for p in traj:
        props = {"t": p.t, "mode": MODE_NAMES[p.mode.value], "mu_r": p.mu_forward}
        if p.road is not None:
            props["edge_id"] = p.road.edge
            props["offset"] = round(p.road.offset, 3)
        features.append({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": _lonlat(proj, p.x, p.y)},
            "properties": props,
        })
    return {"type": "FeatureCollection", "features": features}


def dumps_geojson(doc: dict, indent: int | None = 1) -> str:
    return json.dumps(doc, indent=indent) + "\n"


def write_trajectory(traj, net, sink) -> dict:
    doc = trajectory_geojson(traj, net)
    text = dumps_geojson(doc)
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        Path(sink).write_text(text, encoding="utf-8")
    return doc


def write_mode_trace(traj, sink) -> None:
    """Per-stage ``t,mu_r_forward,mu_r_backward`` CSV."""
    owned = not hasattr(sink, "write")
    fh = open(sink, "w", newline="", encoding="utf-8") if owned else sink
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "mu_r_forward", "mu_r_backward"])
        for p in traj:
            w.writerow([repr(p.t), repr(p.mu_forward), repr(p.mu_backward)])
    finally:
        if owned:
            fh.close()


def read_trajectory_points(source) -> list[dict]:
    """Point features of a trajectory GeoJSON as ``{t, mode, lon, lat, ...}`` dicts."""
    if isinstance(source, dict):
        doc = source
    else:
        doc = json.loads(Path(source).read_text(encoding="utf-8"))
    out = []
    for f in doc.get("features", []):
        g = f.get("geometry") or {}
        if g.get("type") != "Point":
            continue
        props = dict(f.get("properties") or {})
        props["lon"], props["lat"] = g["coordinates"][:2]
        out.append(props)
    out.sort(key=lambda p: p["t"])
    return out

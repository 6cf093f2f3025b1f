"""Scoring helpers behind the ``eval`` and ``bench`` commands."""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass

import numpy as np
from shapely.geometry import LineString, Point

from . import simm, synth
from .onroad import viterbi_match
from .simm import Mode, SimmParams, TrajectoryPoint, MapTrajectory, to_fixes

logger = logging.getLogger(__name__)

BUFFER_M = 30.0


def baseline_trajectory(fixes, net, hmm) -> MapTrajectory:
    """Pure HMM match as an all-road trajectory; unmatched fixes are dropped."""
    states = viterbi_match(fixes, net, hmm)
    out = MapTrajectory()
    for f, s in zip(fixes, states):
        if s is None:
            continue
        p = net.point_at(s)
        out.append(TrajectoryPoint(f.t, Mode.ROAD, s, None, p.x, p.y, 1.0, 1.0))
    dropped = len(fixes) - len(out)
    if dropped:
        logger.warning("baseline left %d fix(es) unmatched", dropped)
    return out


@dataclass
class GapRun:
    seed: int
    offroad_on_gap: bool
    error: float
    baseline_error: float
    switch_index: int | None  # first off-road stage of the backward pass
    crossing_index: int | None  # first stage with forward road weight below 0.5

    @property
    def beats_baseline(self) -> bool:
        return self.error <= self.baseline_error

    @property
    def no_lag(self) -> bool:
        if self.switch_index is None:
            return False
        return self.crossing_index is None or self.switch_index <= self.crossing_index


def first_switch(modes: str) -> int | None:
    k = modes.find("g")
    return None if k < 0 else k


def first_crossing(mu_r) -> int | None:
    below = np.flatnonzero(np.asarray(mu_r) < 0.5)
    return int(below[0]) if len(below) else None


def gap_run(seed: int, params: SimmParams | None = None, net=None) -> GapRun:
    params = params or SimmParams()
    sc = synth.gap_scenario(seed, net=net)
    fixes = to_fixes(sc.observations, sc.corrupted.projection)
    history = simm.forward_filter(fixes, sc.corrupted, params)
    traj = simm.backward_map(history, sc.corrupted, params)
    base = viterbi_match(fixes, sc.corrupted, params.hmm)

    buf = LineString(sc.network.edges[sc.deleted_edge].coords).buffer(BUFFER_M)
    on_gap = any(p.mode is Mode.OFFROAD and buf.intersects(Point(p.x, p.y)) for p in traj)
    err = float(np.linalg.norm(traj.xy - sc.truth, axis=1).mean())
    bxy = np.array([sc.corrupted.point_at(s) for s in base])
    berr = float(np.linalg.norm(bxy - sc.truth, axis=1).mean())
    return GapRun(seed, on_gap, err, berr, first_switch(traj.modes), first_crossing(history.mu_r))


def gap_summary(runs) -> dict:
    n = len(runs)
    return {
        "runs": n,
        "offroad_on_gap": sum(r.offroad_on_gap for r in runs) / n,
        "beats_baseline": sum(r.beats_baseline for r in runs) / n,
        "no_lag": sum(r.no_lag for r in runs) / n,
        "mean_error": float(np.mean([r.error for r in runs])),
        "mean_baseline_error": float(np.mean([r.baseline_error for r in runs])),
    }


def bench_trace(size: int = 50, points: int = 1000, seed: int = 0):
    """Grid network and a fix list of ``points`` stages over it."""
    net = synth.grid_network(size, size)
    interval, speed = 3.0, 10.0
    length = (points + 5) * interval * (speed + 3.0)
    path = synth.generate_route(net, length, seed=seed, speed=speed)
    obs = synth.observe(path, net, interval, 5.0, seed=seed + 1)
    if len(obs) < points:
        raise synth.ScenarioError("route too short for the requested number of points")
    return net, to_fixes(obs[:points], net.projection)


def bench(size: int = 50, points: int = 1000, repeats: int = 5, seed: int = 0,
          params: SimmParams | None = None) -> dict:
    """Median wall time of sIMM and of the HMM baseline on one trace."""
    params = params or SimmParams()
    net, fixes = bench_trace(size, points, seed)
    t_simm, t_hmm = [], []
    for _ in range(repeats):
        t0 = time.perf_counter()
        simm.match(fixes, net, params)
        t_simm.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        viterbi_match(fixes, net, params.hmm)
        t_hmm.append(time.perf_counter() - t0)
    a, b = statistics.median(t_simm), statistics.median(t_hmm)
    return {"points": points, "grid": size, "repeats": repeats,
            "simm_s": a, "hmm_s": b, "ratio": a / b}

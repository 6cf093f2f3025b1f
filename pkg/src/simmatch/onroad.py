"""Finite-state HMM on-road tracker.

Candidates are perpendicular projections of each fix onto nearby directed
edges.  Emission is Gaussian in the perpendicular distance; transition is
exponential in the gap between route distance and straight-line distance.
Everything is kept in log space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from .logmath import logsumexp

from .roadnet import RoadNetwork, RoadState

NEG_INF = -math.inf


@dataclass(frozen=True)
class HmmParams:
    sigma_z: float = 4.07
    beta: float = 3.0
    search_radius: float = 50.0
    max_candidates: int = 8
    route_cutoff: float = 2000.0
    cutoff_factor: float = 10.0

    def __post_init__(self):
        for name in ("sigma_z", "beta", "search_radius", "max_candidates", "route_cutoff"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.cutoff_factor >= 0:
            raise ValueError("cutoff_factor must be non-negative")

    def cutoff(self, gc_dist: float) -> float:
        return self.route_cutoff + self.cutoff_factor * gc_dist


class Candidate(NamedTuple):
    state: RoadState
    distance: float
    emission_logp: float
    u_log: float
    w_log: float


@dataclass
class Stage:
    """One observation time of the lattice.

    ``trans_log[j, i]`` holds the log transition density from candidate ``j``
    of the previous stage to candidate ``i`` here (``None`` if not computed).
    ``w_log`` are the filtered (sum-product) weights; ``v_log`` their
    max-product counterpart, used to pick states on the way back.
    """

    t: float
    obs: tuple[float, float]
    states: list[RoadState]
    distance: np.ndarray
    emission: np.ndarray
    u_log: np.ndarray = None
    w_log: np.ndarray = None
    trans_log: np.ndarray | None = field(default=None, repr=False)
    v_log: np.ndarray = None
    uv_log: np.ndarray = None

    def __post_init__(self):
        n = len(self.states)
        for name in ("u_log", "w_log", "v_log", "uv_log"):
            if getattr(self, name) is None:
                setattr(self, name, np.full(n, NEG_INF))

    def __len__(self):
        return len(self.states)

    @property
    def vacuous(self) -> bool:
        return len(self.states) == 0 or not np.isfinite(self.w_log).any()

    @property
    def candidates(self) -> list[Candidate]:
        return [Candidate(s, float(d), float(e), float(u), float(w)) for s, d, e, u, w in
                zip(self.states, self.distance, self.emission, self.u_log, self.w_log)]


def emission_logp(distance, sigma_z: float):
    """log N(distance; 0, sigma_z^2)."""
    d = np.asarray(distance, dtype=float)
    return -math.log(sigma_z * math.sqrt(2.0 * math.pi)) - 0.5 * (d / sigma_z) ** 2


def make_candidates(t: float, y, net: RoadNetwork, p: HmmParams, radius: float | None = None) -> Stage:
    found = net.g2r_project(y, p.search_radius if radius is None else radius, p.max_candidates)
    states = [s for s, _ in found]
    dist = np.array([d for _, d in found], dtype=float)
    return Stage(t, (float(y[0]), float(y[1])), states, dist, emission_logp(dist, p.sigma_z))


def trans_logdensity_from_route(route, gc_dist: float, beta: float):
    """Exponential route/great-circle discrepancy density; unreachable -> -inf."""
    r = np.asarray(route, dtype=float)
    with np.errstate(invalid="ignore"):
        out = -math.log(beta) - np.abs(r - gc_dist) / beta
    return np.where(np.isfinite(r), out, NEG_INF)


def trans_logdensity(a: RoadState, b: RoadState, gc_dist: float, net: RoadNetwork, p: HmmParams) -> float:
    route = net.route_distance(a, b, p.cutoff(gc_dist))
    return float(trans_logdensity_from_route(route, gc_dist, p.beta))


def transition_matrix(sources: Sequence[RoadState], targets: Sequence[RoadState], gc_dist: float,
                      net: RoadNetwork, p: HmmParams) -> np.ndarray:
    routes = net.route_matrix(sources, targets, p.cutoff(gc_dist))
    return trans_logdensity_from_route(routes, gc_dist, p.beta)


def gc_distance(a, b) -> float:
    return math.hypot(b[0] - a[0], b[1] - a[1])


def init_weights(stage: Stage) -> None:
    """First stage (or restart): weights proportional to emission."""
    stage.u_log = stage.emission.copy()
    stage.uv_log = stage.emission.copy()
    stage.w_log = normalize(stage.emission)
    stage.v_log = stage.w_log.copy()


def normalize(logw: np.ndarray) -> np.ndarray:
    if len(logw) == 0:
        return logw.copy()
    z = logsumexp(logw)
    if not np.isfinite(z):
        return np.full(len(logw), NEG_INF)
    return logw - z


def forward_step(prev: Stage, cur: Stage, net: RoadNetwork, p: HmmParams,
                 gc_dist: float | None = None) -> float:
    """Fill ``cur.u_log``, ``cur.uv_log`` and ``cur.trans_log``; return log I_rr.

    u_i = e_i + logsum_j(trans_ji + w_j), and I_rr = logsum_i u_i.  ``uv_log``
    is the same with max in place of sum, over ``prev.v_log``.  Only previous
    candidates with non-zero weight are expanded.
    """
    if gc_dist is None:
        gc_dist = gc_distance(prev.obs, cur.obs)
    n_prev, n_cur = len(prev), len(cur)
    cur.trans_log = np.full((n_prev, n_cur), NEG_INF)
    if n_prev == 0 or n_cur == 0:
        cur.u_log = np.full(n_cur, NEG_INF)
        cur.uv_log = np.full(n_cur, NEG_INF)
        return NEG_INF
    live = np.flatnonzero(np.isfinite(prev.w_log))
    if len(live):
        cur.trans_log[live] = transition_matrix([prev.states[j] for j in live], cur.states,
                                                gc_dist, net, p)
    with np.errstate(invalid="ignore"):
        cur.u_log = cur.emission + logsumexp(cur.trans_log + prev.w_log[:, None], axis=0)
        cur.uv_log = cur.emission + (cur.trans_log + prev.v_log[:, None]).max(axis=0)
    cur.u_log = np.where(np.isnan(cur.u_log), NEG_INF, cur.u_log)
    cur.uv_log = np.where(np.isnan(cur.uv_log), NEG_INF, cur.uv_log)
    return float(logsumexp(cur.u_log)) if np.isfinite(cur.u_log).any() else NEG_INF


def backward_rr_weights(stage: Stage, trans_to_next) -> np.ndarray:
    """w_i * p_rr(x_next | candidate i), in logs."""
    return stage.w_log + np.asarray(trans_to_next, dtype=float)


def argmax_by_edge(values, states: Sequence[RoadState]) -> int | None:
    """Index of the maximum; exact ties go to the smaller edge id."""
    values = np.asarray(values, dtype=float)
    if len(values) == 0 or not np.isfinite(values).any():
        return None
    best = values.max()
    tied = np.flatnonzero(values == best)
    return int(min(tied, key=lambda i: (states[i].edge, states[i].offset)))


def viterbi_match(fixes, net: RoadNetwork, p: HmmParams, expand_radius: bool = True,
                  max_radius: float = 2000.0) -> list[RoadState | None]:
    """Standalone max-product HMM matcher used as the comparison baseline.

    Empty stages are re-queried with a doubling radius so every fix gets a
    road position; if every transition into a stage is unreachable the chain
    is broken and restarted there.
    """
    stages: list[Stage] = []
    for f in fixes:
        st = make_candidates(f.t, (f.x, f.y), net, p)
        r = p.search_radius
        while expand_radius and len(st) == 0 and r < max_radius:
            r *= 2.0
            st = make_candidates(f.t, (f.x, f.y), net, p, radius=r)
        stages.append(st)

    n = len(stages)
    delta: list[np.ndarray] = []
    back: list[np.ndarray | None] = []  # transition matrix into each stage, None at a chain start
    for k, st in enumerate(stages):
        if k == 0 or len(stages[k - 1]) == 0 or len(st) == 0 or not np.isfinite(delta[-1]).any():
            d = st.emission.copy()
            back.append(None)
        else:
            prev = stages[k - 1]
            gc = gc_distance(prev.obs, st.obs)
            live = np.flatnonzero(np.isfinite(delta[-1]))
            T = np.full((len(prev), len(st)), NEG_INF)
            T[live] = transition_matrix([prev.states[j] for j in live], st.states, gc, net, p)
            d = st.emission + (delta[-1][:, None] + T).max(axis=0)
            if not np.isfinite(d).any():
                d = st.emission.copy()
                back.append(None)
            else:
                back.append(T)
        if len(d) and np.isfinite(d).any():
            d = d - d.max()
        delta.append(d)

    out: list[RoadState | None] = [None] * n
    k = n - 1
    while k >= 0:
        st = stages[k]
        if len(st) == 0:
            k -= 1
            continue
        i = argmax_by_edge(delta[k], st.states)
        while True:
            out[k] = st.states[i]
            if back[k] is None or k == 0:
                break
            prev = stages[k - 1]
            i = argmax_by_edge(delta[k - 1] + back[k][:, i], prev.states)
            k -= 1
            st = prev
        k -= 1
    return out


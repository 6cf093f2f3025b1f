"""Synthetic scenarios and brute-force oracles.

Grid networks, random drives over them, noisy GPS sampling and map
corruption give replayable ground truth.  The oracles at the bottom
recompute the matcher's answers by exhaustive enumeration or textbook
recursions; they deliberately avoid the code in ``onroad``, ``kinematics``
and ``simm``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import multivariate_normal

from .formats import Observation
from .roadnet import LocalProjection, RoadNetwork, RoadState


class ScenarioError(ValueError):
    pass


def grid_network(nx: int, ny: int, spacing: float = 100.0, lat0: float = 37.77,
                 lon0: float = -122.42, oneway_fraction: float = 0.0, seed: int = 0) -> RoadNetwork:
    """``nx`` by ``ny`` blocks of two-way streets, centred on (lat0, lon0)."""
    if nx < 1 or ny < 1:
        raise ScenarioError("grid needs at least one block each way")
    rng = np.random.default_rng(seed)
    w, h = nx * spacing, ny * spacing
    nodes = {}
    for j in range(ny + 1):
        for i in range(nx + 1):
            nodes[j * (nx + 1) + i] = (i * spacing - w / 2.0, j * spacing - h / 2.0)
    streets = []
    for j in range(ny + 1):
        for i in range(nx + 1):
            a = j * (nx + 1) + i
            if i < nx:
                streets.append((a, a + 1))
            if j < ny:
                streets.append((a, a + nx + 1))
    records = []
    for sid, (u, v) in enumerate(streets):
        oneway = bool(rng.random() < oneway_fraction)
        if oneway and rng.random() < 0.5:
            u, v = v, u
        records.append({"id": sid, "from": u, "to": v, "oneway": oneway})
    return RoadNetwork.from_streets(nodes, records, LocalProjection(lat0, lon0))


# -- routes ----------------------------------------------------------------------


@dataclass
class TimedPath:
    """A drive along consecutive directed edges at piecewise constant speed.

    ``pieces`` holds ``(t0, t1, edge, offset0, offset1)`` in time order.
    """

    edges: list[int]
    pieces: list[tuple[float, float, int, float, float]]

    @property
    def duration(self) -> float:
        return self.pieces[-1][1] if self.pieces else 0.0

    @property
    def length(self) -> float:
        return sum(p[4] - p[3] for p in self.pieces)

    def state_at(self, t: float) -> RoadState:
        if not self.pieces:
            raise ScenarioError("empty path")
        piece = next((p for p in self.pieces if t <= p[1]), self.pieces[-1])
        t0, t1, e, o0, o1 = piece
        f = 0.0 if t1 == t0 else min(max((t - t0) / (t1 - t0), 0.0), 1.0)
        return RoadState(e, o0 + f * (o1 - o0))


def _next_edge(net: RoadNetwork, e: int, rng, forward: bool = True) -> int | None:
    edge = net.edges[e]
    pool = net.out_edges[edge.target] if forward else net.in_edges[edge.source]
    options = [c for c in pool if net.edges[c].street != edge.street] or list(pool)
    if not options:
        return None
    return int(options[rng.integers(len(options))])


MAX_ROUTE_ATTEMPTS = 100


def _walk(net: RoadNetwork, length: float, rng, via: int | None):
    """Edges of one random walk and the start offset; ``(None, 0)`` at a dead end."""
    ids = sorted(net.edges)
    first = via if via is not None else int(ids[rng.integers(len(ids))])
    before: list[int] = []
    start_offset = 0.0
    if via is not None:
        need = rng.uniform(0.3, 0.7) * max(length - net.edges[via].length, 0.0)
        got, e = 0.0, via
        while got < need:
            e = _next_edge(net, e, rng, forward=False)
            if e is None:
                return None, 0.0
            before.append(e)
            got += net.edges[e].length
        before.reverse()
        start_offset = got - need

    edges = before + [first]
    total = sum(net.edges[e].length for e in edges) - start_offset
    e = first
    while total < length:
        e = _next_edge(net, e, rng)
        if e is None:
            return None, 0.0
        edges.append(e)
        total += net.edges[e].length
    return edges, start_offset


def generate_route(net: RoadNetwork, length: float, seed: int = 0, speed: float = 10.0,
                   speed_jitter: float = 3.0, via: int | None = None) -> TimedPath:
    """Random direction-respecting drive of ``length`` meters.

    With ``via`` the drive passes through that whole edge, with a random share
    of the remaining length before it.  Each edge gets its own speed drawn
    uniformly from ``speed +- speed_jitter``.
    """
    if not net.edges:
        raise ScenarioError("network too small: no edges")
    if length <= 0:
        raise ScenarioError("route length must be positive")
    rng = np.random.default_rng(seed)
    if via is not None and via not in net.edges:
        raise ScenarioError(f"unknown edge {via}")
    for _ in range(MAX_ROUTE_ATTEMPTS):
        edges, start_offset = _walk(net, length, rng, via)
        if edges is not None:
            break
    else:
        raise ScenarioError("network too small: every attempted walk ran into a dead end")

    pieces, t, travelled = [], 0.0, 0.0
    for k, e in enumerate(edges):
        o0 = start_offset if k == 0 else 0.0
        o1 = min(net.edges[e].length, o0 + (length - travelled))
        v = rng.uniform(speed - speed_jitter, speed + speed_jitter) if speed_jitter else speed
        dt = (o1 - o0) / v
        pieces.append((t, t + dt, e, o0, o1))
        t += dt
        travelled += o1 - o0
        if travelled >= length - 1e-9:
            edges = edges[:k + 1]
            break
    return TimedPath(edges, pieces)


def observe(path: TimedPath, net: RoadNetwork, interval: float = 3.0, sigma: float = 5.0,
            seed: int = 0, t0: float = 0.0, accuracy: float | None = None) -> list[Observation]:
    """Sample the drive every ``interval`` seconds with isotropic Gaussian noise."""
    if interval <= 0:
        raise ScenarioError("interval must be positive")
    rng = np.random.default_rng(seed)
    times = sample_times(path, interval)
    out = []
    for t in times:
        p = net.point_at(path.state_at(t))
        nx_, ny_ = rng.normal(0.0, sigma, 2) if sigma > 0 else (0.0, 0.0)
        lat, lon = net.projection.to_latlon(p.x + nx_, p.y + ny_)
        out.append(Observation(t0 + float(t), lat, lon, accuracy))
    return out


def sample_times(path: TimedPath, interval: float) -> np.ndarray:
    n = int(math.floor(path.duration / interval + 1e-9)) + 1
    return np.arange(n) * interval


def truth_points(path: TimedPath, net: RoadNetwork, times: Iterable[float]) -> np.ndarray:
    return np.array([net.point_at(path.state_at(t)) for t in times]).reshape(-1, 2)


# -- map corruption ---------------------------------------------------------------


def _edit(e) -> tuple[str, int]:
    if isinstance(e, dict):
        (op, sid), = e.items()
    else:
        op, sid = e
    if op not in ("delete", "flip"):
        raise ScenarioError(f"unknown edit {op!r}")
    return op, int(sid)


def corrupt(net: RoadNetwork, edits: Sequence) -> RoadNetwork:
    """Copy of ``net`` with whole streets deleted or one-way streets reversed.

    Edits are ``("delete", street_id)`` / ``("flip", street_id)`` pairs or
    ``{"delete": street_id}`` dicts.
    """
    streets = {s["id"]: s for s in net.streets()}
    for raw in edits:
        op, sid = _edit(raw)
        if sid not in streets:
            raise ScenarioError(f"unknown street id {sid}")
        if op == "delete":
            del streets[sid]
        else:
            s = streets[sid]
            if not s["oneway"]:
                raise ScenarioError(f"street {sid} is two-way; only one-way streets can be flipped")
            streets[sid] = {"id": sid, "from": s["to"], "to": s["from"], "oneway": True,
                            "coords": s["coords"][::-1]}
    return RoadNetwork.from_streets(dict(net.nodes), streets.values(), net.projection, net.cell_size)


# -- scenarios ---------------------------------------------------------------------


@dataclass
class Scenario:
    network: RoadNetwork
    path: TimedPath
    corrupted: RoadNetwork
    observations: list[Observation]
    seed: int
    deleted_street: int | None = None
    truth: np.ndarray = field(default=None, repr=False)

    @property
    def deleted_edge(self) -> int | None:
        if self.deleted_street is None:
            return None
        return next(e for e in self.path.edges if self.network.edges[e].street == self.deleted_street)


def _interior_streets(net: RoadNetwork) -> list[int]:
    xs = [p.x for p in net.nodes.values()]
    ys = [p.y for p in net.nodes.values()]
    lo_x, hi_x, lo_y, hi_y = min(xs), max(xs), min(ys), max(ys)

    def inner(n):
        p = net.nodes[n]
        return lo_x < p.x < hi_x and lo_y < p.y < hi_y

    return sorted({e.street for e in net.edges.values() if inner(e.source) and inner(e.target)})


def gap_scenario(seed: int, blocks: int = 6, length: float = 700.0, sigma: float = 5.0,
                 interval: float = 3.0, net: RoadNetwork | None = None,
                 street: int | None = None) -> Scenario:
    """Drive through one interior street that is then deleted from the map."""
    rng = np.random.default_rng(seed)
    net = net or grid_network(blocks, blocks)
    if street is None:
        inner = _interior_streets(net)
        if not inner:
            raise ScenarioError("network too small: no interior street")
        street = inner[rng.integers(len(inner))]
    directed = sorted(e.id for e in net.edges.values() if e.street == street)
    via = directed[rng.integers(len(directed))]
    path = generate_route(net, length, seed=int(rng.integers(2 ** 31)), via=via)
    obs = observe(path, net, interval, sigma, seed=int(rng.integers(2 ** 31)))
    truth = truth_points(path, net, [o.t for o in obs])
    return Scenario(net, path, corrupt(net, [("delete", street)]), obs, seed, street, truth)


def clean_scenario(seed: int, blocks: int = 6, length: float = 300.0, sigma: float = 5.0,
                   interval: float = 3.0, net: RoadNetwork | None = None) -> Scenario:
    rng = np.random.default_rng(seed)
    net = net or grid_network(blocks, blocks)
    path = generate_route(net, length, seed=int(rng.integers(2 ** 31)))
    obs = observe(path, net, interval, sigma, seed=int(rng.integers(2 ** 31)))
    truth = truth_points(path, net, [o.t for o in obs])
    return Scenario(net, path, net, obs, seed, None, truth)


# -- oracles -----------------------------------------------------------------------

MAX_ORACLE_PATHS = 4 ** 10
MAX_ORACLE_MODE_STAGES = 8


def _xy(f):
    return float(f.x), float(f.y)


def oracle_viterbi(fixes, net: RoadNetwork, hmm) -> tuple[list[RoadState], float]:
    """Best candidate path by scoring every path in the lattice at once.

    Exact score ties go to the path whose edge ids, read from the last stage
    backwards, are smallest.
    """
    cands = [net.g2r_project(_xy(f), hmm.search_radius, hmm.max_candidates) for f in fixes]
    sizes = [len(c) for c in cands]
    assert all(sizes), "oracle needs a candidate at every stage"
    assert math.prod(sizes) <= MAX_ORACLE_PATHS, "lattice too large to enumerate"
    log_norm = math.log(hmm.sigma_z) + 0.5 * math.log(2.0 * math.pi)

    def emis(c):
        return np.array([-log_norm - d * d / (2.0 * hmm.sigma_z ** 2) for _, d in c])

    total = emis(cands[0])
    for k in range(1, len(fixes)):
        gc = math.dist(_xy(fixes[k - 1]), _xy(fixes[k]))
        cutoff = hmm.route_cutoff + hmm.cutoff_factor * gc
        tr = np.empty((sizes[k - 1], sizes[k]))
        for j, (a, _) in enumerate(cands[k - 1]):
            for i, (b, _) in enumerate(cands[k]):
                r = net.route_distance(a, b, cutoff)
                tr[j, i] = -math.log(hmm.beta) - abs(r - gc) / hmm.beta if math.isfinite(r) else -math.inf
        total = total[..., :, None] + tr + emis(cands[k])
    best = total.max()
    if not np.isfinite(best):
        raise ScenarioError("no connected path through the lattice")
    ties = np.argwhere(total == best)

    def key(idx):
        return tuple(cands[k][i][0].edge for k, i in reversed(list(enumerate(idx))))

    idx = min((tuple(int(v) for v in row) for row in ties), key=key)
    return [cands[k][i][0] for k, i in enumerate(idx)], float(best)


def _cv_matrices(q: float, dt: float):
    F = np.array([[1, 0, dt, 0], [0, 1, 0, dt], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=float)
    # Integrated white-noise acceleration, written out term by term.
    Q = q * np.array([[dt ** 3 / 3, 0, dt ** 2 / 2, 0],
                      [0, dt ** 3 / 3, 0, dt ** 2 / 2],
                      [dt ** 2 / 2, 0, dt, 0],
                      [0, dt ** 2 / 2, 0, dt]])
    return F, Q


def oracle_kalman(fixes, q: float, default_accuracy: float, speed_sigma: float = 15.0):
    """Textbook Kalman filter; returns (filtered means, filtered covs)."""
    Hm = np.hstack([np.eye(2), np.zeros((2, 2))])
    means, covs = [], []
    x = P = None
    for k, f in enumerate(fixes):
        a = default_accuracy if f.accuracy is None else f.accuracy
        Rm = np.eye(2) * a ** 2
        z = np.array(_xy(f))
        if k == 0:
            x = np.array([z[0], z[1], 0.0, 0.0])
            P = np.diag([a ** 2, a ** 2, speed_sigma ** 2, speed_sigma ** 2])
        else:
            F, Q = _cv_matrices(q, f.t - fixes[k - 1].t)
            x = F @ x
            P = F @ P @ F.T + Q
            S = Hm @ P @ Hm.T + Rm
            K = P @ Hm.T @ np.linalg.inv(S)
            x = x + K @ (z - Hm @ x)
            P = (np.eye(4) - K @ Hm) @ P
        means.append(x.copy())
        covs.append(P.copy())
    return np.array(means), np.array(covs)


def oracle_rts(fixes, motion, obs) -> np.ndarray:
    """Rauch-Tung-Striebel smoothed means for a constant-velocity model."""
    xs, Ps = oracle_kalman(fixes, motion.q, obs.default_accuracy)
    xs = xs.copy()
    for k in range(len(fixes) - 2, -1, -1):
        F, Q = _cv_matrices(motion.q, fixes[k + 1].t - fixes[k].t)
        P_pred = F @ Ps[k] @ F.T + Q
        C = Ps[k] @ F.T @ np.linalg.inv(P_pred)
        xs[k] = xs[k] + C @ (xs[k + 1] - F @ xs[k])
    return xs


def _r2g(net: RoadNetwork, s: RoadState, speed: float) -> np.ndarray:
    e = net.edges[s.edge]
    k = len(e.coords) - 1
    i = 0
    while i < k - 1 and e.cum[i + 1] <= s.offset:
        i += 1
    a, b = e.coords[i], e.coords[i + 1]
    seg = b - a
    u = seg / np.linalg.norm(seg)
    f = (s.offset - e.cum[i]) / np.linalg.norm(seg)
    p = a + min(max(f, 0.0), 1.0) * seg
    return np.array([p[0], p[1], u[0] * speed, u[1] * speed])


def mode_sequence_score(history, modes: str, net: RoadNetwork, params) -> tuple[float, list]:
    """Cascade score of a fixed mode sequence under the backward-pass rules.

    States are chosen stage by stage as the backward pass does, but
    with every mode dictated by ``modes``.  Returns ``(score, states)``.
    """
    pi = params.transition
    hmm, q = params.hmm, params.motion.q

    def lmu(rec, m):
        return rec.belief.log_r if m == "r" else rec.belief.log_g

    def lpi(a, b):
        v = getattr(pi, a + b)
        return math.log(v) if v > 0 else -math.inf

    def speed(rec):
        return float(np.hypot(rec.gauss.mean[2], rec.gauss.mean[3]))

    def best_index(vals, states):
        vals = np.asarray(vals)
        if not np.isfinite(vals).any():
            return None
        top = vals.max()
        return min(np.flatnonzero(vals == top), key=lambda i: (states[i].edge, states[i].offset))

    n = len(history)
    last = history[-1]
    states: list = [None] * n
    if modes[-1] == "r":
        if not np.isfinite(last.stage.w_log).any():
            return -math.inf, states
        states[-1] = last.stage.states[best_index(last.stage.v_log, last.stage.states)]
    else:
        states[-1] = last.gauss.mean.copy()
    score = lmu(last, modes[-1])

    for t in range(n - 2, -1, -1):
        rec, nxt = history[t], history[t + 1]
        m, mn = modes[t], modes[t + 1]
        dt = nxt.t - rec.t
        F, Q = _cv_matrices(q, dt)
        x_next = _r2g(net, states[t + 1], speed(nxt)) if mn == "r" else states[t + 1]
        if m == "g":
            mean, cov = rec.gauss.mean, rec.gauss.cov
            P_pred = F @ cov @ F.T + Q
            j = multivariate_normal.logpdf(x_next, F @ mean, P_pred)
            C = cov @ F.T @ np.linalg.inv(P_pred)
            states[t] = mean + C @ (x_next - F @ mean)
        else:
            st = rec.stage
            if not np.isfinite(st.w_log).any():
                return -math.inf, states
            if mn == "r":
                gc = math.dist(rec.stage.obs, nxt.stage.obs)
                cutoff = hmm.route_cutoff + hmm.cutoff_factor * gc
                terms = []
                for s in st.states:
                    r = net.route_distance(s, states[t + 1], cutoff)
                    terms.append(-math.log(hmm.beta) - abs(r - gc) / hmm.beta
                                 if math.isfinite(r) else -math.inf)
            else:
                terms = [multivariate_normal.logpdf(x_next, F @ _r2g(net, s, speed(rec)), Q)
                         for s in st.states]
            w = st.w_log + np.array(terms)
            finite = w[np.isfinite(w)]
            if not len(finite):
                return -math.inf, states
            j = float(np.log(np.exp(finite - finite.max()).sum()) + finite.max())
            # States come from the max-product weights, the score from the sums.
            states[t] = st.states[best_index(st.v_log + np.array(terms), st.states)]
        score += lmu(rec, m) + lpi(m, mn) + j
    return float(score), states


def oracle_enumerate_modes(history, net: RoadNetwork, params) -> tuple[str, float]:
    """Best of all 2^T mode sequences under :func:`mode_sequence_score`."""
    assert len(history) <= MAX_ORACLE_MODE_STAGES, "too many stages to enumerate"
    best, best_score = None, -math.inf
    for combo in itertools.product("rg", repeat=len(history)):
        modes = "".join(combo)
        s, _ = mode_sequence_score(history, modes, net, params)
        if s > best_score:
            best, best_score = modes, s
    return best, best_score

"""Semi-interacting multiple model (sIMM) on/off-road tracker.

Two trackers run side by side: the HMM of :mod:`simmatch.onroad` for motion
on the road network and the Kalman filter of :mod:`simmatch.kinematics` for
free-space motion.  The off-road filter never looks at the road tracker, but
its posterior may seed on-road candidates (off-road to on-road transitions),
which is what lets a trace leave the map and come back.

The forward pass keeps, per observation, the mode weights, the adjusted HMM
weights and the Kalman posterior.  The backward pass walks from the last
stage to the first, picking the mode and then the state that maximise the
backward conditional at each stage.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from . import kinematics as km
from .kinematics import GaussState, MotionModel, ObsModel
from .onroad import (NEG_INF, HmmParams, Stage, argmax_by_edge, forward_step, gc_distance,
                     init_weights, make_candidates, normalize, transition_matrix)
from .roadnet import RoadNetwork, RoadState

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    ROAD = "r"
    OFFROAD = "g"


R, G = Mode.ROAD, Mode.OFFROAD


def _log(p: float) -> float:
    return math.log(p) if p > 0 else NEG_INF


def _lse(*xs) -> float:
    # plain floats: numpy call overhead dominates for a handful of terms
    m = max(xs)
    if not m > NEG_INF:
        return NEG_INF
    return float(m + math.log(math.fsum(math.exp(x - m) for x in xs)))


@dataclass(frozen=True)
class ModeTransitionMatrix:
    rr: float = 0.99
    rg: float = 0.01
    gr: float = 0.05
    gg: float = 0.95

    def __post_init__(self):
        for v in (self.rr, self.rg, self.gr, self.gg):
            if not 0.0 <= v <= 1.0:
                raise ValueError("mode transition probabilities must lie in [0, 1]")
        if abs(self.rr + self.rg - 1.0) > 1e-12 or abs(self.gr + self.gg - 1.0) > 1e-12:
            raise ValueError("mode transition rows must sum to 1")

    @classmethod
    def from_stay(cls, rr: float, gg: float) -> ModeTransitionMatrix:
        return cls(rr, 1.0 - rr, 1.0 - gg, gg)

    def log(self, a: Mode, b: Mode) -> float:
        return _log(getattr(self, a.value + b.value))


R2G_VELOCITY = ("tangent", "filter")


@dataclass(frozen=True)
class SimmParams:
    hmm: HmmParams = field(default_factory=HmmParams)
    motion: MotionModel = field(default_factory=MotionModel)
    obs: ObsModel = field(default_factory=ObsModel)
    transition: ModeTransitionMatrix = field(default_factory=ModeTransitionMatrix)
    mu0_road: float = 0.9
    r2g_velocity: str = "tangent"

    def __post_init__(self):
        if not 0.0 <= self.mu0_road <= 1.0:
            raise ValueError("mu0_road must lie in [0, 1]")
        if self.r2g_velocity not in R2G_VELOCITY:
            raise ValueError(f"r2g_velocity must be one of {R2G_VELOCITY}")


class Fix(NamedTuple):
    """An observation in the planar frame."""

    t: float
    x: float
    y: float
    accuracy: float | None = None


def to_fixes(observations, projection) -> list[Fix]:
    """Project lat/lon observations (anything with t, lat, lon, accuracy)."""
    out = []
    for o in observations:
        x, y = projection.to_planar(o.lat, o.lon)
        out.append(Fix(float(o.t), x, y, getattr(o, "accuracy", None)))
    return out


class ModeBelief(NamedTuple):
    log_r: float
    log_g: float

    @property
    def mu_r(self) -> float:
        return math.exp(self.log_r)

    @property
    def mu_g(self) -> float:
        return math.exp(self.log_g)

    def log(self, m: Mode) -> float:
        return self.log_r if m is R else self.log_g

    @classmethod
    def from_prob(cls, mu_r: float) -> ModeBelief:
        return cls(_log(mu_r), _log(1.0 - mu_r))


def mode_update(prev: ModeBelief, pi: ModeTransitionMatrix, log_i: dict[str, float]
                ) -> tuple[ModeBelief | None, float, float]:
    """Combine mode weights with the four stage likelihoods.

    ``log_i`` is keyed ``rr, rg, gr, gg`` (previous mode, current mode).
    Returns the normalised belief (``None`` when both modes have zero mass)
    and the unnormalised log masses for road and off-road.
    """
    m_r = _lse(prev.log_r + pi.log(R, R) + log_i["rr"], prev.log_g + pi.log(G, R) + log_i["gr"])
    m_g = _lse(prev.log_r + pi.log(R, G) + log_i["rg"], prev.log_g + pi.log(G, G) + log_i["gg"])
    z = _lse(m_r, m_g)
    if not math.isfinite(z):
        return None, m_r, m_g
    lr, lg = m_r - z, m_g - z
    # Renormalise the smaller one against the larger so the pair sums to 1.
    if lr >= lg:
        lr = math.log1p(-math.exp(lg)) if math.isfinite(lg) else 0.0
    else:
        lg = math.log1p(-math.exp(lr)) if math.isfinite(lr) else 0.0
    return ModeBelief(lr, lg), m_r, m_g


@dataclass
class StageRecord:
    fix: Fix
    stage: Stage
    gauss: GaussState
    belief: ModeBelief
    log_i: dict[str, float] = field(default_factory=dict)
    g2r_state: RoadState | None = None
    gr_log: np.ndarray | None = field(default=None, repr=False)
    restart: bool = False

    @property
    def t(self) -> float:
        return self.fix.t

    @property
    def speed(self) -> float:
        return float(math.hypot(self.gauss.mean[2], self.gauss.mean[3]))


def embed(net: RoadNetwork, s: RoadState, rec: StageRecord, params: SimmParams) -> np.ndarray:
    """Off-road state for road state ``s`` at stage ``rec``.

    Position is the road point.  Velocity is the off-road filter's speed
    along the edge tangent (``"tangent"``) or its full velocity (``"filter"``).
    """
    if params.r2g_velocity == "filter":
        p = net.point_at(s)
        return np.array([p.x, p.y, rec.gauss.mean[2], rec.gauss.mean[3]])
    return net.r2g_embed(s, rec.speed)


class FilterHistory(list):
    """List of :class:`StageRecord`, one per observation."""

    @property
    def mu_r(self) -> np.ndarray:
        return np.array([r.belief.mu_r for r in self])


def _check_fixes(fixes: Sequence[Fix]):
    if not fixes:
        raise ValueError("empty trace")
    for a, b in zip(fixes, fixes[1:]):
        if not b.t > a.t:
            raise ValueError(f"timestamps must be strictly increasing (t={a.t} then t={b.t})")


def i_gr_likelihood(prev_gauss: GaussState, stage: Stage, gc: float, net: RoadNetwork,
                    hmm: HmmParams) -> tuple[float, np.ndarray, RoadState | None]:
    """Off-road to on-road likelihood from the previous off-road mean.

    The mean is projected to its nearest road point, which stands in for the
    whole off-road posterior.  Returns ``(log I_gr, per-candidate terms,
    projected state)``; the terms are emission plus transition from that point.
    """
    terms = np.full(len(stage), NEG_INF)
    if not len(stage):
        return NEG_INF, terms, None
    g2r_state = net.g2r_nearest(prev_gauss.mean[:2], hmm.search_radius)
    if g2r_state is None:
        return NEG_INF, terms, None
    terms = stage.emission + transition_matrix([g2r_state], stage.states, gc, net, hmm)[0]
    return _lse(*terms), terms, g2r_state


def adjust_weights(stage: Stage, prev: ModeBelief, pi: ModeTransitionMatrix, gr_log: np.ndarray) -> None:
    """Candidate weights mixing on-road and off-road ancestry.

    w_i is proportional to mu_r pi_rr u_i + mu_g pi_gr gr_i; the max-product
    weights ``v_log`` use the same mix with max in place of sum.
    """
    from_r = prev.log_r + pi.log(R, R)
    from_g = prev.log_g + pi.log(G, R)
    with np.errstate(invalid="ignore"):
        adjusted = np.logaddexp(from_r + stage.u_log, from_g + gr_log)
        best = np.maximum(from_r + stage.uv_log, from_g + gr_log)
    stage.w_log = normalize(np.where(np.isnan(adjusted), NEG_INF, adjusted))
    stage.v_log = normalize(np.where(np.isnan(best), NEG_INF, best))


def forward_filter(fixes: Sequence[Fix], net: RoadNetwork, params: SimmParams | None = None
                   ) -> FilterHistory:
    params = params or SimmParams()
    fixes = list(fixes)
    _check_fixes(fixes)
    hmm, pi = params.hmm, params.transition
    history = FilterHistory()

    for k, f in enumerate(fixes):
        y = (f.x, f.y)
        acc = params.obs.default_accuracy if f.accuracy is None else f.accuracy
        stage = make_candidates(f.t, y, net, hmm)

        if k == 0:
            gauss = km.initial_state(f.x, f.y, acc)
            init_weights(stage)
            belief = ModeBelief.from_prob(params.mu0_road if len(stage) else 0.0)
            history.append(StageRecord(f, stage, gauss, belief))
            continue

        prev = history[-1]
        dt = f.t - prev.t
        gc = gc_distance(prev.stage.obs, y)
        gauss, l_gg = km.update(km.predict(prev.gauss, dt, params.motion), y, params.obs.R(acc))

        # On-road lattice step; skipped when no on-road ancestor has mass.
        if prev.belief.log_r + pi.log(R, R) > NEG_INF and not prev.stage.vacuous:
            l_rr = forward_step(prev.stage, stage, net, hmm, gc)
        else:
            stage.u_log = np.full(len(stage), NEG_INF)
            stage.uv_log = np.full(len(stage), NEG_INF)
            l_rr = NEG_INF

        if prev.belief.log_g + pi.log(G, R) > NEG_INF:
            l_gr, gr_log, g2r_state = i_gr_likelihood(prev.gauss, stage, gc, net, hmm)
        else:
            l_gr, gr_log, g2r_state = NEG_INF, np.full(len(stage), NEG_INF), None

        log_i = {"rr": l_rr, "rg": l_gg, "gr": l_gr, "gg": l_gg}
        belief, _, _ = mode_update(prev.belief, pi, log_i)

        adjust_weights(stage, prev.belief, pi, gr_log)

        restart = False
        if belief is None:
            # Neither mode can explain the fix (only possible with absorbing
            # mode transitions): break the chain and restart here.
            init_weights(stage)
            belief = prev.belief
            restart = True
            logger.debug("chain restarted at t=%s", f.t)
        history.append(StageRecord(f, stage, gauss, belief, log_i, g2r_state, gr_log, restart))
    return history


# -- backward MAP pass ---------------------------------------------------------


@dataclass
class TrajectoryPoint:
    t: float
    mode: Mode
    road: RoadState | None
    state: np.ndarray | None
    x: float
    y: float
    mu_forward: float
    mu_backward: float


class MapTrajectory(list):
    """List of :class:`TrajectoryPoint`, one per observation."""

    @property
    def modes(self) -> str:
        return "".join(p.mode.value for p in self)

    @property
    def xy(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self]).reshape(-1, 2)


class _Next(NamedTuple):
    mode: Mode
    road: RoadState | None
    vec: np.ndarray  # off-road state, or the road state embedded with r2g


def rr_transitions(history: FilterHistory, t: int, target: RoadState, net: RoadNetwork,
                   params: SimmParams) -> np.ndarray:
    """log p_rr(target | candidate i of stage t), reusing the forward lattice."""
    cur, nxt = history[t].stage, history[t + 1].stage
    T = nxt.trans_log
    # Rows the forward step skipped belong to zero-weight candidates.
    if T is not None and T.shape[0] == len(cur) and target in nxt.states:
        return T[:, nxt.states.index(target)]
    gc = gc_distance(cur.obs, nxt.obs)
    return transition_matrix(cur.states, [target], gc, net, params.hmm)[:, 0]


def rg_transitions(history: FilterHistory, t: int, x_next: np.ndarray, net: RoadNetwork,
                   params: SimmParams) -> np.ndarray:
    """log p_gg(x_next | r2g(candidate i of stage t)) for every candidate."""
    rec = history[t]
    dt = history[t + 1].t - rec.t
    F, Q = params.motion.F(dt), params.motion.Q(dt)
    out = np.full(len(rec.stage), NEG_INF)
    for i, s in enumerate(rec.stage.states):
        if np.isfinite(rec.stage.w_log[i]):
            out[i] = km.gauss_logpdf(x_next, F @ embed(net, s, rec, params), Q)
    return out


def j_integral(m_t: Mode, history: FilterHistory, t: int, nxt: _Next, net: RoadNetwork,
               params: SimmParams) -> tuple[float, np.ndarray | None]:
    """log J for the transition ``m_t -> nxt.mode`` between stages t and t+1.

    For a road ``m_t`` the per-candidate selection scores are returned too:
    the same terms against the max-product weights, so that the chosen road
    states form a best path rather than a sequence of marginal maxima.
    """
    rec = history[t]
    dt = history[t + 1].t - rec.t
    if m_t is G:
        return km.transition_logdensity(nxt.vec, rec.gauss, dt, params.motion), None
    if rec.stage.vacuous:
        return NEG_INF, None
    if nxt.mode is R:
        terms = rr_transitions(history, t, nxt.road, net, params)
    else:
        terms = rg_transitions(history, t, nxt.vec, net, params)
    with np.errstate(invalid="ignore"):
        weights = rec.stage.w_log + terms
        pick = rec.stage.v_log + terms
    weights = np.where(np.isnan(weights), NEG_INF, weights)
    return _lse(*weights), np.where(np.isnan(pick), NEG_INF, pick)


def sample_state(m_t: Mode, history: FilterHistory, t: int, nxt: _Next, params: SimmParams,
                 weights: np.ndarray | None = None):
    """MAP state at stage t given the mode and the already chosen successor."""
    rec = history[t]
    if m_t is R:
        i = argmax_by_edge(weights, rec.stage.states)
        return rec.stage.states[i]
    dt = history[t + 1].t - rec.t
    mean, _ = km.backward_step(rec.gauss, nxt.vec, dt, params.motion)
    return mean


def _terminal(rec: StageRecord) -> tuple[Mode, RoadState | np.ndarray]:
    if rec.belief.log_r >= rec.belief.log_g and not rec.stage.vacuous:
        i = argmax_by_edge(rec.stage.v_log, rec.stage.states)
        return R, rec.stage.states[i]
    return G, rec.gauss.mean.copy()


def _point(rec: StageRecord, mode: Mode, x, net: RoadNetwork, mu_b: float) -> TrajectoryPoint:
    if mode is R:
        p = net.point_at(x)
        return TrajectoryPoint(rec.t, R, x, None, p.x, p.y, rec.belief.mu_r, mu_b)
    x = np.asarray(x, dtype=float)
    return TrajectoryPoint(rec.t, G, None, x, float(x[0]), float(x[1]), rec.belief.mu_r, mu_b)


def _as_next(rec: StageRecord, mode: Mode, x, net: RoadNetwork, params: SimmParams) -> _Next:
    if mode is R:
        return _Next(R, x, embed(net, x, rec, params))
    return _Next(G, None, np.asarray(x, dtype=float))


def backward_map(history: FilterHistory, net: RoadNetwork, params: SimmParams | None = None
                 ) -> MapTrajectory:
    params = params or SimmParams()
    pi = params.transition
    n = len(history)
    points: list[TrajectoryPoint] = [None] * n

    mode, x = _terminal(history[-1])
    points[-1] = _point(history[-1], mode, x, net, history[-1].belief.mu_r)
    nxt = _as_next(history[-1], mode, x, net, params)

    for t in range(n - 2, -1, -1):
        rec = history[t]
        j_r, w_r = j_integral(R, history, t, nxt, net, params)
        j_g, _ = j_integral(G, history, t, nxt, net, params)
        score_r = rec.belief.log_r + pi.log(R, nxt.mode) + j_r
        score_g = rec.belief.log_g + pi.log(G, nxt.mode) + j_g
        if score_r == NEG_INF and score_g == NEG_INF:
            # Successor unreachable from either mode: treat t as a chain end.
            mode, x = _terminal(rec)
            mu_b = rec.belief.mu_r
        else:
            mode = R if score_r >= score_g else G
            mu_b = math.exp(score_r - _lse(score_r, score_g))
            x = sample_state(mode, history, t, nxt, params, w_r)
        points[t] = _point(rec, mode, x, net, mu_b)
        nxt = _as_next(rec, mode, x, net, params)
    return MapTrajectory(points)


def match(trace, net: RoadNetwork, params: SimmParams | None = None) -> MapTrajectory:
    """Forward filter then backward MAP pass.

    ``trace`` holds either :class:`Fix` items or lat/lon observations.
    """
    trace = list(trace)
    fixes = trace if trace and isinstance(trace[0], Fix) else to_fixes(trace, net.projection)
    history = forward_filter(fixes, net, params)
    return backward_map(history, net, params)

"""Constant-velocity Kalman filter used as the off-road (free space) tracker.

State is ``[x, y, vx, vy]`` in the planar frame; observations are positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

H = np.array([[1.0, 0.0, 0.0, 0.0],
              [0.0, 1.0, 0.0, 0.0]])


class GaussState(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class MotionModel:
    """White-noise acceleration model with intensity ``q`` (m^2/s^3)."""

    q: float = 2.0

    def __post_init__(self):
        if not self.q >= 0:
            raise ValueError("process noise intensity must be non-negative")

    def F(self, dt: float) -> np.ndarray:
        F = np.eye(4)
        F[0, 2] = F[1, 3] = dt
        return F

    def Q(self, dt: float) -> np.ndarray:
        a, b, c = dt ** 3 / 3.0, dt ** 2 / 2.0, dt
        return self.q * np.array([[a, 0, b, 0],
                                  [0, a, 0, b],
                                  [b, 0, c, 0],
                                  [0, b, 0, c]])


@dataclass(frozen=True)
class ObsModel:
    """Isotropic position noise; ``default_accuracy`` is the 1-sigma in meters."""

    default_accuracy: float = 10.0

    def __post_init__(self):
        if not self.default_accuracy > 0:
            raise ValueError("default accuracy must be positive")

    H = H

    def R(self, accuracy: float | None = None) -> np.ndarray:
        a = self.default_accuracy if accuracy is None else accuracy
        if not a > 0:
            raise ValueError("accuracy must be positive")
        return np.eye(2) * a * a


def initial_state(x: float, y: float, accuracy: float, speed_sigma: float = 15.0) -> GaussState:
    return GaussState(np.array([x, y, 0.0, 0.0]),
                      np.diag([accuracy ** 2, accuracy ** 2, speed_sigma ** 2, speed_sigma ** 2]))


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def gauss_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Multivariate normal log density via Cholesky."""
    r = np.asarray(x, dtype=float) - mean
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, r)
    return float(-0.5 * (len(r) * LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


def predict(s: GaussState, dt: float, m: MotionModel) -> GaussState:
    if dt < 0:
        raise ValueError(f"negative time step {dt}")
    F = m.F(dt)
    return GaussState(F @ s.mean, _sym(F @ s.cov @ F.T + m.Q(dt)))


def update(s: GaussState, y, R: np.ndarray) -> tuple[GaussState, float]:
    """Kalman update against a position fix.

    Returns the posterior and the log of the predictive observation density
    N(y; H mean, H cov H^T + R).
    """
    y = np.asarray(y, dtype=float)
    S = _sym(H @ s.cov @ H.T + R)
    innov = y - H @ s.mean
    try:
        loglik = gauss_logpdf(y, H @ s.mean, S)
    except np.linalg.LinAlgError as exc:
        raise FloatingPointError("singular innovation covariance") from exc
    K = np.linalg.solve(S, H @ s.cov).T
    IKH = np.eye(4) - K @ H
    # Joseph form keeps the covariance symmetric positive semi-definite.
    P = IKH @ s.cov @ IKH.T + K @ R @ K.T
    return GaussState(s.mean + K @ innov, _sym(P)), loglik


def transition_logdensity(x_next, s: GaussState, dt: float, m: MotionModel) -> float:
    """log N(x_next; F mean, Q + F cov F^T): the filtered state pushed one step."""
    if dt < 0:
        raise ValueError(f"negative time step {dt}")
    F = m.F(dt)
    return gauss_logpdf(x_next, F @ s.mean, _sym(m.Q(dt) + F @ s.cov @ F.T))


def point_transition_logdensity(x_next, x: np.ndarray, dt: float, m: MotionModel) -> float:
    """log N(x_next; F x, Q) for a known previous state."""
    return gauss_logpdf(x_next, m.F(dt) @ x, m.Q(dt))


def backward_step(filtered: GaussState, x_next, dt: float, m: MotionModel
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Mode and covariance of p(x_t | x_{t+1} = x_next, y_{1:t}).

    Information form: cov* = (P^-1 + F^T Q^-1 F)^-1 and
    mean* = cov* (P^-1 mean + F^T Q^-1 x_next).
    """
    if not (m.q > 0 and dt > 0):
        raise ValueError("backward step needs an invertible process noise (q > 0, dt > 0)")
    F = m.F(dt)
    Q = m.Q(dt)
    P_inv = np.linalg.inv(filtered.cov)
    FtQi = np.linalg.solve(Q, F).T
    info = _sym(P_inv + FtQi @ F)
    cov = _sym(np.linalg.inv(info))
    mean = np.linalg.solve(info, P_inv @ filtered.mean + FtQi @ np.asarray(x_next, dtype=float))
    return mean, cov

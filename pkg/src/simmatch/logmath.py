"""Log-space helpers.

``scipy.special.logsumexp`` validates and broadcasts on every call, which
dominates the run time on the handful-of-candidates arrays used here.
"""
from __future__ import annotations

import numpy as np


def logsumexp(a, axis=None):
    """log(sum(exp(a))) along ``axis``; all -inf input gives -inf."""
    a = np.asarray(a, dtype=float)
    if a.size == 0:
        return np.full(np.delete(a.shape, axis) if axis is not None else (), -np.inf)[()]
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)

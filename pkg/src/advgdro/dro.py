"""Group weights on the probability simplex and worst-group risk."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, NumericError, ParameterError

DEFAULT_ETA_Q = 0.01


@dataclass(frozen=True)
class GroupWeights:
    q: np.ndarray
    eta_q: float = DEFAULT_ETA_Q

    @property
    def m(self) -> int:
        return len(self.q)


@dataclass(frozen=True)
class GroupRisks:
    per_group_loss: np.ndarray
    per_group_count: np.ndarray


def init_uniform(m: int, eta_q: float = DEFAULT_ETA_Q) -> GroupWeights:
    if m < 1:
        raise ParameterError(f"need at least one group, got m={m}")
    if not eta_q >= 0:
        raise ParameterError(f"eta_q must be >= 0, got {eta_q}")
    return GroupWeights(np.full(m, 1.0 / m), float(eta_q))


def eg_update(w: GroupWeights, g: int, observed_loss: float, renormalize: bool = True) -> GroupWeights:
    """Exponentiated-gradient step on entry ``g`` followed by renormalization.

    ``renormalize=False`` exists only so tests can demonstrate what breaks
    without it.
    """
    if not 0 <= g < w.m:
        raise ParameterError(f"group index {g} outside [0, {w.m})")
    if not math.isfinite(observed_loss):
        raise NumericError(f"non-finite loss {observed_loss} for group {g}")
    q = w.q.copy()
    q[g] = q[g] * math.exp(w.eta_q * observed_loss)
    if renormalize:
        total = q.sum()
        if not math.isfinite(total) or total <= 0:
            raise NumericError(f"group weights degenerated (sum={total})")
        q = q / total
    return GroupWeights(q, w.eta_q)


def group_risks(per_example_loss, groups, m: int) -> GroupRisks:
    groups = np.asarray(groups)
    counts = np.bincount(groups, minlength=m)
    sums = np.bincount(groups, weights=per_example_loss, minlength=m)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    return GroupRisks(means, counts)


def worst_group_risk(r: GroupRisks):
    """``(argmax group, its mean loss)``; ties go to the lowest index."""
    counts = np.asarray(r.per_group_count)
    empty = np.flatnonzero(counts <= 0)
    if empty.size:
        raise EvaluationError(f"group {int(empty[0])} has no examples")
    losses = np.asarray(r.per_group_loss, dtype=float)
    g = int(np.argmax(losses))
    return g, float(losses[g])

"""L-infinity PGD with Gaussian initialization.

Two step modes: ``batch`` takes the plain sign-gradient step, ``group`` scales
the step by the current weight of the group being attacked.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import model as M
from .errors import DimensionError, ParameterError
from .tensorcore import DTYPE, clamp, make_rng, sample_gaussian, sign

MODES = ("batch", "group")

# 2/255
DEFAULT_EPSILON = 2.0 / 255.0


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = DEFAULT_EPSILON
    eta_delta: float = 0.01
    steps: int = 5
    sigma: float = DEFAULT_EPSILON ** 2
    mode: str = "batch"
    # clamp x + delta into [domain_lo, domain_hi]; off for unbounded features
    clamp_domain: bool = False
    domain_lo: float = 0.0
    domain_hi: float = 1.0
    # extension: scale the group weight by m so uniform q gives unit steps
    normalize_group_weight: bool = False

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ParameterError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.steps > 0 and not self.eta_delta > 0:
            raise ParameterError(f"eta_delta must be > 0 when steps > 0, got {self.eta_delta}")
        if not self.sigma >= 0:
            raise ParameterError(f"sigma must be >= 0, got {self.sigma}")
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {self.mode!r}")

    def as_dict(self):
        return asdict(self)


def project(delta, epsilon):
    return clamp(delta, -epsilon, epsilon)


def init_perturbation(rng, shape, cfg: AttackConfig) -> np.ndarray:
    return project(sample_gaussian(rng, shape, cfg.sigma), cfg.epsilon)


def effective_weight(cfg: AttackConfig, group_weight, m: int = 1):
    """Multiplier applied to the sign step: 1 in batch mode, q_g (or q_g*m) in group mode."""
    if cfg.mode == "batch":
        return 1.0
    w = np.asarray(group_weight, dtype=DTYPE)
    if cfg.normalize_group_weight:
        w = w * m
    return w if w.ndim else float(w)


def pgd_step(params, x, y, delta, cfg: AttackConfig, group_weight=1.0, m: int = 1):
    """One ascent step followed by projection onto the epsilon ball.

    ``group_weight`` is a scalar or one weight per row (mixed-group batches);
    it is ignored in batch mode.
    """
    x = np.asarray(x, dtype=DTYPE)
    if delta.shape != x.shape:
        raise DimensionError(f"perturbation shape {delta.shape} does not match batch {x.shape}")
    _, _, grad_x = M.loss_and_grads(params, x + delta, y)
    w = effective_weight(cfg, group_weight, m)
    if np.ndim(w):
        if np.shape(w) != (x.shape[0],):
            raise DimensionError(f"need one group weight per row, got shape {np.shape(w)}")
        w = w[:, None]
    return project(delta + cfg.eta_delta * (w * sign(grad_x)), cfg.epsilon)


def run_attack(params, x, y, cfg: AttackConfig, group_weight=1.0, rng=None, m: int = 1):
    """Gaussian init then ``cfg.steps`` PGD steps against frozen ``params``.

    Returns ``(x_adv, delta)``. The noise is always drawn from ``rng`` so the
    random stream advances identically whatever epsilon or sigma is. Without
    an ``rng`` the noise comes from a fresh seed-0 stream.
    """
    x = np.asarray(x, dtype=DTYPE)
    rng = rng if rng is not None else make_rng(0)
    delta = init_perturbation(rng, x.shape, cfg)
    if cfg.epsilon > 0:
        for _ in range(cfg.steps):
            delta = pgd_step(params, x, y, delta, cfg, group_weight, m)
    x_adv = x + delta
    if cfg.clamp_domain:
        x_adv = np.clip(x_adv, cfg.domain_lo, cfg.domain_hi)
    return x_adv, delta

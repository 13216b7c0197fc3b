"""ERM, adversarial ERM, group DRO and adversarial group DRO training.

All four methods share one step skeleton. Every step draws, in order, a group
index, the batch row indices, and the Gaussian noise for the perturbation,
even when the method ignores some of them. That fixed consumption order is
what makes the reductions between methods exact:

* ``adv_gdro`` with ``epsilon == 0`` follows the ``gdro`` trajectory bit for bit,
* ``adv_gdro`` with one group follows ``adv_erm``,
* and with both it follows ``erm``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dro
from . import model as M
from .attack import DEFAULT_EPSILON, AttackConfig, run_attack
from .data import Batch, GroupedDataset, sample_batch
from .errors import ConfigError, NumericError
from .evaluation import MetricsReport, evaluate
from .tensorcore import derive_seeds, make_rng, sample_gaussian

log = logging.getLogger(__name__)

METHODS = ("erm", "adv_erm", "gdro", "adv_gdro")
ADVERSARIAL = ("adv_erm", "adv_gdro")
GROUP_DRO = ("gdro", "adv_gdro")
SAMPLING = ("uniform_group", "mixture_batch")


@dataclass
class TrainConfig:
    method: str = "erm"
    eta_theta: float = 0.1
    total_steps: int = 1000
    batch_size: int = 128
    attack: AttackConfig | None = None
    eta_q: float | None = None
    seed: int = 0
    eval_every: int = 100
    sampling: str = "uniform_group"
    hidden: tuple = (16,)
    activation: str = "relu"
    momentum: float = 0.0
    # attack used when scoring validation checkpoints; None -> batch PGD at the training epsilon
    eval_attack: AttackConfig | None = None
    # L2-ball radius for theta; only the convergence harness sets it
    project_radius: float | None = None
    zero_init: bool = False
    keep_iterates: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if (self.attack is not None) != (self.method in ADVERSARIAL):
            raise ConfigError(
                f"method {self.method!r} {'requires' if self.method in ADVERSARIAL else 'does not take'} "
                "an attack configuration"
            )
        if (self.eta_q is not None) != (self.method in GROUP_DRO):
            raise ConfigError(
                f"method {self.method!r} {'requires' if self.method in GROUP_DRO else 'does not take'} eta_q"
            )
        if self.sampling not in SAMPLING:
            raise ConfigError(f"sampling must be one of {SAMPLING}, got {self.sampling!r}")
        if self.total_steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("need total_steps >= 0, batch_size >= 1 and eval_every >= 1")
        if not self.eta_theta >= 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need eta_theta >= 0 and 0 <= momentum < 1")
        if self.eta_q is not None and not self.eta_q >= 0:
            raise ConfigError(f"eta_q must be >= 0, got {self.eta_q}")
        if self.project_radius is not None and not self.project_radius > 0:
            raise ConfigError("project_radius must be positive")
        return self

    def selection_attack(self) -> AttackConfig:
        if self.eval_attack is not None:
            return self.eval_attack
        base = self.attack or AttackConfig()
        return AttackConfig(**{**base.as_dict(), "mode": "batch", "normalize_group_weight": False})

    def as_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass
class RunRecord:
    config: TrainConfig
    initial_params: M.ModelParams
    final_params: M.ModelParams
    avg_params: M.ModelParams
    best_params: M.ModelParams
    best_step: int
    weights: dro.GroupWeights
    step_group: np.ndarray
    step_loss: np.ndarray
    step_q: np.ndarray
    evals: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    stats: dict = field(default_factory=dict)

    @property
    def steps_done(self) -> int:
        return len(self.step_loss)


class SGD:
    """Plain SGD with optional heavy-ball momentum and L2-ball projection."""

    def __init__(self, eta, momentum=0.0, radius=None):
        self.eta = eta
        self.momentum = momentum
        self.radius = radius
        self.velocity = None

    def step(self, params: M.ModelParams, grads: M.ModelParams, scale: float = 1.0) -> M.ModelParams:
        if self.momentum:
            if self.velocity is None:
                self.velocity = grads.zeros_like()
            self.velocity = grads.axpy(self.momentum, self.velocity)
            grads = self.velocity
        new = params.axpy(-(self.eta * scale), grads)
        if self.radius is not None:
            new = project_l2(new, self.radius)
        return new


def project_l2(params: M.ModelParams, radius: float) -> M.ModelParams:
    norm = float(np.linalg.norm(params.flat()))
    if norm <= radius:
        return params
    return params.with_flat(params.flat() * (radius / norm))


def _check_finite(lv, step):
    if not math.isfinite(lv.value):
        raise NumericError(f"non-finite training loss at step {step}")


# ---------------------------------------------------------------------------
# per-step operations


def draw_group(rng, m: int) -> int:
    return int(rng.integers(0, m))


def erm_step(params, batch: Batch, cfg: TrainConfig, opt: SGD | None = None):
    """One SGD step on the mean clean loss. Returns ``(params, LossValue)``."""
    opt = opt or SGD(cfg.eta_theta, cfg.momentum, cfg.project_radius)
    lv, grads, _ = M.loss_and_grads(params, batch.x, batch.y)
    return opt.step(params, grads, 1.0), lv


def adv_erm_step(params, batch: Batch, cfg: TrainConfig, rng, opt: SGD | None = None):
    """Batch-mode PGD (unit weight) on ``batch``, then SGD on the perturbed batch."""
    opt = opt or SGD(cfg.eta_theta, cfg.momentum, cfg.project_radius)
    attack = cfg.attack if cfg.attack.mode == "batch" else AttackConfig(**{**cfg.attack.as_dict(), "mode": "batch"})
    x_adv, _ = run_attack(params, batch.x, batch.y, attack, 1.0, rng)
    lv, grads, _ = M.loss_and_grads(params, x_adv, batch.y)
    return opt.step(params, grads, 1.0), lv


def _dro_update(params, weights, g, x, y, opt, renormalize=True):
    # loss and theta-gradient both at theta^(t-1); q^(t) is formed before the theta step
    lv, grads, _ = M.loss_and_grads(params, x, y)
    _check_finite(lv, 0)
    weights = dro.eg_update(weights, g, lv.value, renormalize)
    return opt.step(params, grads, weights.q[g]), weights, lv


def gdro_step(params, weights: dro.GroupWeights, dataset: GroupedDataset, cfg: TrainConfig, rng,
              opt: SGD | None = None):
    """Group DRO step: choose a group, sample from it, update q on the clean loss, scaled SGD.

    Returns ``(params, weights, g, LossValue)``.
    """
    opt = opt or SGD(cfg.eta_theta, cfg.momentum, cfg.project_radius)
    g = draw_group(rng, weights.m)
    batch = sample_batch(dataset, rng, cfg.batch_size, g)
    sample_gaussian(rng, batch.x.shape, 0.0)
    params, weights, lv = _dro_update(params, weights, g, batch.x, batch.y, opt)
    return params, weights, g, lv


def adv_gdro_step(params, weights: dro.GroupWeights, dataset: GroupedDataset, cfg: TrainConfig, rng,
                  opt: SGD | None = None, info: dict | None = None, renormalize: bool = True):
    """One iteration of adversarial group DRO.

    Choose ``g`` uniformly, sample a batch from group ``g``, draw the initial
    noise, run K PGD steps (scaled by ``q_g`` in group mode), raise ``q_g`` by
    ``exp(eta_q * adversarial loss)`` and renormalize, then step theta by
    ``eta_theta * q_g * grad``. Every loss and gradient is taken at the
    incoming parameters.

    If ``info`` is a dict it receives the attacked batch (``x_adv``, ``y``,
    ``delta``) for monitoring.
    """
    opt = opt or SGD(cfg.eta_theta, cfg.momentum, cfg.project_radius)
    g = draw_group(rng, weights.m)
    batch = sample_batch(dataset, rng, cfg.batch_size, g)
    x_adv, delta = run_attack(params, batch.x, batch.y, cfg.attack, weights.q[g], rng, weights.m)
    if info is not None:
        info.update(x_adv=x_adv, y=batch.y, delta=delta)
    params, weights, lv = _dro_update(params, weights, g, x_adv, batch.y, opt, renormalize)
    return params, weights, g, lv


def _mixture_step(params, weights, dataset, cfg, rng, opt):
    """Mixed-group batch: every row uses its own group's weight."""
    draw_group(rng, weights.m)
    batch = sample_batch(dataset, rng, cfg.batch_size)
    if cfg.method == "adv_gdro":
        x, _ = run_attack(params, batch.x, batch.y, cfg.attack, weights.q[batch.g], rng, weights.m)
    else:
        sample_gaussian(rng, batch.x.shape, 0.0)
        x = batch.x
    lv = M.LossValue(*_batch_loss(params, x, batch.y))
    _check_finite(lv, 0)
    for g in np.unique(batch.g):
        weights = dro.eg_update(weights, int(g), float(lv.per_example[batch.g == g].mean()))
    _, grads, _ = M.loss_and_grads(params, x, batch.y, sample_weight=weights.q[batch.g])
    return opt.step(params, grads, 1.0), weights, -1, lv


def _batch_loss(params, x, y):
    per = M.cross_entropy(M.forward(params, x), y)
    return float(per.mean()), len(per), per


# ---------------------------------------------------------------------------
# training loop


def _selection_metric(method, report: MetricsReport):
    return report.robust_adv_acc if method in ADVERSARIAL else report.robust_acc


def train(cfg: TrainConfig, dataset: GroupedDataset, val: GroupedDataset | None = None,
          params: M.ModelParams | None = None) -> RunRecord:
    """Run ``cfg.total_steps`` steps of ``cfg.method`` on ``dataset``.

    Validation (when ``val`` is given) runs before the first step, every
    ``eval_every`` steps and after the last step; the best checkpoint maximizes
    validation worst-group accuracy (adversarial worst-group accuracy for the
    adversarial methods), earliest step winning ties.
    """
    cfg.validate()
    if cfg.method in GROUP_DRO:
        dataset.require_nonempty_groups()
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    seeds = derive_seeds(cfg.seed, "init", "train")
    rng = make_rng(seeds["train"])
    if params is None:
        sizes = [dataset.d, *cfg.hidden, dataset.n_classes]
        params = M.init_params(sizes, cfg.activation, make_rng(seeds["init"]), zero=cfg.zero_init)
    if params.in_dim != dataset.d:
        raise ConfigError(f"model expects {params.in_dim} features, dataset has {dataset.d}")
    if cfg.project_radius is not None:
        params = project_l2(params, cfg.project_radius)
    initial = params.copy()
    m = dataset.n_groups
    weights = dro.init_uniform(m, cfg.eta_q if cfg.eta_q is not None else 0.0)
    opt = SGD(cfg.eta_theta, cfg.momentum, cfg.project_radius)
    sel_attack = cfg.selection_attack()

    T = cfg.total_steps
    step_group = np.full(T, -1, dtype=np.int64)
    step_loss = np.zeros(T)
    step_q = np.zeros((T, m))
    avg = np.zeros_like(params.flat())
    evals, iterates = [], []
    best = (None, -1.0, 0)

    def run_eval(step):
        nonlocal best
        if val is None:
            return
        erng = make_rng(derive_seeds(cfg.seed, f"eval/{step}")[f"eval/{step}"])
        report = evaluate(params, val, sel_attack, erng)
        evals.append((step, report))
        score = _selection_metric(cfg.method, report)
        if score > best[1]:
            best = (params.copy(), score, step)

    run_eval(0)
    for t in range(1, T + 1):
        if cfg.sampling == "mixture_batch" and cfg.method in GROUP_DRO:
            params, weights, g, lv = _mixture_step(params, weights, dataset, cfg, rng, opt)
        elif cfg.method == "gdro":
            params, weights, g, lv = gdro_step(params, weights, dataset, cfg, rng, opt)
        elif cfg.method == "adv_gdro":
            params, weights, g, lv = adv_gdro_step(params, weights, dataset, cfg, rng, opt)
        else:
            draw_group(rng, m)
            batch = sample_batch(dataset, rng, cfg.batch_size)
            if cfg.method == "erm":
                sample_gaussian(rng, batch.x.shape, 0.0)
                params, lv = erm_step(params, batch, cfg, opt)
            else:
                params, lv = adv_erm_step(params, batch, cfg, rng, opt)
            g = -1
        _check_finite(lv, t)
        step_group[t - 1] = g
        step_loss[t - 1] = lv.value
        step_q[t - 1] = weights.q
        flat = params.flat()
        avg += (flat - avg) / t
        if cfg.keep_iterates:
            iterates.append(params.copy())
        if t % cfg.eval_every == 0 or t == T:
            run_eval(t)

    best_params, _, best_step = best
    if best_params is None:
        best_params, best_step = params.copy(), T
    return RunRecord(
        config=cfg,
        initial_params=initial,
        final_params=params,
        avg_params=params.with_flat(avg) if T else initial.copy(),
        best_params=best_params,
        best_step=best_step,
        weights=weights,
        step_group=step_group,
        step_loss=step_loss,
        step_q=step_q,
        evals=evals,
        iterates=iterates,
    )


def steps_per_epoch(n_rows: int, batch_size: int) -> int:
    return max(1, math.ceil(n_rows / batch_size))


def default_attack(**overrides) -> AttackConfig:
    base = dict(epsilon=DEFAULT_EPSILON, eta_delta=0.01, steps=5, sigma=DEFAULT_EPSILON ** 2, mode="batch")
    base.update(overrides)
    return AttackConfig(**base)

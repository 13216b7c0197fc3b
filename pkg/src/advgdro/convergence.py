"""Empirical check of the O(1/sqrt(T)) rate of adversarial group DRO on convex instances.

For a binary linear softmax model the worst L-infinity perturbation has a
closed form, so the expected worst-case loss of each group is exactly
computable. The harness runs the training loop (with theta projected onto an
L2 ball), measures the minimax gap of the average iterate against an
independently solved minimax value, and compares it with the analytic bound
``2m * sqrt(10 * (B_theta^2 B_grad^2 + B_loss^2 log m) / T)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import dro
from . import model as M
from .attack import AttackConfig
from .data import GroupedDataset
from .errors import ParameterError, UnsupportedOperation
from .tensorcore import derive_seeds, make_rng
from .trainers import SGD, TrainConfig, adv_gdro_step, project_l2

DEFAULT_T_GRID = (100, 1000, 10000)
ORACLE_TOL = 1e-6


@dataclass
class ConvexInstance:
    dataset: GroupedDataset
    radius: float = 1.0
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        epsilon=0.1, eta_delta=0.1, steps=3, sigma=0.01, mode="batch"))
    # declared bounds; when None the measured running maxima are used
    loss_bound: float | None = None
    grad_bound: float | None = None

    @property
    def m(self) -> int:
        return self.dataset.n_groups


def make_instance(m=2, n_per_group=200, d=4, seed=0, epsilon=0.1, radius=1.0, separation=1.0,
                  spread=math.pi / 3) -> ConvexInstance:
    """Logistic groups whose label directions are rotated against each other.

    Group ``g`` places class means at ``+-separation * u_g`` with ``u_g`` a unit
    vector at angle spread*(g/(m-1) - 1/2) in the first two coordinates, so no
    single linear classifier is best for every group.
    """
    if m < 1 or d < 2:
        raise ParameterError("need m >= 1 and d >= 2")
    rng = make_rng(derive_seeds(seed, "convex-instance")["convex-instance"])
    xs, ys, gs = [], [], []
    for g in range(m):
        angle = 0.0 if m == 1 else spread * (g / (m - 1) - 0.5)
        u = np.zeros(d)
        u[0], u[1] = math.cos(angle), math.sin(angle)
        y = rng.integers(0, 2, size=n_per_group)
        x = separation * (2 * y - 1)[:, None] * u + rng.standard_normal((n_per_group, d))
        xs.append(x)
        ys.append(y)
        gs.append(np.full(n_per_group, g))
    ds = GroupedDataset(np.vstack(xs), np.concatenate(ys), np.concatenate(gs), n_groups=m, n_classes=2,
                        split="train")
    attack = AttackConfig(epsilon=epsilon, eta_delta=epsilon, steps=3 if epsilon > 0 else 0, sigma=epsilon ** 2,
                          mode="batch")
    return ConvexInstance(ds, radius, attack)


def _require_binary_linear(params: M.ModelParams):
    if params.n_hidden != 0 or params.n_classes != 2:
        raise UnsupportedOperation("the closed-form attack is exact only for binary linear models")


def closed_form_perturbation(params, x, y, epsilon):
    """``epsilon * sign(grad_x loss)`` per example; the exact L-inf maximizer for binary linear models."""
    _require_binary_linear(params)
    _, _, grad_x = M.loss_and_grads(params, x, y)
    return epsilon * np.sign(grad_x)


def per_example_adv_loss(params, x, y, epsilon):
    delta = closed_form_perturbation(params, x, y, epsilon)
    return M.cross_entropy(M.forward(params, x + delta), y)


def worst_case_adv_loss(params, instance: ConvexInstance) -> np.ndarray:
    """Exact expected worst-case adversarial loss of each group."""
    ds = instance.dataset
    per = per_example_adv_loss(params, ds.features, ds.labels, instance.attack.epsilon)
    return dro.group_risks(per, ds.groups, ds.n_groups).per_group_loss


# ---------------------------------------------------------------------------
# minimax oracle
#
# The loss depends on theta only through v = W[:,1] - W[:,0] and c = b1 - b0:
#   loss_i = softplus(eps * ||v||_1 - s_i (x_i . v + c)),  s_i = +-1.
# The smallest theta realizing (v, c) has ||theta||^2 = (||v||^2 + c^2) / 2, so
# the theta ball of radius R is the (v, c) ball of radius sqrt(2) R. Writing
# v = p - n with p, n >= 0 turns ||v||_1 into sum(p + n) and makes every
# group loss smooth and convex.


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


class _ReducedProblem:
    def __init__(self, instance: ConvexInstance):
        ds = instance.dataset
        self.x = ds.features
        self.s = 2.0 * ds.labels - 1.0
        self.groups = [ix for ix in ds.group_index]
        self.eps = instance.attack.epsilon
        self.d = ds.d
        self.r2 = 2.0 * instance.radius ** 2

    def split(self, z):
        d = self.d
        return z[:d], z[d:2 * d], z[2 * d]

    def group_losses(self, z):
        """Group losses and their gradients w.r.t. (p, n, c)."""
        p, n, c = self.split(z)
        v = p - n
        zz = self.eps * (p + n).sum() - self.s * (self.x @ v + c)
        per = _softplus(zz)
        sig = _sigmoid(zz)
        vals, grads = [], []
        for ix in self.groups:
            w = sig[ix] / len(ix)
            sx = (w * self.s[ix]) @ self.x[ix]
            tot = w.sum()
            gp = self.eps * tot - sx
            gn = self.eps * tot + sx
            gc = -(w * self.s[ix]).sum()
            vals.append(per[ix].mean())
            grads.append(np.concatenate([gp, gn, [gc]]))
        return np.array(vals), np.array(grads)

    def ball(self, z):
        p, n, c = self.split(z)
        v = p - n
        return self.r2 - v @ v - c * c

    def ball_grad(self, z):
        p, n, c = self.split(z)
        v = p - n
        return np.concatenate([-2 * v, 2 * v, [-2 * c]])

    def true_max(self, z):
        """max_g of the exact group losses, using ||v||_1 rather than sum(p + n)."""
        p, n, c = self.split(z)
        v = p - n
        zz = self.eps * np.abs(v).sum() - self.s * (self.x @ v + c)
        per = _softplus(zz)
        return max(per[ix].mean() for ix in self.groups), v, c


def _solve_epigraph(prob: _ReducedProblem):
    m, d = len(prob.groups), prob.d
    nz = 2 * d + 1

    def obj(w):
        return w[-1]

    def obj_grad(w):
        g = np.zeros_like(w)
        g[-1] = 1.0
        return g

    cons = [
        {"type": "ineq", "fun": lambda w: w[-1] - prob.group_losses(w[:nz])[0],
         "jac": lambda w: np.hstack([-prob.group_losses(w[:nz])[1], np.ones((m, 1))])},
        {"type": "ineq", "fun": lambda w: prob.ball(w[:nz]),
         "jac": lambda w: np.append(prob.ball_grad(w[:nz]), 0.0)},
    ]
    w0 = np.zeros(nz + 1)
    w0[-1] = prob.group_losses(w0[:nz])[0].max()
    bounds = [(0, None)] * (2 * d) + [(None, None), (None, None)]
    res = minimize(obj, w0, jac=obj_grad, constraints=cons, bounds=bounds, method="SLSQP",
                   options={"ftol": 1e-15, "maxiter": 1000})
    return res.x[:nz], res


def _solve_weighted(prob: _ReducedProblem, q, z0=None):
    d = prob.d
    nz = 2 * d + 1

    def f(z):
        vals, grads = prob.group_losses(z)
        return q @ vals, q @ grads

    cons = [{"type": "ineq", "fun": prob.ball, "jac": prob.ball_grad}]
    bounds = [(0, None)] * (2 * d) + [(None, None)]
    res = minimize(f, np.zeros(nz) if z0 is None else z0, jac=True, constraints=cons, bounds=bounds,
                   method="SLSQP", options={"ftol": 1e-15, "maxiter": 1000})
    return res.x, res


def _dual_value(prob: _ReducedProblem, z_hint):
    """max over the simplex of min_theta sum_g q_g L_g, a lower bound on the minimax value."""
    m = len(prob.groups)
    if m == 1:
        z, _ = _solve_weighted(prob, np.ones(1), z_hint)
        return float(prob.group_losses(z)[0][0]), np.ones(1)
    cache = {}

    def neg_h(q):
        key = q.tobytes()
        if key not in cache:
            qq = np.clip(q, 0, None)
            z, _ = _solve_weighted(prob, qq, z_hint)
            vals = prob.group_losses(z)[0]
            cache[key] = (-(qq @ vals), -vals)
        return cache[key]

    res = minimize(neg_h, np.full(m, 1.0 / m), jac=True, method="SLSQP",
                   bounds=[(0, 1)] * m,
                   constraints=[{"type": "eq", "fun": lambda q: q.sum() - 1, "jac": lambda q: np.ones(m)}],
                   options={"ftol": 1e-14, "maxiter": 200})
    q = np.clip(res.x, 0, None)
    q = q / q.sum()
    return -neg_h(q)[0], q


@dataclass
class MinimaxValue:
    value: float
    lower_bound: float
    q_star: list
    method: str
    converged: bool
    theta: M.ModelParams | None = None

    @property
    def duality_gap(self) -> float:
        return self.value - self.lower_bound


def solve_minimax(instance: ConvexInstance, tol: float = ORACLE_TOL) -> MinimaxValue:
    """``min_theta max_g`` of the exact worst-case group losses over the theta ball.

    The primal value comes from a smooth epigraph program; a dual solve over
    the group simplex provides a lower bound. ``converged`` means the two agree
    within ``tol``.
    """
    prob = _ReducedProblem(instance)
    z, _ = _solve_epigraph(prob)
    upper, v, c = prob.true_max(z)
    lower, q = _dual_value(prob, z)
    converged = bool(upper - lower <= tol and lower <= upper + 1e-9 and prob.ball(z) >= -1e-9)
    theta = M.ModelParams([np.column_stack([-v / 2, v / 2])], [np.array([-c / 2, c / 2])], [])
    return MinimaxValue(float(upper), float(lower), q.tolist(), "slsqp-epigraph+dual", converged, theta)


def subgradient_minimax(instance: ConvexInstance, iters=20000, step=0.5) -> float:
    """Deterministic full-batch projected subgradient descent on max_g L_g.

    Slow and only accurate to a few decimals; kept as an independent sanity
    check on :func:`solve_minimax`. Returns the best objective seen.
    """
    ds = instance.dataset
    params = M.init_params([ds.d, 2], zero=True)
    best = math.inf
    for k in range(1, iters + 1):
        losses = worst_case_adv_loss(params, instance)
        g = int(np.argmax(losses))
        best = min(best, float(losses[g]))
        ix = ds.group_index[g]
        delta = closed_form_perturbation(params, ds.features[ix], ds.labels[ix], instance.attack.epsilon)
        _, grads, _ = M.loss_and_grads(params, ds.features[ix] + delta, ds.labels[ix])
        params = project_l2(params.axpy(-step / math.sqrt(k), grads), instance.radius)
    return best


# ---------------------------------------------------------------------------
# gap estimation


def analytic_bound(m: int, b_theta: float, b_grad: float, b_loss: float, T: int) -> float:
    return 2 * m * math.sqrt(10 * (b_theta ** 2 * b_grad ** 2 + b_loss ** 2 * math.log(m)) / T)


def default_step_sizes(instance: ConvexInstance, T: int):
    """``(eta_theta, eta_q)`` scaled as 1/sqrt(T).

    Theta steps are multiplied by q_g (about 1/m) and each group is visited
    about T/m times, hence the factor m.
    """
    x = instance.dataset.features
    worst_sq_norm = float(np.max(((np.abs(x) + instance.attack.epsilon) ** 2).sum(axis=1)))
    g_est = math.sqrt(2.0) * math.sqrt(worst_sq_norm + 1)
    m = instance.m
    eta_theta = 2.0 * m * instance.radius / (g_est * math.sqrt(T))
    eta_q = 2.0 * m * math.sqrt(max(math.log(m), 1.0)) / math.sqrt(T)
    return eta_theta, eta_q


@dataclass
class GapEstimate:
    T: int
    eps_values: list
    b_grad: float
    b_loss: float
    saturation: float
    bound: float
    flagged: list = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.eps_values))

    @property
    def std(self) -> float:
        return float(np.std(self.eps_values, ddof=1)) if len(self.eps_values) > 1 else 0.0

    @property
    def median(self) -> float:
        return float(np.median(self.eps_values))


def run_replicate(instance: ConvexInstance, T: int, seed, eta_theta=None, eta_q=None, batch_size=8,
                  renormalize=True):
    """One adversarial group DRO run with theta projection; returns the average iterate and monitors."""
    if eta_theta is None or eta_q is None:
        dt, dq = default_step_sizes(instance, T)
        eta_theta = dt if eta_theta is None else eta_theta
        eta_q = dq if eta_q is None else eta_q
    ds = instance.dataset
    cfg = TrainConfig(method="adv_gdro", eta_theta=eta_theta, total_steps=T, batch_size=batch_size,
                      attack=instance.attack, eta_q=eta_q, seed=0, hidden=(), project_radius=instance.radius,
                      zero_init=True).validate()
    rng = make_rng(seed)
    params = M.init_params([ds.d, 2], zero=True)
    weights = dro.init_uniform(ds.n_groups, eta_q)
    opt = SGD(eta_theta, 0.0, instance.radius)
    avg = np.zeros_like(params.flat())
    b_grad = b_loss = 0.0
    saturated = 0
    info = {}
    eps = instance.attack.epsilon
    for t in range(1, T + 1):
        before = params
        params, weights, _, lv = adv_gdro_step(params, weights, ds, cfg, rng, opt, info, renormalize)
        # per-example gradient norm of softmax CE for a linear model: ||p - e_y|| * sqrt(||x||^2 + 1)
        logits = M.forward(before, info["x_adv"])
        p = np.exp(M.log_softmax(logits))
        p[np.arange(len(p)), info["y"]] -= 1.0
        gnorm = np.linalg.norm(p, axis=1) * np.sqrt((info["x_adv"] ** 2).sum(axis=1) + 1.0)
        b_grad = max(b_grad, float(gnorm.max()))
        b_loss = max(b_loss, float(lv.per_example.max()))
        if eps > 0:
            saturated += int(np.sum(np.abs(info["delta"]) >= eps)) / info["delta"].size
        avg += (params.flat() - avg) / t
    return params.with_flat(avg), {"b_grad": b_grad, "b_loss": b_loss, "saturation": saturated / max(T, 1),
                                    "q": weights.q.tolist()}


def estimate_gap(instance: ConvexInstance, T: int, replicates: int = 20, seed: int = 0,
                 minimax: MinimaxValue | None = None, renormalize=True, **kwargs) -> GapEstimate:
    """Mean minimax gap of the average iterate over independent replicates."""
    minimax = minimax or solve_minimax(instance)
    eps_values, bg, bl, sat, flagged = [], 0.0, 0.0, [], []
    for r in range(replicates):
        key = f"T{T}/rep{r}"
        avg, mon = run_replicate(instance, T, derive_seeds(seed, key)[key], renormalize=renormalize, **kwargs)
        gap = float(worst_case_adv_loss(avg, instance).max()) - minimax.value
        eps_values.append(gap)
        bg, bl = max(bg, mon["b_grad"]), max(bl, mon["b_loss"])
        sat.append(mon["saturation"])
        if instance.grad_bound is not None and mon["b_grad"] > instance.grad_bound:
            flagged.append(f"replicate {r}: gradient norm {mon['b_grad']:.4g} exceeds declared bound")
        if instance.loss_bound is not None and mon["b_loss"] > instance.loss_bound:
            flagged.append(f"replicate {r}: loss {mon['b_loss']:.4g} exceeds declared bound")
    b_grad = instance.grad_bound if instance.grad_bound is not None else bg
    b_loss = instance.loss_bound if instance.loss_bound is not None else bl
    bound = analytic_bound(instance.m, instance.radius, b_grad, b_loss, T)
    return GapEstimate(T, eps_values, bg, bl, float(np.mean(sat)), bound, flagged)


@dataclass
class ConvergenceReport:
    m: int
    radius: float
    epsilon: float
    replicates: int
    minimax: MinimaxValue
    rows: list = field(default_factory=list)

    def T_values(self):
        return [r.T for r in self.rows]

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["T", "epsilon_T_mean", "epsilon_T_std", "bound"])
            for r in self.rows:
                w.writerow([r.T, repr(r.mean), repr(r.std), repr(r.bound)])
        return Path(path)

    def summary(self):
        checks = check_bound(self)
        return {
            "m": self.m,
            "B_theta": self.radius,
            "epsilon": self.epsilon,
            "replicates": self.replicates,
            "minimax_value": self.minimax.value,
            "minimax_lower_bound": self.minimax.lower_bound,
            "minimax_method": self.minimax.method,
            "minimax_converged": self.minimax.converged,
            "q_star": self.minimax.q_star,
            "rows": [{"T": r.T, "epsilon_T_mean": r.mean, "epsilon_T_std": r.std, "epsilon_T_median": r.median,
                      "bound": r.bound, "B_grad": r.b_grad, "B_loss": r.b_loss,
                      "saturated_fraction": r.saturation, "flagged": r.flagged} for r in self.rows],
            "bound_check": {str(k): v for k, v in checks.items()},
            "median_inversions": median_inversions(self),
            "loglog_slope": loglog_slope(self) if len(self.rows) > 1 else None,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return Path(path)


def run_convergence(instance: ConvexInstance, T_grid=DEFAULT_T_GRID, replicates=20, seed=0,
                    **kwargs) -> ConvergenceReport:
    minimax = solve_minimax(instance)
    report = ConvergenceReport(instance.m, instance.radius, instance.attack.epsilon, replicates, minimax)
    for T in T_grid:
        report.rows.append(estimate_gap(instance, T, replicates, seed, minimax, **kwargs))
    return report


def check_bound(report: ConvergenceReport) -> dict:
    """Per T: does the replicate-mean gap stay below the analytic bound?"""
    return {r.T: bool(r.mean <= r.bound) for r in report.rows}


def median_inversions(report: ConvergenceReport) -> int:
    med = [r.median for r in report.rows]
    return sum(1 for a, b in zip(med, med[1:]) if b > a)


def loglog_slope(report: ConvergenceReport) -> float:
    T = np.log([r.T for r in report.rows])
    eps = np.log(np.maximum([r.mean for r in report.rows], 1e-300))
    return float(np.polyfit(T, eps, 1)[0])


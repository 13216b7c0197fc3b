"""Average / adversarial / worst-group accuracies and export helpers."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .attack import AttackConfig, run_attack
from .data import GroupedDataset
from .errors import EvaluationError

METRIC_NAMES = ("average_acc", "adversarial_acc", "robust_acc", "robust_adv_acc")


@dataclass
class MetricsReport:
    average_acc: float
    adversarial_acc: float
    robust_acc: float
    robust_adv_acc: float
    per_group_acc: list
    per_group_adv_acc: list
    worst_group_id_clean: int
    worst_group_id_adv: int
    per_group_count: list
    attack: dict | None = None
    extra: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.as_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def csv_header(self):
        m = len(self.per_group_acc)
        return (list(METRIC_NAMES) + ["worst_group_id_clean", "worst_group_id_adv"]
                + [f"group_acc_{g}" for g in range(m)] + [f"group_adv_acc_{g}" for g in range(m)])

    def csv_row(self):
        return ([getattr(self, k) for k in METRIC_NAMES]
                + [self.worst_group_id_clean, self.worst_group_id_adv]
                + list(self.per_group_acc) + list(self.per_group_adv_acc))

    def check_identities(self):
        """Raise if robust metrics disagree with the per-group tallies."""
        if self.robust_acc != min(self.per_group_acc) or self.robust_adv_acc != min(self.per_group_adv_acc):
            raise EvaluationError("robust metric is not the minimum per-group accuracy")
        if self.average_acc < self.robust_acc or self.adversarial_acc < self.robust_adv_acc:
            raise EvaluationError("a worst-group accuracy exceeds its average")


def predictions(params, ds: GroupedDataset, attack_cfg: AttackConfig | None = None, rng=None):
    """Clean and adversarial predicted labels for every row.

    Evaluation attacks always run in batch mode with unit weight against the
    model being scored.
    """
    clean = M.predict(params, ds.features)
    if attack_cfg is None:
        return clean, clean.copy()
    cfg = attack_cfg if attack_cfg.mode == "batch" else AttackConfig(**{**attack_cfg.as_dict(), "mode": "batch"})
    x_adv, _ = run_attack(params, ds.features, ds.labels, cfg, 1.0, rng)
    return clean, M.predict(params, x_adv)


def _require_scorable(ds: GroupedDataset):
    if len(ds) == 0:
        raise EvaluationError("cannot evaluate an empty dataset")
    for g, ix in enumerate(ds.group_index):
        if len(ix) == 0:
            raise EvaluationError(f"group {g} has no examples")


def report_from_predictions(ds: GroupedDataset, clean_pred, adv_pred, attack=None) -> MetricsReport:
    _require_scorable(ds)
    ok = clean_pred == ds.labels
    ok_adv = adv_pred == ds.labels
    counts = ds.group_counts()
    per_group = [int(ok[ix].sum()) / len(ix) for ix in ds.group_index]
    per_group_adv = [int(ok_adv[ix].sum()) / len(ix) for ix in ds.group_index]
    wc = int(np.argmin(per_group))
    wa = int(np.argmin(per_group_adv))
    return MetricsReport(
        average_acc=int(ok.sum()) / len(ds),
        adversarial_acc=int(ok_adv.sum()) / len(ds),
        robust_acc=per_group[wc],
        robust_adv_acc=per_group_adv[wa],
        per_group_acc=per_group,
        per_group_adv_acc=per_group_adv,
        worst_group_id_clean=wc,
        worst_group_id_adv=wa,
        per_group_count=counts.tolist(),
        attack=attack,
    )


def evaluate(params, ds: GroupedDataset, attack_cfg: AttackConfig | None = None, rng=None) -> MetricsReport:
    _require_scorable(ds)
    clean, adv = predictions(params, ds, attack_cfg, rng)
    settings = None if attack_cfg is None else {**attack_cfg.as_dict(), "mode": "batch"}
    return report_from_predictions(ds, clean, adv, settings)


def export_representations(params, ds: GroupedDataset, path, attack_cfg: AttackConfig | None = None, rng=None):
    """CSV of last-hidden-layer activations: ``input,group,label,correct,h0..``.

    ``input`` is ``clean`` or ``perturbed``; perturbed rows follow the clean
    ones when an attack is given.
    """
    h_clean = M.penultimate(params, ds.features)
    clean_pred = M.predict(params, ds.features)
    blocks = [("clean", h_clean, clean_pred)]
    if attack_cfg is not None:
        cfg = AttackConfig(**{**attack_cfg.as_dict(), "mode": "batch"})
        x_adv, _ = run_attack(params, ds.features, ds.labels, cfg, 1.0, rng)
        blocks.append(("perturbed", M.penultimate(params, x_adv), M.predict(params, x_adv)))
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input", "group", "label", "correct"] + [f"h{j}" for j in range(h_clean.shape[1])])
        for name, h, pred in blocks:
            for i in range(len(ds)):
                w.writerow([name, int(ds.groups[i]), int(ds.labels[i]), int(pred[i] == ds.labels[i])]
                           + [repr(float(v)) for v in h[i]])
    return path


def row_smoothness(weights: np.ndarray) -> np.ndarray:
    """Mean absolute difference between adjacent entries, one value per row."""
    weights = np.atleast_2d(weights)
    if weights.shape[1] < 2:
        return np.zeros(weights.shape[0])
    return np.abs(np.diff(weights, axis=1)).mean(axis=1)


def export_first_layer(params, path):
    """Write the first weight matrix with one row per output unit plus its smoothness.

    Rows are ``unit,smoothness,w0..w{d-1}``: the stored matrix is (d_in, d_out),
    so unit ``j`` is column ``j``.
    """
    w = params.weights[0].T
    smooth = row_smoothness(w)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["unit", "smoothness"] + [f"w{j}" for j in range(w.shape[1])])
        for j in range(w.shape[0]):
            out.writerow([j, repr(float(smooth[j]))] + [repr(float(v)) for v in w[j]])
    return path


def read_first_layer_smoothness(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r["smoothness"]) for r in rows])


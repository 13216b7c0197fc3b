"""Synthetic spurious-correlation datasets and the grouped-CSV file format.

Each example has a label ``y`` and a binary attribute ``a``; its group is
``2*y + a``. Core features carry the label, spurious features carry the
attribute, and training group sizes are unbalanced so the attribute predicts
the label on most training rows but not at test time.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import DataError, ParameterError, ParseError
from .tensorcore import DTYPE, derive_seeds, make_rng

SPLITS = ("train", "val", "test")

# (landbird, land), (landbird, water), (waterbird, land), (waterbird, water)
WATERBIRDS_TRAIN = (3498, 184, 56, 1057)
WATERBIRDS_VAL_BALANCED = (133, 133, 133, 133)
WATERBIRDS_TEST_BALANCED = (642, 642, 642, 642)


def encode_group(y, a):
    return 2 * np.asarray(y) + np.asarray(a)


def decode_group(g):
    g = np.asarray(g)
    return g // 2, g % 2


@dataclass
class SpuriousSpec:
    n_per_group: dict = field(default_factory=lambda: {
        "train": WATERBIRDS_TRAIN,
        "val": WATERBIRDS_VAL_BALANCED,
        "test": WATERBIRDS_TEST_BALANCED,
    })
    core_dims: int = 2
    spurious_dims: int = 2
    noise_dims: int = 4
    core_strength: float = 1.0
    spurious_strength: float = 2.0
    seed: int = 0

    def __post_init__(self):
        self.n_per_group = {k: tuple(int(v) for v in sizes) for k, sizes in self.n_per_group.items()}
        for split, sizes in self.n_per_group.items():
            if split not in SPLITS:
                raise ParameterError(f"unknown split {split!r}")
            if len(sizes) != 4 or min(sizes) < 0:
                raise ParameterError(f"{split}: need 4 non-negative group sizes, got {sizes}")
        if self.core_dims < 1 or self.spurious_dims < 0 or self.noise_dims < 0:
            raise ParameterError("need core_dims >= 1 and non-negative spurious/noise dims")

    @property
    def d(self) -> int:
        return self.core_dims + self.spurious_dims + self.noise_dims

    def scaled(self, factor: float) -> "SpuriousSpec":
        """Scale every group count (rounded), keeping at least one row per group."""
        sizes = {k: tuple(max(1, round(factor * n)) for n in v) for k, v in self.n_per_group.items()}
        return SpuriousSpec(sizes, self.core_dims, self.spurious_dims, self.noise_dims,
                            self.core_strength, self.spurious_strength, self.seed)

    def as_dict(self):
        out = asdict(self)
        out["n_per_group"] = {k: list(v) for k, v in self.n_per_group.items()}
        return out


class Batch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    g: np.ndarray
    idx: np.ndarray


class GroupedDataset:
    def __init__(self, features, labels, groups, n_groups=None, n_classes=None, split="train"):
        self.features = np.ascontiguousarray(features, dtype=DTYPE)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.groups = np.asarray(groups, dtype=np.int64)
        self.split = split
        n = self.features.shape[0]
        if self.features.ndim != 2 or self.labels.shape != (n,) or self.groups.shape != (n,):
            raise DataError(
                f"features {self.features.shape}, labels {self.labels.shape} and groups "
                f"{self.groups.shape} do not describe the same rows"
            )
        self.n_groups = int(n_groups) if n_groups is not None else int(self.groups.max(initial=-1)) + 1
        self.n_classes = int(n_classes) if n_classes is not None else max(2, int(self.labels.max(initial=-1)) + 1)
        _check_range(self.groups, self.n_groups, "group")
        _check_range(self.labels, self.n_classes, "label")
        order = np.argsort(self.groups, kind="stable")
        bounds = np.searchsorted(self.groups[order], np.arange(self.n_groups + 1))
        self.group_index = [order[bounds[g]:bounds[g + 1]] for g in range(self.n_groups)]

    def __len__(self):
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def group_counts(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.group_index])

    def subset(self, rows) -> "GroupedDataset":
        rows = np.asarray(rows)
        return GroupedDataset(self.features[rows], self.labels[rows], self.groups[rows],
                              self.n_groups, self.n_classes, self.split)

    def regroup(self, groups, n_groups=None) -> "GroupedDataset":
        return GroupedDataset(self.features, self.labels, groups, n_groups, self.n_classes, self.split)

    def require_nonempty_groups(self):
        for g, ix in enumerate(self.group_index):
            if len(ix) == 0:
                raise DataError(f"group {g} of the {self.split} split is empty")

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.groups):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


def _check_range(values, upper, what):
    bad = np.flatnonzero((values < 0) | (values >= upper))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"row {i}: {what} {values[i]} outside [0, {upper})")


def generate(spec: SpuriousSpec) -> dict[str, GroupedDataset]:
    """Draw every split listed in ``spec.n_per_group``.

    Splits use independent random streams derived from ``spec.seed``, so the
    test split does not change when the training sizes do.
    """
    streams = derive_seeds(spec.seed, *SPLITS)
    mu_core = np.ones(spec.core_dims) / math.sqrt(spec.core_dims)
    mu_sp = np.ones(spec.spurious_dims) / math.sqrt(max(spec.spurious_dims, 1))
    out = {}
    for split in SPLITS:
        if split not in spec.n_per_group:
            continue
        rng = make_rng(streams[split])
        sizes = spec.n_per_group[split]
        ys, attrs = [], []
        for g, n in enumerate(sizes):
            y, a = decode_group(g)
            ys.append(np.full(n, y))
            attrs.append(np.full(n, a))
        y = np.concatenate(ys).astype(np.int64)
        a = np.concatenate(attrs).astype(np.int64)
        n = len(y)
        core = spec.core_strength * (2 * y - 1)[:, None] * mu_core + rng.standard_normal((n, spec.core_dims))
        sp = spec.spurious_strength * (2 * a - 1)[:, None] * mu_sp + rng.standard_normal((n, spec.spurious_dims))
        noise = rng.standard_normal((n, spec.noise_dims))
        x = np.hstack([core, sp, noise])
        perm = rng.permutation(n)
        out[split] = GroupedDataset(x[perm], y[perm], encode_group(y, a)[perm], n_groups=4,
                                    n_classes=2, split=split)
    return out


def save(ds: GroupedDataset, path, extra_manifest=None):
    """Write ``ds`` as grouped-CSV plus a ``<name>.manifest.json`` beside it."""
    path = Path(path)
    header = ",".join(["label", "group"] + [f"f{j}" for j in range(ds.d)])
    lines = [header]
    for lab, grp, row in zip(ds.labels.tolist(), ds.groups.tolist(), ds.features.tolist()):
        lines.append(",".join([str(lab), str(grp)] + [repr(v) for v in row]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    manifest = {"N": len(ds), "d": ds.d, "c": ds.n_classes, "m": ds.n_groups, "split": ds.split,
                "group_counts": ds.group_counts().tolist()}
    if extra_manifest:
        manifest.update(extra_manifest)
    mpath = manifest_path(path)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path, mpath


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def load(path, n_groups=None, n_classes=None, split=None) -> GroupedDataset:
    """Parse a grouped-CSV file.

    Group and class counts come from the arguments, else the companion
    manifest, else the data itself.
    """
    path = Path(path)
    mpath = manifest_path(path)
    manifest = json.loads(mpath.read_text(encoding="utf-8")) if mpath.exists() else {}
    n_groups = n_groups if n_groups is not None else manifest.get("m")
    n_classes = n_classes if n_classes is not None else manifest.get("c")
    split = split or manifest.get("split") or path.stem

    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty file", line=1)
    header = lines[0].strip().split(",")
    if header[:2] != ["label", "group"] or header[2:] != [f"f{j}" for j in range(len(header) - 2)]:
        raise ParseError(f"{path}: header must be label,group,f0,...,f{{d-1}}", line=1)
    d = len(header) - 2
    if len(lines) == 1:
        raise ParseError(f"{path}: no data rows", line=2)
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    groups = np.empty(len(lines) - 1, dtype=np.int64)
    feats = np.empty((len(lines) - 1, d), dtype=DTYPE)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        parts = line.strip().split(",")
        if len(parts) != d + 2:
            raise ParseError(f"expected {d + 2} fields, got {len(parts)}", line=lineno)
        try:
            labels[i] = int(parts[0])
            groups[i] = int(parts[1])
            feats[i] = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from None
        if not np.all(np.isfinite(feats[i])):
            raise ParseError("non-finite feature value", line=lineno)
    try:
        return GroupedDataset(feats, labels, groups, n_groups, n_classes, split)
    except DataError as exc:
        raise DataError(f"{path}: {exc} (file line = row + 2)") from None


def sample_batch(ds: GroupedDataset, rng: np.random.Generator, n: int, group=None) -> Batch:
    """Uniform with-replacement draw of ``n`` rows, optionally from one group."""
    if n < 1:
        raise ParameterError(f"batch size must be >= 1, got {n}")
    pool = np.arange(len(ds)) if group is None else ds.group_index[group]
    if len(pool) == 0:
        raise DataError(f"cannot sample from empty {'dataset' if group is None else f'group {group}'}")
    idx = pool[rng.integers(0, len(pool), size=n)]
    return Batch(ds.features[idx], ds.labels[idx], ds.groups[idx], idx)


def load_splits(directory, splits=SPLITS) -> dict[str, GroupedDataset]:
    directory = Path(directory)
    out = {}
    for split in splits:
        path = directory / f"{split}.csv"
        if not path.exists():
            raise DataError(f"missing dataset file {path}")
        out[split] = load(path, split=split)
    return out

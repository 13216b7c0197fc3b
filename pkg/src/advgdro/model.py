"""Linear and MLP classifiers with softmax cross-entropy and hand-written backprop."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, ParameterError, ParseError, UnsupportedOperation
from .tensorcore import DTYPE, matmul

ACTIVATIONS = ("relu", "tanh", "identity")

CHECKPOINT_MAGIC = "ADVGDRO-CKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelParams:
    """Layer weights ``W_i`` of shape (d_in, d_out) and biases ``b_i`` of shape (d_out,).

    ``activations[i]`` is applied after layer ``i``; there is one entry per
    hidden layer, so a linear model has ``activations == []``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise DimensionError("need one bias per weight matrix and at least one layer")
        if len(self.activations) != len(self.weights) - 1:
            raise DimensionError(
                f"{len(self.weights)} layers need {len(self.weights) - 1} activations, "
                f"got {len(self.activations)}"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ParameterError(f"unknown activation {act!r}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise DimensionError(f"layer {i}: weight {w.shape} does not match bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise DimensionError(
                    f"layer {i - 1} outputs {self.weights[i - 1].shape[1]} but layer {i} "
                    f"expects {w.shape[0]}"
                )

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                           list(self.activations))

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(w) for w in self.weights],
                           [np.zeros_like(b) for b in self.biases], list(self.activations))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> "ModelParams":
        vec = np.asarray(vec, dtype=DTYPE)
        total = sum(a.size for a in self.arrays())
        if vec.shape != (total,):
            raise DimensionError(f"flat vector has shape {vec.shape}, model has {total} entries")
        arrays, pos = [], 0
        for a in self.arrays():
            arrays.append(vec[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return ModelParams(arrays[0::2], arrays[1::2], list(self.activations))

    def axpy(self, alpha: float, other: "ModelParams") -> "ModelParams":
        """Return ``self + alpha * other``."""
        return ModelParams([w + alpha * gw for w, gw in zip(self.weights, other.weights)],
                           [b + alpha * gb for b, gb in zip(self.biases, other.biases)],
                           list(self.activations))

    def equals(self, other: "ModelParams") -> bool:
        return self.activations == other.activations and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


@dataclass
class LossValue:
    value: float
    batch_size: int
    per_example: np.ndarray


def init_params(layer_sizes, activation="relu", rng: np.random.Generator | None = None,
                zero=False) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    ``layer_sizes`` is ``[d_in, h_1, ..., n_classes]``; a two-element list gives
    a linear model.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2 or min(sizes) < 1:
        raise ParameterError(f"invalid layer sizes {layer_sizes}")
    if rng is None and not zero:
        raise ParameterError("an rng is required unless zero=True")
    weights, biases = [], []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        if zero:
            weights.append(np.zeros((d_in, d_out)))
        else:
            limit = np.sqrt(6.0 / (d_in + d_out))
            weights.append(rng.uniform(-limit, limit, size=(d_in, d_out)))
        biases.append(np.zeros(d_out))
    acts = [activation] * (len(sizes) - 2)
    return ModelParams(weights, biases, acts)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, a, upstream):
    if name == "relu":
        return upstream * (z > 0)
    if name == "tanh":
        return upstream * (1.0 - a * a)
    return upstream


def _check_input(params: ModelParams, x):
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise DimensionError(f"input shape {tuple(x.shape)} does not match model input dim {params.in_dim}")


def _forward_cache(params: ModelParams, x):
    pre, post = [], [x]
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = matmul(h, w) + b
        if i < params.n_hidden:
            h = _act(params.activations[i], z)
            pre.append(z)
            post.append(h)
        else:
            h = z
    return pre, post, h


def forward(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    _check_input(params, x)
    return _forward_cache(params, x)[2]


def penultimate(params: ModelParams, x) -> np.ndarray:
    """Activations of the last hidden layer (the input to the final linear layer)."""
    if params.n_hidden == 0:
        raise UnsupportedOperation("a linear model has no penultimate layer")
    x = np.asarray(x, dtype=DTYPE)
    _check_input(params, x)
    return _forward_cache(params, x)[1][-1]


def _check_labels(y, n, n_classes):
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= n_classes):
        bad = int(np.flatnonzero((y < 0) | (y >= n_classes))[0])
        raise DataError(f"label {y[bad]} at position {bad} outside [0, {n_classes})")
    return y.astype(np.int64)


def log_softmax(logits):
    shift = logits - logits.max(axis=1, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))


def cross_entropy(logits, y) -> np.ndarray:
    """Per-example cross-entropy, computed with the max-shift log-sum-exp."""
    y = _check_labels(y, logits.shape[0], logits.shape[1])
    return -log_softmax(logits)[np.arange(len(y)), y]


def loss(params: ModelParams, x, y) -> float:
    return float(cross_entropy(forward(params, x), y).mean())


def loss_and_grads(params: ModelParams, x, y, sample_weight=None):
    """Mean cross-entropy with gradients for every parameter and for the input.

    With ``sample_weight`` the objective becomes ``mean(w_i * loss_i)``; the
    returned loss value stays the unweighted mean so it can feed the group
    weight update directly.

    Returns ``(LossValue, grad_params, grad_x)``.
    """
    x = np.asarray(x, dtype=DTYPE)
    _check_input(params, x)
    n = x.shape[0]
    if n == 0:
        raise DataError("empty batch")
    y = _check_labels(y, n, params.n_classes)
    pre, post, logits = _forward_cache(params, x)
    logp = log_softmax(logits)
    per_ex = -logp[np.arange(n), y]

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    scale = np.full(n, 1.0 / n) if sample_weight is None else np.asarray(sample_weight, DTYPE) / n
    delta *= scale[:, None]

    gw, gb = [None] * len(params.weights), [None] * len(params.weights)
    for i in range(len(params.weights) - 1, -1, -1):
        gw[i] = post[i].T @ delta
        gb[i] = delta.sum(axis=0)
        upstream = delta @ params.weights[i].T
        if i > 0:
            delta = _act_grad(params.activations[i - 1], pre[i - 1], post[i], upstream)
    grads = ModelParams(gw, gb, list(params.activations))
    return LossValue(float(per_ex.mean()), n, per_ex), grads, upstream


def predict(params: ModelParams, x) -> np.ndarray:
    return forward(params, x).argmax(axis=1)


def save_checkpoint(path, params: ModelParams, seed: int = 0, step: int = 0, epoch: int = 0):
    """Write an ``.npz`` container with a magic string and format version."""
    payload = {
        "magic": np.array(CHECKPOINT_MAGIC),
        "version": np.array(CHECKPOINT_VERSION),
        "n_layers": np.array(len(params.weights)),
        "activations": np.array(",".join(params.activations)),
        "seed": np.array(int(seed), dtype=np.uint64),
        "step": np.array(int(step)),
        "epoch": np.array(int(epoch)),
    }
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        payload[f"W{i}"] = w
        payload[f"b{i}"] = b
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(params, meta)``."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise ParseError(f"{path}: not a checkpoint ({exc})") from None
    with data:
        if "magic" not in data or str(data["magic"]) != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad magic string")
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"{path}: unsupported checkpoint version {version}")
        n = int(data["n_layers"])
        acts = str(data["activations"])
        params = ModelParams(
            [data[f"W{i}"].astype(DTYPE) for i in range(n)],
            [data[f"b{i}"].astype(DTYPE) for i in range(n)],
            acts.split(",") if acts else [],
        )
        meta = {"seed": int(data["seed"]), "step": int(data["step"]), "epoch": int(data["epoch"]),
                "version": version}
    return params, meta

"""Dense float64 array helpers and seeded random streams.

numpy ndarrays are the tensor type. The functions here add the shape checks
and conventions the rest of the package relies on (float64 everywhere,
``sign(0) == 0``, explicit generator state per run).
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError

DTYPE = np.float64


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def make_rng(seed) -> np.random.Generator:
    """Return an explicit-state PCG64 generator.

    ``seed`` may be an int or a ``np.random.SeedSequence``. Two generators built
    from the same seed emit bitwise-identical streams.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    if seed is None or int(seed) < 0:
        raise ParameterError(f"seed must be a non-negative integer, got {seed!r}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_seeds(root_seed: int, *purposes: str) -> dict[str, np.random.SeedSequence]:
    """Split a root seed into independent per-purpose streams.

    The child for a purpose depends only on the root seed and the purpose name,
    so adding a new purpose never shifts an existing stream.
    """
    out = {}
    for name in purposes:
        key = [int(b) for b in name.encode("utf-8")]
        out[name] = np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(key))
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return a @ b


def sample_gaussian(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Draw i.i.d. N(0, sigma^2) entries.

    The normal variates are always drawn, even for ``sigma == 0``, so callers
    consume the same amount of randomness regardless of sigma.
    """
    if not sigma >= 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    z = rng.standard_normal(shape)
    if sigma == 0:
        return np.zeros(shape, dtype=DTYPE)
    return sigma * z


def _check_same(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def add(a, b):
    _check_same(a, b)
    return np.add(a, b)


def sub(a, b):
    _check_same(a, b)
    return np.subtract(a, b)


def mul(a, b):
    _check_same(a, b)
    return np.multiply(a, b)


def sign(a):
    # np.sign already maps 0 -> 0; +0.0 keeps the result free of negative zeros
    return np.sign(a) + 0.0


def clamp(a, lo, hi):
    if lo > hi:
        raise ParameterError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    return np.clip(a, lo, hi)


def all_finite(*arrays) -> bool:
    return all(bool(np.all(np.isfinite(a))) for a in arrays)

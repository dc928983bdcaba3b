"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np

from .exceptions import DataError, NotFittedError


def check_fitted(estimator, *attrs):
    missing = [a for a in attrs if not hasattr(estimator, a)]
    if missing:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit before using it")


def check_finite(a, name: str = "array"):
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite values")
    return a


def check_positive(x, name: str):
    if not np.all(np.asarray(x) > 0):
        raise DataError(f"{name} must be positive")
    return x


def check_same_length(*pairs):
    lengths = {name: len(a) for name, a in pairs}
    if len(set(lengths.values())) > 1:
        raise DataError(f"length mismatch: {lengths}")


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

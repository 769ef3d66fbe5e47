"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np


def check_X(X, n_features=None, name="X"):
    """Return ``X`` as a 2-D float array. NaN marks a missing cell; inf is rejected."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1) if n_features in (None, 1) else X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-dimensional, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if np.isinf(X).any():
        raise ValueError(f"{name} contains infinite values")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(
            f"{name} has {X.shape[1]} features, but the model was fitted with {n_features}"
        )
    return X


def check_target(y, n_samples=None, name="y"):
    y = np.asarray(y, dtype=float).ravel()
    if y.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains non-finite values")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"{name} has {y.shape[0]} rows, expected {n_samples}")
    return y


def check_weights(w, n_samples):
    if w is None:
        return np.ones(n_samples)
    w = np.asarray(w, dtype=float).ravel()
    if w.shape[0] != n_samples:
        raise ValueError(f"sample_weight has {w.shape[0]} rows, expected {n_samples}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("sample_weight must be finite and positive")
    return w


def check_categorical(categorical, n_features):
    """Normalise a categorical spec (None, bool mask or index list) to a bool mask."""
    mask = np.zeros(n_features, dtype=bool)
    if categorical is None:
        return mask
    categorical = np.asarray(categorical)
    if categorical.dtype == bool:
        if categorical.shape != (n_features,):
            raise ValueError("categorical mask must have one entry per feature")
        return categorical.copy()
    for j in categorical.ravel():
        j = int(j)
        if not 0 <= j < n_features:
            raise ValueError(f"categorical feature index {j} out of range")
        mask[j] = True
    return mask


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_fraction(value, name, closed_low=False):
    value = float(value)
    ok = (0.0 <= value if closed_low else 0.0 < value) and value <= 1.0
    if not ok:
        interval = "[0, 1]" if closed_low else "(0, 1]"
        raise ValueError(f"{name} must lie in {interval}, got {value}")
    return value

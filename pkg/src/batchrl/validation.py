"""Argument checks shared by the estimators."""

import numpy as np

from .exceptions import ConfigurationError

_PLANT_ATTRS = ("n_states", "n_controls", "intervals", "lower", "upper", "sample_initial_state", "step", "reward")


def check_plant(plant, deterministic=False):
    missing = [a for a in _PLANT_ATTRS if not hasattr(plant, a)]
    if missing:
        raise ConfigurationError(f"{type(plant).__name__} is not a plant model (missing {', '.join(missing)})")
    if deterministic and not getattr(plant, "deterministic", False):
        raise ConfigurationError(f"{getattr(plant, 'name', plant)} must be a deterministic model")
    return plant


def check_states(X, n_states):
    """2-D float array of finite states with ``n_states`` columns."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_states:
        raise ConfigurationError(f"expected states of shape (n, {n_states}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ConfigurationError("states contain NaN or infinity")
    return X

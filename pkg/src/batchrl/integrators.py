"""Fixed-step integrators with the control held constant over the step.

Both integrators work on plain arrays (a leading batch axis is fine) and on
:class:`~batchrl.autodiff.Var` handles, so a rollout can be differentiated.
"""

import numpy as np

from .autodiff import Var
from .exceptions import ConfigurationError, IntegrationError


def _check_step(dt, substeps):
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    if int(substeps) < 1:
        raise ConfigurationError(f"substeps must be >= 1, got {substeps}")


def _finite(x, what):
    if isinstance(x, Var):
        return
    if not np.all(np.isfinite(x)):
        raise IntegrationError(f"non-finite {what}", state=np.array(x, copy=True))


def rk4_step(derivative, state, action, dt, substeps=20):
    """Classical RK4 over ``substeps`` equal sub-intervals of ``dt``.

    ``derivative(state, action)`` returns the time derivative.
    """
    _check_step(dt, substeps)
    h = dt / int(substeps)
    x = state
    for _ in range(int(substeps)):
        k1 = derivative(x, action)
        _finite(k1, "derivative")
        k2 = derivative(x + (0.5 * h) * k1, action)
        k3 = derivative(x + (0.5 * h) * k2, action)
        k4 = derivative(x + h * k3, action)
        _finite(k4, "derivative")
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    _finite(x, "state")
    return x


def euler_maruyama_step(drift, diffusion, state, action, dt, substeps, rng):
    """Euler–Maruyama with diagonal noise: ``x += f h + g sqrt(h) z``.

    ``rng`` is a Generator, or a sequence of Generators with one per row of
    a batched ``state`` (each row then draws from its own stream).
    """
    _check_step(dt, substeps)
    n = int(substeps)
    h = dt / n
    x = np.asarray(state, dtype=np.float64)
    if isinstance(rng, np.random.Generator):
        z = rng.standard_normal((n,) + x.shape)
    else:
        # per-row streams: z[k, row] comes from rngs[row]
        z = np.stack([r.standard_normal((n,) + x.shape[1:]) for r in rng], axis=1)
    sq = np.sqrt(h)
    for k in range(n):
        x = x + drift(x, action) * h + diffusion(x, action) * sq * z[k]
        _finite(x, "state")
    return x

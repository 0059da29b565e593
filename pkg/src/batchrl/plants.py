"""Case-study plants and the approximate models used for offline training.

Every plant works on batches: states are arrays of shape (B, n_states),
actions (B, n_controls), and ``rngs`` is a sequence with one
``numpy.random.Generator`` per row so that each episode owns its stream.
Single-episode callers can pass a 1-D state and a single Generator.

Rewards follow the convention of one reward per control interval plus a
terminal reward: ``reward(t, ...)`` for ``t < T`` and ``terminal_reward``.
"""

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError
from .integrators import euler_maruyama_step, rk4_step

PLANT_NAMES = ("cs1", "cs1-approx", "cs2", "cs3", "cs3-approx")
CS3_DU_WEIGHTS = (3.125e-8, 3.125e-6)


def _as_batch(state, rng):
    state = np.asarray(state, dtype=np.float64)
    single = state.ndim == 1
    if single:
        state = state[None, :]
    if rng is None:
        rngs = None
    elif isinstance(rng, np.random.Generator):
        rngs = [rng]
        if not single and state.shape[0] != 1:
            raise ConfigurationError("a batched state needs one generator per row")
    else:
        rngs = list(rng)
        if len(rngs) != state.shape[0]:
            raise ConfigurationError(f"{state.shape[0]} states but {len(rngs)} generators")
    return state, rngs, single


def _normal_rows(rngs, n):
    if rngs is None:
        raise ConfigurationError("a stochastic plant needs a random generator")
    return np.stack([r.standard_normal(n) for r in rngs])


class PlantModel:
    """Base class: one control interval per :meth:`step`.

    Subclasses set the class attributes and implement :meth:`derivative`.
    """

    name = "plant"
    n_states = 0
    n_controls = 0
    state_names = ()
    control_names = ()
    deterministic = False

    def __init__(self, intervals, duration, lower, upper, substeps=20):
        if int(intervals) < 1:
            raise ConfigurationError("intervals must be >= 1")
        if int(substeps) < 1:
            raise ConfigurationError("substeps must be >= 1")
        self.intervals = int(intervals)
        self.duration = float(duration)
        self.substeps = int(substeps)
        self.lower = np.asarray(lower, dtype=np.float64)
        self.upper = np.asarray(upper, dtype=np.float64)
        if not np.all(self.lower <= self.upper):
            raise ConfigurationError("control lower bounds must not exceed upper bounds")

    @property
    def dt(self):
        return self.duration / self.intervals

    def __repr__(self):
        return f"{type(self).__name__}(intervals={self.intervals}, substeps={self.substeps})"

    def derivative(self, state, action):
        raise NotImplementedError

    def initial_mean(self):
        raise NotImplementedError

    def sample_initial_state(self, rng):
        """Initial state for one Generator (1-D) or one per row (2-D)."""
        if isinstance(rng, np.random.Generator):
            return self._initial(np.array([0]), [rng])[0]
        rngs = list(rng)
        return self._initial(np.arange(len(rngs)), rngs)

    def _initial(self, idx, rngs):
        return np.tile(self.initial_mean(), (len(idx), 1))

    def step(self, state, action, t, rng=None):
        """Advance one control interval; returns ``(next_state, measured)``."""
        x, rngs, single = _as_batch(state, rng)
        u = np.broadcast_to(np.asarray(action, dtype=np.float64), (x.shape[0], self.n_controls))
        nxt, meas = self._step(x, u, int(t), rngs)
        if single:
            return nxt[0], meas[0]
        return nxt, meas

    def _step(self, x, u, t, rngs):
        nxt = rk4_step(self.derivative, x, u, self.dt, self.substeps)
        return nxt, nxt.copy()

    def reward(self, t, state, action, previous_action=None):
        if isinstance(state, ad.Var):
            return 0.0
        return np.zeros(np.shape(state)[:-1])

    def terminal_reward(self, state):
        raise NotImplementedError

    def simulate(self, actions, state=None, rng=None):
        """Open-loop run of a (T, n_controls) action sequence.

        Returns the (T+1, n_states) state record and the total return.
        """
        actions = np.asarray(actions, dtype=np.float64)
        x = self.initial_mean() if state is None else np.asarray(state, dtype=np.float64)
        xs = [x]
        total = 0.0
        prev = None
        for t, u in enumerate(actions):
            total += float(self.reward(t, x, u, prev))
            x, _ = self.step(x, u, t, rng)
            xs.append(x)
            prev = u
        total += float(self.terminal_reward(x))
        return np.array(xs), total


def cs1_reward(t, state, intervals=10):
    """Zero along the batch, the product concentration at the terminal index."""
    state = np.asarray(state, dtype=np.float64)
    if t < intervals:
        return np.zeros(state.shape[:-1])
    return state[..., 1].copy()


def cs1_true_drift(state, action):
    y1, y2 = state[..., 0], state[..., 1]
    u1, u2 = action[..., 0], action[..., 1]
    dy1 = -(u1 + 0.5 * u1 * u1) * y1 + 0.5 * u2 * y2 / (y1 + y2)
    dy2 = u1 * y1 - 0.7 * u2 * y1
    return ad.stack([dy1, dy2])


def cs1_approx_drift(state, action):
    y1 = state[..., 0]
    u1, u2 = action[..., 0], action[..., 1]
    dy1 = -(u1 + 0.5 * u1 * u1) * y1 + u2
    dy2 = u1 * y1 - u2 * y1
    return ad.stack([dy1, dy2])


class _PhotoProduction(PlantModel):
    n_states = 2
    n_controls = 2
    state_names = ("y1", "y2")
    control_names = ("u1", "u2")

    def __init__(self, intervals=10, substeps=20, initial_state=(1.0, 0.0)):
        super().__init__(intervals, 1.0, [0.0, 0.0], [5.0, 5.0], substeps)
        self.initial_state = np.asarray(initial_state, dtype=np.float64)

    def initial_mean(self):
        return self.initial_state.copy()

    def terminal_reward(self, state):
        if isinstance(state, ad.Var):
            return state[..., 1]
        return cs1_reward(self.intervals, state, self.intervals)


class ApproximateModel(_PhotoProduction):
    """Simplified deterministic model used to pre-train the CS1/CS2 policy."""

    name = "cs1-approx"
    deterministic = True

    def derivative(self, state, action):
        return cs1_approx_drift(state, action)


class CaseStudy1Plant(_PhotoProduction):
    """Photo-production plant with an additive Gaussian state disturbance."""

    name = "cs1"

    def __init__(self, intervals=10, substeps=20, initial_state=(1.0, 0.0), disturbance_std=0.02):
        super().__init__(intervals, substeps, initial_state)
        self.disturbance_std = float(disturbance_std)

    def derivative(self, state, action):
        return cs1_true_drift(state, action)

    def _step(self, x, u, t, rngs):
        nxt = rk4_step(self.derivative, x, u, self.dt, self.substeps)
        nxt = nxt + self.disturbance_std * _normal_rows(rngs, self.n_states)
        return nxt, nxt.copy()


class CaseStudy2Plant(_PhotoProduction):
    """Same drift as CS1 with a ``0.1 sqrt(y1) dW`` term on the product."""

    name = "cs2"

    def __init__(self, intervals=10, substeps=20, initial_state=(1.0, 0.0), noise_scale=0.1):
        super().__init__(intervals, substeps, initial_state)
        self.noise_scale = float(noise_scale)

    def derivative(self, state, action):
        return cs1_true_drift(state, action)

    def diffusion(self, state, action):
        g = np.zeros_like(state)
        g[..., 1] = self.noise_scale * np.sqrt(np.maximum(state[..., 0], 0.0))
        return g

    def _step(self, x, u, t, rngs):
        nxt = euler_maruyama_step(self.derivative, self.diffusion, x, u, self.dt, self.substeps, rngs)
        return nxt, nxt.copy()


@dataclass
class MonodParameters:
    """Kinetic constants of the phycocyanin production model."""

    u_m: float = 0.0572
    u_d: float = 0.0
    K_N: float = 393.1
    Y_NX: float = 504.1
    k_m: float = 0.00016
    k_d: float = 0.281
    k_s: float = 178.9
    k_i: float = 447.1
    k_sq: float = 23.51
    k_iq: float = 800.0
    K_NP: float = 16.89

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown kinetic parameters: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})


def cs3_switch(c_N, c_X, n_limit=500.0, x_limit=10.0):
    """True where the product pathway is active (both limits inclusive)."""
    return (np.asarray(c_N) <= n_limit) & (np.asarray(c_X) >= x_limit)


def cs3_reward(t, state, action, previous_action=None, intervals=12, weights=CS3_DU_WEIGHTS):
    """Control-move penalty for ``t < T``; the product concentration at ``T``."""
    state = np.asarray(state, dtype=np.float64)
    if t >= intervals:
        return state[..., 2].copy()
    if previous_action is None:
        return np.zeros(state.shape[:-1])
    du = np.asarray(action, dtype=np.float64) - np.asarray(previous_action, dtype=np.float64)
    return -np.sum(np.asarray(weights) * du * du, axis=-1)


class _Phycocyanin(PlantModel):
    n_states = 3
    n_controls = 2
    state_names = ("c_x", "c_N", "c_q")
    control_names = ("I", "F_N")

    def __init__(
        self,
        intervals=12,
        substeps=20,
        duration=240.0,
        params=None,
        du_weights=CS3_DU_WEIGHTS,
        initial_mean=(1.0, 150.0, 0.0),
        initial_var=(1e-3, 22.5, 0.0),
        gate=True,
    ):
        super().__init__(intervals, duration, [120.0, 0.0], [400.0, 40.0], substeps)
        self.params = params if params is not None else MonodParameters()
        self.du_weights = np.asarray(du_weights, dtype=np.float64)
        self._init_mean = np.asarray(initial_mean, dtype=np.float64)
        self.initial_var = np.asarray(initial_var, dtype=np.float64)
        # gate=False keeps the production pathway permanently closed
        self.gate = bool(gate)

    def initial_mean(self):
        return self._init_mean.copy()

    def _initial(self, idx, rngs):
        z = _normal_rows(rngs, self.n_states)
        return np.maximum(self._init_mean + np.sqrt(self.initial_var) * z, 0.0)

    def derivative(self, state, action):
        p = self.params
        cx, cn, cq = state[..., 0], state[..., 1], state[..., 2]
        light, feed = action[..., 0], action[..., 1]
        nitrate = cn / (cn + p.K_N)
        growth = p.u_m * light / (light + p.k_s + light * light / p.k_i) * cx * nitrate
        dcx = growth - p.u_d * cx
        dcn = -p.Y_NX * growth + feed
        dcq = (
            p.k_m * light / (light + p.k_sq + light * light / p.k_iq) * cx * nitrate
            - p.k_d * cq / (cn + p.K_NP)
        )
        active = cs3_switch(cn, cx) & self.gate
        return np.stack([dcx, dcn, np.where(active, dcq, 0.0)], axis=-1)

    def reward(self, t, state, action, previous_action=None):
        return cs3_reward(t, state, action, previous_action, self.intervals, self.du_weights)

    def terminal_reward(self, state):
        return cs3_reward(self.intervals, state, None, None, self.intervals)


class CaseStudy3Approx(_Phycocyanin):
    """Noise-free phycocyanin model; the initial state stays uncertain."""

    name = "cs3-approx"

    def _step(self, x, u, t, rngs):
        nxt = np.maximum(rk4_step(self.derivative, x, u, self.dt, self.substeps), 0.0)
        return nxt, nxt.copy()


class CaseStudy3Plant(_Phycocyanin):
    """Phycocyanin plant with periodic-plus-random disturbance and sensor noise."""

    name = "cs3"

    def __init__(self, *args, disturbance=(4e-3, 1.0, 1e-7), measurement_var=(4e-4, 0.1, 1e-8), **kwargs):
        super().__init__(*args, **kwargs)
        self.disturbance = np.asarray(disturbance, dtype=np.float64)
        self.measurement_var = np.asarray(measurement_var, dtype=np.float64)

    def _step(self, x, u, t, rngs):
        nxt = rk4_step(self.derivative, x, u, self.dt, self.substeps)
        hours = t * self.dt
        w = np.sin(hours) * self.disturbance + np.sqrt(self.disturbance) * _normal_rows(rngs, 3)
        nxt = np.maximum(nxt + w, 0.0)
        measured = nxt + np.sqrt(self.measurement_var) * _normal_rows(rngs, 3)
        return nxt, measured


_FACTORIES = {
    "cs1": CaseStudy1Plant,
    "cs1-approx": ApproximateModel,
    "cs2": CaseStudy2Plant,
    "cs3": CaseStudy3Plant,
    "cs3-approx": CaseStudy3Approx,
}

APPROXIMATE_FOR = {"cs1": "cs1-approx", "cs2": "cs1-approx", "cs3": "cs3-approx",
                   "cs1-approx": "cs1-approx", "cs3-approx": "cs3-approx"}


def make_plant(name, intervals=None, substeps=None, **options):
    """Build a plant by its configuration name."""
    try:
        cls = _FACTORIES[name]
    except KeyError:
        raise ConfigurationError(f"unknown plant {name!r}; expected one of {PLANT_NAMES}") from None
    kwargs = dict(options)
    if intervals is not None:
        kwargs["intervals"] = intervals
    if substeps is not None:
        kwargs["substeps"] = substeps
    return cls(**kwargs)

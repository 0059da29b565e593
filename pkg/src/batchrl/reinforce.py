"""REINFORCE with a mean-return baseline and Adam ascent."""

import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import policy as pol
from .evaluation import fmt, summarize, write_csv
from .exceptions import ConfigurationError, GraphStateError, IntegrationError

logger = logging.getLogger(__name__)

PROGRESS_HEADER = [
    "epoch",
    "mean_return",
    "std_return",
    "p2_return",
    "p98_return",
    "baseline",
    "gradient_norm",
    "episodes",
]


@dataclass
class Trajectory:
    """One episode.  ``rewards`` has T+1 entries, the last one terminal."""

    states: np.ndarray
    measurements: np.ndarray
    actions: np.ndarray
    draws: np.ndarray
    rewards: np.ndarray
    times: np.ndarray
    return_: float
    log_prob: float = 0.0
    grad: np.ndarray = None
    snapshot: str = ""


@dataclass
class TrainConfig:
    epochs: int = 100
    episodes: int = 800
    learning_rate: float = 1e-2
    lr_decay: float = 1.0
    gamma: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.episodes < 2:
            raise ConfigurationError("the baseline needs at least 2 episodes per epoch")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("gamma must lie in (0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError("invalid Adam hyperparameters")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")

    def as_dict(self):
        return asdict(self)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class EpochReport:
    epoch: int
    mean: float
    std: float
    p2: float
    p98: float
    baseline: float
    gradient_norm: float
    episodes: int
    wall_time: float = field(default=0.0, compare=False)

    def row(self):
        return [
            self.epoch,
            fmt(self.mean),
            fmt(self.std),
            fmt(self.p2),
            fmt(self.p98),
            fmt(self.baseline),
            fmt(self.gradient_norm),
            self.episodes,
        ]


def discounted_return(rewards, gamma=1.0):
    """Sum of ``gamma**t * R_t`` along the last axis."""
    r = np.asarray(rewards, dtype=np.float64)
    return np.sum(r * gamma ** np.arange(r.shape[-1]), axis=-1)


def episode_rngs(seed, stream, epoch, episodes, start=0):
    """Independent generator per episode, keyed by (seed, stream, epoch, index)."""
    return [np.random.default_rng([int(seed), int(stream), int(epoch), k]) for k in range(start, start + episodes)]


def _history_push(buf, item, width):
    return np.concatenate([item, buf[:, :-width]], axis=1) if buf.shape[1] > width else item


def rollout_batch(params, plant, rngs, gamma=1.0, deterministic=False, with_grad=True):
    """Run one episode per generator in lock-step and return Trajectories.

    With ``deterministic`` the policy mean is applied (the zero-variance
    limit) and no log-probability is computed.
    """
    cfg = params.config
    if cfg.n_state_inputs != plant.n_states or cfg.n_actions != plant.n_controls:
        raise ConfigurationError(
            f"policy expects {cfg.n_state_inputs} states/{cfg.n_actions} actions, "
            f"plant {plant.name} has {plant.n_states}/{plant.n_controls}"
        )
    rngs = list(rngs)
    B, T = len(rngs), plant.intervals
    lo, hi = plant.lower, plant.upper
    weights = params.arrays()

    x = plant.sample_initial_state(rngs)
    meas = x.copy()
    states, measurements = [x], [meas]
    actions, draws, inputs, rewards = [], [], [], []
    s_hist = np.zeros((B, cfg.history * plant.n_states))
    a_hist = np.tile(np.tile(lo, cfg.history), (B, 1))
    s_hist = _history_push(s_hist, meas, plant.n_states)
    hiddens = [np.zeros((B, cfg.neurons)) for _ in range(cfg.n_nets)]
    prev = None
    for t in range(T):
        obs = pol.Observation(s_hist, a_hist, None, t / T)
        inp = pol.encode_input(cfg, obs)
        mean, std, hiddens = pol._net_step(cfg, weights, inp, hiddens)
        if deterministic:
            draw = mean
            action = np.clip(mean, lo, hi)
        else:
            action, draw = pol.sample_action(mean, std, rngs, lo, hi)
        rewards.append(plant.reward(t, x, action, prev))
        try:
            x, meas = plant.step(x, action, t, rngs)
        except IntegrationError as err:
            raise err.with_context(interval=t, plant=plant.name)
        inputs.append(inp)
        draws.append(draw)
        actions.append(action)
        states.append(x)
        measurements.append(meas)
        s_hist = _history_push(s_hist, meas, plant.n_states)
        a_hist = _history_push(a_hist, action, plant.n_controls)
        prev = action
    rewards.append(plant.terminal_reward(x))

    R = np.stack(rewards, axis=1)
    J = discounted_return(R, gamma)
    if with_grad and not deterministic:
        logp, grads = pol.sequence_log_prob(params, np.stack(inputs), np.stack(draws))
    else:
        logp, grads = np.zeros(B), [None] * B
    S, M = np.stack(states, axis=1), np.stack(measurements, axis=1)
    A, D = np.stack(actions, axis=1), np.stack(draws, axis=1)
    times = np.arange(T + 1) * plant.dt
    snap = params.snapshot_id
    return [
        Trajectory(S[k], M[k], A[k], D[k], R[k], times, float(J[k]), float(logp[k]), grads[k], snap)
        for k in range(B)
    ]


def rollout(params, plant, rng, gamma=1.0, deterministic=False, with_grad=True):
    """Single-episode form of :func:`rollout_batch`."""
    return rollout_batch(params, plant, [rng], gamma, deterministic, with_grad)[0]


_local = threading.local()


def collect(params, plant, rngs, gamma=1.0, threads=1, deterministic=False, with_grad=True):
    """Rollouts split into contiguous chunks, concatenated by episode index."""
    rngs = list(rngs)
    if threads <= 1 or len(rngs) < 2 * threads:
        return rollout_batch(params, plant, rngs, gamma, deterministic, with_grad)
    bounds = np.linspace(0, len(rngs), threads + 1).astype(int)
    chunks = [rngs[a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def work(chunk):
        return rollout_batch(params, plant, chunk, gamma, deterministic, with_grad)

    pool = getattr(_local, "pool", None)
    if pool is None or pool._max_workers != threads:
        pool = _local.pool = ThreadPoolExecutor(threads)
    out = []
    for part in pool.map(work, chunks):
        out.extend(part)
    return out


def compute_baseline(returns):
    r = np.asarray(returns, dtype=np.float64)
    if r.size == 0:
        raise ConfigurationError("baseline of an empty return set")
    return float(np.mean(r))


def gradient_estimate(trajectories, baseline=0.0):
    """``(1/K) sum_k (J_k - b) * grad_k`` over episodes from one snapshot."""
    if not trajectories:
        raise ConfigurationError("no trajectories")
    snaps = {tr.snapshot for tr in trajectories}
    if len(snaps) != 1:
        raise GraphStateError(f"trajectories come from {len(snaps)} parameter snapshots")
    if any(tr.grad is None for tr in trajectories):
        raise GraphStateError("trajectory was collected without log-probability gradients")
    G = np.stack([tr.grad for tr in trajectories])
    w = np.array([tr.return_ for tr in trajectories]) - baseline
    return (w @ G) / len(trajectories)


def adam_ascent(values, grad, state, alpha, frozen=None, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step in the ascent direction.

    Returns new ``(values, state)``; frozen slots keep their values and
    moments untouched.
    """
    values = np.asarray(values, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != values.shape or state.m.shape != values.shape:
        raise ConfigurationError("parameter, gradient and moment shapes differ")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    new = values + alpha * m_hat / (np.sqrt(v_hat) + eps)
    if frozen is not None:
        new = np.where(frozen, values, new)
        m = np.where(frozen, state.m, m)
        v = np.where(frozen, state.v, v)
    return new, AdamState(m, v, t)


def train_epochs(params, plant, config, adam=None, stream=0, first_epoch=0, callback=None):
    """Run ``config.epochs`` REINFORCE epochs.

    Returns ``(params, reports, adam_state)``.  ``stream`` separates the
    random streams of different phases sharing one seed; ``callback`` is
    called as ``callback(epoch, params, report)`` after every update.
    """
    if adam is None:
        adam = AdamState.zeros(params.config.n_params)
    frozen = params.frozen
    reports = []
    alpha = config.learning_rate
    for i in range(config.epochs):
        epoch = first_epoch + i
        tic = time.perf_counter()
        rngs = episode_rngs(config.seed, stream, epoch, config.episodes)
        trajs = collect(params, plant, rngs, config.gamma, config.threads)
        returns = np.array([tr.return_ for tr in trajs])
        b = compute_baseline(returns)
        grad = gradient_estimate(trajs, b)
        values, adam = adam_ascent(
            params.values, grad, adam, alpha, frozen, config.beta1, config.beta2, config.eps
        )
        params = params.with_values(values)
        s = summarize(returns)
        rep = EpochReport(
            epoch + 1, s.mean, s.std, s.p2, s.p98, b, float(np.linalg.norm(grad)), s.episodes,
            time.perf_counter() - tic,
        )
        reports.append(rep)
        logger.info("epoch %d mean %.5f std %.5f", rep.epoch, rep.mean, rep.std)
        if callback is not None:
            callback(epoch, params, rep)
        alpha *= config.lr_decay
    return params, reports, adam


def write_progress_csv(path, reports):
    write_csv(path, PROGRESS_HEADER, [r.row() for r in reports])

"""Shrinking-horizon nominal NMPC by direct single shooting.

The remaining piecewise-constant controls are optimised against the
deterministic approximate model with projected gradient ascent, Armijo
backtracking and Barzilai-Borwein trial steps, from several random starts.
Gradients come from the autodiff graph of the integrated rollout.
"""

import threading
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError, IntegrationError
from .integrators import rk4_step
from .reinforce import Trajectory


@dataclass
class NlpSettings:
    multistarts: int = 8
    max_iterations: int = 300
    tolerance: float = 1e-6
    armijo: float = 1e-4
    backtracks: int = 30
    initial_step: float = 1.0

    def __post_init__(self):
        if self.multistarts < 1:
            raise ConfigurationError("multistarts must be >= 1")
        if self.max_iterations < 1 or self.backtracks < 1:
            raise ConfigurationError("max_iterations and backtracks must be >= 1")
        if not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")

    def as_dict(self):
        return asdict(self)


@dataclass
class OcpProblem:
    """Optimise the controls of intervals ``start_interval .. T-1``."""

    model: object
    start_interval: int
    state: np.ndarray
    lower: np.ndarray = None
    upper: np.ndarray = None

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64)
        if not 0 <= self.start_interval <= self.model.intervals:
            raise ConfigurationError("start_interval outside the batch")
        H, m = self.horizon, self.model.n_controls
        lo = self.model.lower if self.lower is None else self.lower
        hi = self.model.upper if self.upper is None else self.upper
        self.lower = np.broadcast_to(np.asarray(lo, dtype=np.float64), (H, m)).copy()
        self.upper = np.broadcast_to(np.asarray(hi, dtype=np.float64), (H, m)).copy()
        if np.any(self.lower > self.upper):
            raise ConfigurationError("lower bounds exceed upper bounds")

    @property
    def horizon(self):
        return self.model.intervals - self.start_interval


@dataclass
class OcpSolution:
    controls: np.ndarray
    objective: float
    degraded: bool = False
    iterations: int = 0


_graphs = threading.local()


def _objective_graph(model, start, horizon):
    cache = getattr(_graphs, "cache", None)
    if cache is None:
        cache = _graphs.cache = {}
    key = (id(model), start, horizon)
    if key in cache and cache[key][0] is model:
        return cache[key][1]
    g = ad.Graph()
    x = g.input()
    us = [g.param(batched=True) for _ in range(horizon)]
    total = 0.0
    prev = None
    for k, u in enumerate(us):
        total = total + model.reward(start + k, x, u, prev)
        x = rk4_step(model.derivative, x, u, model.dt, model.substeps)
        prev = u
    total = total + model.terminal_reward(x)
    g.output(total)
    cache[key] = (model, g)
    return g


class _Objective:
    """Batched objective and gradient over (B, H, m) control arrays."""

    def __init__(self, model, start, x0):
        self.model = model
        self.start = start
        self.x0 = np.asarray(x0, dtype=np.float64)
        self.graph = _objective_graph(model, start, model.intervals - start)

    def value(self, U):
        with np.errstate(all="ignore"):
            (J,) = self.graph.forward([self.x0], [U[:, k, :] for k in range(U.shape[1])])
        return np.where(np.isfinite(J), J, -np.inf)

    def value_and_grad(self, U):
        J = self.value(U)
        with np.errstate(all="ignore"):
            grads = self.graph.backward(0)
        G = np.stack(grads, axis=1)
        G = np.where(np.isfinite(G), G, 0.0)
        return J, G


def projected_ascent(objective, U0, lower, upper, settings):
    """Maximise row-wise from the starting points ``U0`` (B, H, m).

    Returns ``(U, J, failed, iterations)`` where ``failed`` marks rows whose
    line search broke down before reaching the tolerance.
    """
    U = np.clip(U0, lower, upper)
    J, G = objective.value_and_grad(U)
    B = U.shape[0]
    active = np.ones(B, dtype=bool)
    failed = np.zeros(B, dtype=bool)
    step = np.full(B, settings.initial_step)
    it = 0
    for it in range(1, settings.max_iterations + 1):
        pg = np.abs(np.clip(U + G, lower, upper) - U).reshape(B, -1).max(axis=1)
        active &= pg > settings.tolerance
        if not active.any():
            break
        s = step.copy()
        accepted = ~active
        U_new, J_new = U.copy(), J.copy()
        for _ in range(settings.backtracks):
            todo = ~accepted
            if not todo.any():
                break
            cand = np.clip(U + s[:, None, None] * G, lower, upper)
            Jc = objective.value(cand)
            gain = np.sum(G * (cand - U), axis=(1, 2))
            ok = todo & (Jc >= J + settings.armijo * gain)
            U_new[ok], J_new[ok] = cand[ok], Jc[ok]
            accepted |= ok
            s = np.where(todo & ~ok, 0.5 * s, s)
        stalled = active & ~accepted
        failed |= stalled
        active &= accepted
        if not active.any():
            break
        J_prev, G_prev, U_prev = J, G, U
        U, J = U_new, J_new
        J2, G2 = objective.value_and_grad(U)
        G = np.where(active[:, None, None], G2, G_prev)
        J = np.where(active, J2, J)
        # Barzilai-Borwein trial step for the next iteration
        dU = (U - U_prev).reshape(B, -1)
        dG = -(G - G_prev).reshape(B, -1)
        sy = np.sum(dU * dG, axis=1)
        ss = np.sum(dU * dU, axis=1)
        bb = np.where(sy > 0, ss / np.where(sy > 0, sy, 1.0), 2.0 * s)
        step = np.clip(np.where(active, bb, step), 1e-8, 1e8)
    return U, J, failed, it


def _solve_batch(model, start, states, settings, rngs, warm=None):
    """Solve one OCP per row of ``states`` with multistart; returns OcpSolutions."""
    P = states.shape[0]
    H, m = model.intervals - start, model.n_controls
    if H == 0:
        term = model.terminal_reward(states)
        return [OcpSolution(np.zeros((0, m)), float(term[i])) for i in range(P)]
    lo = np.broadcast_to(model.lower, (H, m))
    hi = np.broadcast_to(model.upper, (H, m))
    starts = []
    for i in range(P):
        rows = [rngs[i].uniform(lo, hi) for _ in range(settings.multistarts)]
        if warm is not None:
            rows.append(np.clip(warm[i], lo, hi))
        starts.append(np.stack(rows))
    S = starts[0].shape[0]
    U0 = np.concatenate(starts)
    x0 = np.repeat(states, S, axis=0)
    obj = _Objective(model, start, x0)
    U, J, failed, iters = projected_ascent(obj, U0, lo, hi, settings)
    out = []
    for i in range(P):
        Ji = J[i * S : (i + 1) * S]
        best = int(np.argmax(Ji))
        if not np.isfinite(Ji[best]):
            raise IntegrationError("every start diverged", state=states[i], context={"interval": start})
        out.append(
            OcpSolution(U[i * S + best].copy(), float(Ji[best]), bool(failed[i * S : (i + 1) * S].all()), iters)
        )
    return out


def solve_ocp(problem, settings=None, rng=None, warm_start=None):
    """Locally optimal controls for the remaining horizon of ``problem``."""
    settings = settings or NlpSettings()
    rng = rng if rng is not None else np.random.default_rng(0)
    model = problem.model
    if not getattr(model, "deterministic", False):
        raise ConfigurationError(f"the OCP model must be deterministic, got {model.name}")
    H, m = problem.horizon, model.n_controls
    if H == 0:
        term = float(np.asarray(model.terminal_reward(problem.state[None]))[0])
        return OcpSolution(np.zeros((0, m)), term)
    lo, hi = problem.lower, problem.upper
    rows = [rng.uniform(lo, hi) for _ in range(settings.multistarts)]
    if warm_start is not None:
        rows.append(np.clip(np.asarray(warm_start, dtype=np.float64).reshape(H, m), lo, hi))
    U0 = np.stack(rows)
    obj = _Objective(model, problem.start_interval, np.repeat(problem.state[None], len(rows), axis=0))
    U, J, failed, iters = projected_ascent(obj, U0, lo, hi, settings)
    best = int(np.argmax(J))
    return OcpSolution(U[best].copy(), float(J[best]), bool(failed.all()), iters)


def nmpc_episodes(plant, model, settings, rngs, warm_start=True):
    """Closed-loop shrinking-horizon NMPC, one episode per generator.

    At every interval each episode re-solves from its measured state and
    applies the first control to ``plant``.
    """
    settings = settings or NlpSettings()
    if plant.n_states != model.n_states or plant.n_controls != model.n_controls:
        raise ConfigurationError("plant and model dimensions differ")
    if plant.intervals != model.intervals:
        raise ConfigurationError("plant and model must share the number of intervals")
    rngs = list(rngs)
    solver_rngs = [r.spawn(1)[0] for r in rngs]
    B, T = len(rngs), plant.intervals
    x = plant.sample_initial_state(rngs)
    meas = x.copy()
    states, measurements, actions, rewards = [x], [meas], [], []
    warm = None
    prev = None
    for t in range(T):
        try:
            sols = _solve_batch(model, t, meas, settings, solver_rngs, warm)
        except IntegrationError as err:
            raise err.with_context(interval=t)
        u = np.stack([s.controls[0] for s in sols])
        warm = np.stack([s.controls[1:] for s in sols]) if warm_start and t + 1 < T else None
        rewards.append(plant.reward(t, x, u, prev))
        x, meas = plant.step(x, u, t, rngs)
        actions.append(u)
        states.append(x)
        measurements.append(meas)
        prev = u
    rewards.append(plant.terminal_reward(x))
    R = np.stack(rewards, axis=1)
    S, M, A = np.stack(states, axis=1), np.stack(measurements, axis=1), np.stack(actions, axis=1)
    times = np.arange(T + 1) * plant.dt
    return [
        Trajectory(S[k], M[k], A[k], A[k].copy(), R[k], times, float(R[k].sum()), snapshot="nmpc")
        for k in range(B)
    ]


def nmpc_rollout(plant, model, settings=None, rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    return nmpc_episodes(plant, model, settings, [rng])[0]

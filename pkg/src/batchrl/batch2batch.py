"""Offline pre-training, transfer-learning freeze and online adaptation."""

import logging
import os
import threading
from dataclasses import asdict, dataclass, field

from . import policy as pol
from .exceptions import ConfigurationError
from .reinforce import AdamState, EpochReport, TrainConfig, train_epochs

logger = logging.getLogger(__name__)

OFFLINE_STREAM = 0
ONLINE_STREAM = 1


@dataclass
class B2BConfig:
    offline_epochs: int = 100
    max_offline_epochs: int = 100
    offline_episodes: int = 800
    offline_learning_rate: float = 1e-2
    online_epochs: int = 4
    online_episodes: int = 25
    online_learning_rate: float = 1e-3
    lr_decay: float = 1.0
    trainable_layers: tuple = None
    gamma: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    threads: int = 1
    # stop offline training once within this distance of the OCP optimum
    ocp_gap: float = None

    def __post_init__(self):
        if self.offline_episodes < 10 * self.online_episodes:
            raise ConfigurationError(
                f"offline episodes ({self.offline_episodes}) must be at least 10x the "
                f"online episodes ({self.online_episodes})"
            )
        if not 0 <= self.offline_epochs <= self.max_offline_epochs:
            raise ConfigurationError("offline_epochs must lie in [0, max_offline_epochs]")
        if self.online_epochs < 0:
            raise ConfigurationError("online_epochs must be >= 0")
        if self.online_episodes < 2:
            raise ConfigurationError("online_episodes must be >= 2")

    def as_dict(self):
        return asdict(self)

    def train_config(self, phase):
        offline = phase == "offline"
        return TrainConfig(
            epochs=self.offline_epochs if offline else self.online_epochs,
            episodes=self.offline_episodes if offline else self.online_episodes,
            learning_rate=self.offline_learning_rate if offline else self.online_learning_rate,
            lr_decay=self.lr_decay,
            gamma=self.gamma,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            seed=self.seed,
            threads=self.threads,
        )


@dataclass
class PhaseRecord:
    phase: str
    epoch: int
    report: EpochReport
    checkpoint: str = None
    snapshot: str = ""


class EpisodeBudget:
    """Plant proxy that counts episodes and refuses to exceed a budget.

    An episode is counted each time an initial state is sampled.
    """

    def __init__(self, plant, budget):
        self._plant = plant
        self.budget = int(budget)
        self.used = 0
        self._lock = threading.Lock()

    def __getattr__(self, name):
        return getattr(self._plant, name)

    def sample_initial_state(self, rng):
        n = 1 if hasattr(rng, "standard_normal") else len(rng)
        with self._lock:
            if self.used + n > self.budget:
                raise ConfigurationError(f"true-plant budget of {self.budget} episodes exhausted")
            self.used += n
        return self._plant.sample_initial_state(rng)


def _save(params, directory, name):
    if directory is None:
        return None
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    pol.save_checkpoint(params, path)
    return path


def offline_phase(params, plant, config, checkpoint_dir=None, ocp_optimum=None):
    """Train on the approximate model; returns ``(params, records)``.

    Checkpoint ``offline_000.ckpt`` is the initialisation, then one per epoch.
    With ``config.ocp_gap`` and a known ``ocp_optimum`` training stops early
    once the epoch mean return is that close to the optimum.
    """
    tc = config.train_config("offline")
    _save(params, checkpoint_dir, "offline_000.ckpt")
    records = []
    adam = AdamState.zeros(params.config.n_params)
    one = TrainConfig(**{**tc.as_dict(), "epochs": 1})
    for epoch in range(tc.epochs):
        params, (rep,), adam = train_epochs(params, plant, one, adam, OFFLINE_STREAM, epoch)
        one.learning_rate *= tc.lr_decay
        path = _save(params, checkpoint_dir, f"offline_{epoch + 1:03d}.ckpt")
        records.append(PhaseRecord("offline", epoch + 1, rep, path, params.snapshot_id))
        logger.info("offline epoch %d: mean return %.5f", epoch + 1, rep.mean)
        if config.ocp_gap is not None and ocp_optimum is not None:
            if abs(rep.mean - ocp_optimum) <= config.ocp_gap:
                break
    return params, records


def transfer_freeze(params, trainable_layers=None):
    """Start the online parameters from the offline ones, freezing early layers.

    The default keeps only the last hidden layer and the output layer trainable.
    """
    if trainable_layers is None:
        trainable_layers = pol.default_trainable_layers(params.config)
    return pol.apply_freeze(params, trainable_layers)


def online_phase(params, plant, config, checkpoint_dir=None):
    """Adapt on the true plant with ``online_epochs`` x ``online_episodes`` batches.

    Adam moments start from zero.  Returns ``(params, records, episodes_used)``.
    """
    tc = config.train_config("online")
    budget = EpisodeBudget(plant, tc.epochs * tc.episodes)
    _save(params, checkpoint_dir, "online_000.ckpt")
    records = []

    def on_epoch(epoch, p, rep):
        path = _save(p, checkpoint_dir, f"online_{epoch + 1:03d}.ckpt")
        records.append(PhaseRecord("online", epoch + 1, rep, path, p.snapshot_id))
        logger.info("online epoch %d: mean return %.5f", epoch + 1, rep.mean)

    params, _, _ = train_epochs(params, budget, tc, None, ONLINE_STREAM, 0, on_epoch)
    return params, records, budget.used


@dataclass
class PipelineResult:
    initial: pol.PolicyParams
    offline: pol.PolicyParams
    frozen: pol.PolicyParams
    final: pol.PolicyParams
    offline_records: list = field(default_factory=list)
    online_records: list = field(default_factory=list)
    online_episodes_used: int = 0


def run_pipeline(approx_plant, true_plant, config, policy_config=None, checkpoint_dir=None, init_seed=None):
    """Offline phase, freeze, online phase; checkpoints every epoch."""
    if policy_config is None:
        policy_config = pol.config_for_plant(approx_plant)
    initial = pol.init_params(policy_config, config.seed if init_seed is None else init_seed)
    offline, off_rec = offline_phase(initial, approx_plant, config, checkpoint_dir)
    frozen = transfer_freeze(offline, config.trainable_layers)
    final, on_rec, used = online_phase(frozen, true_plant, config, checkpoint_dir)
    return PipelineResult(initial, offline, frozen, final, off_rec, on_rec, used)

"""scikit-learn style wrappers around the policy trainers and the NMPC baseline.

``fit`` takes a plant (the "data" of a control problem) rather than a
feature matrix.  ``predict`` maps measured states to the policy mean for a
single decision step with no recurrent memory.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import batch2batch as b2b
from . import policy as pol
from .harness import evaluate
from .nmpc import NlpSettings, OcpProblem, nmpc_episodes, solve_ocp
from .reinforce import TrainConfig, train_epochs
from .validation import check_plant, check_states


class _PolicyMixin:
    def _check_states(self, X):
        check_is_fitted(self, "params_")
        return check_states(X, self.params_.config.n_state_inputs)

    def predict(self, X, time_fraction=0.0, previous_action=None):
        """Policy mean for each row of ``X`` at the first decision step."""
        X = self._check_states(X)
        cfg = self.params_.config
        prev = np.tile(cfg.lower, (len(X), 1)) if previous_action is None else np.asarray(previous_action)
        obs = pol.Observation(X, prev, pol.initial_hidden(cfg, len(X)), time_fraction)
        mean, _, _ = pol.policy_forward(self.params_, obs)
        return np.clip(mean, cfg.lower, cfg.upper)

    def evaluate(self, plant, episodes=100, seed=0, deterministic=False):
        check_is_fitted(self, "params_")
        return evaluate(self.params_, check_plant(plant), episodes, seed, self.threads, deterministic)

    def score(self, plant, episodes=100, seed=0):
        """Mean return over ``episodes`` Monte-Carlo rollouts."""
        report, _ = self.evaluate(plant, episodes, seed)
        return report.mean


class ReinforcePolicy(_PolicyMixin, BaseEstimator):
    """Recurrent Gaussian policy trained with REINFORCE on one plant."""

    def __init__(self, epochs=100, episodes=800, learning_rate=1e-2, lr_decay=1.0, gamma=1.0,
                 hidden_layers=None, neurons=20, activation=None, split_networks=None, history=1,
                 seed=0, threads=1, warm_start=False):
        self.epochs = epochs
        self.episodes = episodes
        self.learning_rate = learning_rate
        self.lr_decay = lr_decay
        self.gamma = gamma
        self.hidden_layers = hidden_layers
        self.neurons = neurons
        self.activation = activation
        self.split_networks = split_networks
        self.history = history
        self.seed = seed
        self.threads = threads
        self.warm_start = warm_start

    def fit(self, plant, y=None):
        plant = check_plant(plant)
        tc = TrainConfig(self.epochs, self.episodes, self.learning_rate, self.lr_decay, self.gamma,
                         seed=self.seed, threads=self.threads)
        if self.warm_start and hasattr(self, "params_"):
            params, adam, first = self.params_, self.adam_, len(self.history_)
        else:
            pc = pol.config_for_plant(plant, hidden_layers=self.hidden_layers, neurons=self.neurons,
                                      activation=self.activation, split_networks=self.split_networks,
                                      history=self.history)
            params, adam, first = pol.init_params(pc, self.seed), None, 0
            self.history_ = []
        self.params_, reports, self.adam_ = train_epochs(params, plant, tc, adam, 0, first)
        self.history_ = self.history_ + reports
        return self


class BatchToBatchPolicy(_PolicyMixin, BaseEstimator):
    """Offline training on a model, layer freeze, then online adaptation."""

    def __init__(self, offline_epochs=100, offline_episodes=800, offline_learning_rate=1e-2,
                 online_epochs=4, online_episodes=25, online_learning_rate=1e-3,
                 trainable_layers=None, gamma=1.0, seed=0, threads=1):
        self.offline_epochs = offline_epochs
        self.offline_episodes = offline_episodes
        self.offline_learning_rate = offline_learning_rate
        self.online_epochs = online_epochs
        self.online_episodes = online_episodes
        self.online_learning_rate = online_learning_rate
        self.trainable_layers = trainable_layers
        self.gamma = gamma
        self.seed = seed
        self.threads = threads

    def _b2b_config(self):
        tl = self.trainable_layers
        return b2b.B2BConfig(
            offline_epochs=self.offline_epochs,
            max_offline_epochs=max(self.offline_epochs, 100),
            offline_episodes=self.offline_episodes,
            offline_learning_rate=self.offline_learning_rate,
            online_epochs=self.online_epochs,
            online_episodes=self.online_episodes,
            online_learning_rate=self.online_learning_rate,
            trainable_layers=None if tl is None else tuple(tl),
            gamma=self.gamma,
            seed=self.seed,
            threads=self.threads,
        )

    def fit(self, model, plant, checkpoint_dir=None):
        """``model`` is the approximate training model, ``plant`` the true process."""
        result = b2b.run_pipeline(check_plant(model), check_plant(plant), self._b2b_config(),
                                  checkpoint_dir=checkpoint_dir)
        self.result_ = result
        self.offline_params_ = result.offline
        self.params_ = result.final
        return self

    def adapt(self, plant, checkpoint_dir=None):
        """Run another online phase from the current parameters."""
        check_is_fitted(self, "params_")
        self.params_, records, _ = b2b.online_phase(self.params_, check_plant(plant), self._b2b_config(),
                                                    checkpoint_dir)
        self.result_.online_records = self.result_.online_records + records
        return self


class ShrinkingHorizonNMPC(BaseEstimator):
    """Nominal shrinking-horizon NMPC on a deterministic model."""

    def __init__(self, multistarts=8, max_iterations=300, tolerance=1e-6, seed=0, warm_start=True):
        self.multistarts = multistarts
        self.max_iterations = max_iterations
        self.tolerance = tolerance
        self.seed = seed
        self.warm_start = warm_start

    def _settings(self):
        return NlpSettings(self.multistarts, self.max_iterations, self.tolerance)

    def fit(self, model, y=None):
        self.model_ = check_plant(model, deterministic=True)
        self.settings_ = self._settings()
        return self

    def predict(self, X, interval=0):
        """First optimal control from each measured state at ``interval``."""
        check_is_fitted(self, "model_")
        X = check_states(X, self.model_.n_states)
        rng = np.random.default_rng(self.seed)
        return np.stack([solve_ocp(OcpProblem(self.model_, interval, x), self.settings_, rng).controls[0]
                         for x in X])

    def solve(self, state=None, interval=0):
        check_is_fitted(self, "model_")
        x = self.model_.initial_mean() if state is None else state
        return solve_ocp(OcpProblem(self.model_, interval, x), self.settings_, np.random.default_rng(self.seed))

    def rollouts(self, plant, episodes=100, seed=None):
        check_is_fitted(self, "model_")
        seed = self.seed if seed is None else seed
        rngs = [np.random.default_rng([seed, 3, 0, k]) for k in range(episodes)]
        return nmpc_episodes(check_plant(plant), self.model_, self.settings_, rngs, self.warm_start)

    def score(self, plant, episodes=100, seed=None):
        return float(np.mean([tr.return_ for tr in self.rollouts(plant, episodes, seed)]))

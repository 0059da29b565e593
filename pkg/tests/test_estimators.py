import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from batchrl.estimators import BatchToBatchPolicy, ReinforcePolicy, ShrinkingHorizonNMPC
from batchrl.exceptions import ConfigurationError
from batchrl.plants import make_plant


def test_get_params_and_clone():
    est = ReinforcePolicy(epochs=3, neurons=7)
    assert est.get_params()["neurons"] == 7
    other = clone(est).set_params(epochs=5)
    assert other.epochs == 5 and est.epochs == 3


def test_reinforce_fit_predict_score():
    model = make_plant("cs1-approx", substeps=4)
    est = ReinforcePolicy(epochs=2, episodes=16, neurons=5)
    with pytest.raises(NotFittedError):
        est.predict(np.zeros((1, 2)))
    est.fit(model)
    u = est.predict(np.array([[1.0, 0.0], [0.5, 0.2]]))
    assert u.shape == (2, 2) and np.all((u >= 0) & (u <= 5))
    assert len(est.history_) == 2
    assert np.isfinite(est.score(model, episodes=3))
    with pytest.raises(ConfigurationError):
        est.predict(np.zeros((1, 3)))
    with pytest.raises(ConfigurationError):
        est.fit("not a plant")


def test_reinforce_warm_start_continues_epochs():
    model = make_plant("cs1-approx", substeps=4)
    est = ReinforcePolicy(epochs=2, episodes=8, neurons=4, warm_start=True).fit(model).fit(model)
    assert [r.epoch for r in est.history_] == [1, 2, 3, 4]


def test_batch_to_batch_policy():
    est = BatchToBatchPolicy(offline_epochs=1, offline_episodes=20, online_epochs=2, online_episodes=2)
    est.fit(make_plant("cs1-approx", substeps=4), make_plant("cs1", substeps=4))
    mask = est.params_.frozen
    assert est.params_.values[mask].tobytes() == est.offline_params_.values[mask].tobytes()
    assert est.result_.online_episodes_used == 4


def test_nmpc_estimator():
    est = ShrinkingHorizonNMPC(multistarts=1, max_iterations=20)
    with pytest.raises(ConfigurationError):
        est.fit(make_plant("cs1"))
    est.fit(make_plant("cs1-approx", substeps=2))
    u = est.predict(np.array([[0.5, 0.3]]), interval=8)
    assert u.shape == (1, 2)
    assert est.solve(interval=9).controls.shape == (1, 2)

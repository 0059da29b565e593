import numpy as np
import pytest

from batchrl.exceptions import ConfigurationError
from batchrl.nmpc import NlpSettings, OcpProblem, _Objective, nmpc_episodes, projected_ascent, solve_ocp
from batchrl.plants import PlantModel, make_plant


class Quadratic:
    """Concave objective -|U - c|^2 with a known box-projected maximiser."""

    def __init__(self, c):
        self.c = c

    def value(self, U):
        return -np.sum((U - self.c) ** 2, axis=(1, 2))

    def value_and_grad(self, U):
        return self.value(U), -2 * (U - self.c)


def test_projected_ascent_finds_clipped_optimum(rng):
    c = rng.normal(size=(1, 4, 2)) * 3
    lo, hi = -np.ones((4, 2)), np.ones((4, 2))
    U0 = rng.uniform(-1, 1, size=(5, 4, 2))
    U, J, failed, _ = projected_ascent(Quadratic(c), U0, lo, hi, NlpSettings())
    np.testing.assert_allclose(U, np.broadcast_to(np.clip(c, lo, hi), U.shape), atol=1e-6)
    assert not failed.any()


def test_objective_gradient_matches_finite_differences(rng):
    model = make_plant("cs1-approx", substeps=3)
    obj = _Objective(model, 6, np.array([[0.6, 0.3]]))
    U = rng.uniform(0, 5, size=(1, 4, 2))
    _, G = obj.value_and_grad(U)
    h = 1e-6
    for idx in np.ndindex(U.shape):
        up, um = U.copy(), U.copy()
        up[idx] += h
        um[idx] -= h
        fd = (obj.value(up)[0] - obj.value(um)[0]) / (2 * h)
        assert G[idx] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_objective_matches_simulation(rng):
    model = make_plant("cs1-approx")
    U = rng.uniform(0, 5, size=(10, 2))
    _, total = model.simulate(U)
    assert _Objective(model, 0, model.initial_mean()[None]).value(U[None])[0] == pytest.approx(total, rel=1e-13)


def test_last_interval_and_empty_horizon():
    model = make_plant("cs1-approx")
    sol = solve_ocp(OcpProblem(model, 10, np.array([0.2, 0.4])))
    assert sol.controls.shape == (0, 2) and sol.objective == 0.4
    sol = solve_ocp(OcpProblem(model, 9, np.array([0.5, 0.1])), NlpSettings(multistarts=3))
    assert sol.controls.shape == (1, 2)
    assert np.all(sol.controls >= 0) and np.all(sol.controls <= 5)


def test_solution_never_worse_than_warm_start(rng):
    model = make_plant("cs1-approx", substeps=5)
    warm = rng.uniform(0, 5, size=(10, 2))
    _, warm_value = model.simulate(warm)
    sol = solve_ocp(OcpProblem(model, 0, model.initial_mean()), NlpSettings(multistarts=1, max_iterations=5),
                    rng, warm)
    assert sol.objective >= warm_value - 1e-12


def test_requires_deterministic_model():
    with pytest.raises(ConfigurationError):
        solve_ocp(OcpProblem(make_plant("cs1"), 0, np.array([1.0, 0.0])))
    with pytest.raises(ConfigurationError):
        NlpSettings(multistarts=0)
    with pytest.raises(ConfigurationError):
        OcpProblem(make_plant("cs1-approx"), 11, np.zeros(2))


def test_closed_loop_on_model_recovers_open_loop():
    # with no mismatch the closed loop reproduces the OCP value
    model = make_plant("cs1-approx", substeps=5)
    settings = NlpSettings(multistarts=2)
    opt = solve_ocp(OcpProblem(model, 0, model.initial_mean()), settings, np.random.default_rng(0))
    (tr,) = nmpc_episodes(model, model, settings, [np.random.default_rng(1)])
    assert tr.return_ == pytest.approx(opt.objective, abs=2e-3)
    assert tr.actions.shape == (10, 2)
    assert tr.snapshot == "nmpc"

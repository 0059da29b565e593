"""End-to-end acceptance checks, one test per criterion.

Each test prints and records a single PASS/FAIL line; the lines are
repeated in the pytest terminal summary.
"""

import json
import os

import numpy as np
import pytest
import yaml

from batchrl import autodiff as ad
from batchrl import policy as pol
from batchrl.cli import main, run_nmpc
from batchrl.config import RunConfig, from_dict, parse_config
from batchrl.evaluation import read_csv
from batchrl.harness import evaluate
from batchrl.integrators import euler_maruyama_step, rk4_step
from batchrl.nmpc import NlpSettings, OcpProblem, solve_ocp
from batchrl.plants import cs3_switch, make_plant
from batchrl.reinforce import TrainConfig, compute_baseline, gradient_estimate, rollout, train_epochs

from bandit import bandit_trajectories, exact_gradient, score_graph
from conftest import ACCEPTANCE_LINES


def report(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Full default CS1 pipeline through the CLI (seed 0)."""
    root = tmp_path_factory.mktemp("acceptance")
    run = str(root / "run")
    assert main(["run-pipeline", "--out", run]) == 0
    with open(os.path.join(run, "summary.json")) as fh:
        summary = json.load(fh)
    return root, run, summary


def _ckpt(run, name):
    return pol.load_checkpoint(os.path.join(run, "checkpoints", name))


def test_c01_offline_reproduction(pipeline):
    _, run, summary = pipeline
    _, rows = read_csv(os.path.join(run, "offline_progress.csv"))
    final = float(rows[-1][1])
    ok = len(rows) == 100 and int(rows[-1][-1]) == 800 and abs(final - 0.64) <= 0.03
    assert report(1, ok, f"offline epoch-{len(rows)} mean return {final:.4f} (target 0.64 +/- 0.03)")


def test_c02_ocp_cross_check(pipeline):
    _, run, summary = pipeline
    model = make_plant("cs1-approx")
    sol = solve_ocp(OcpProblem(model, 0, model.initial_mean()), NlpSettings(), np.random.default_rng(0))
    offline = _ckpt(run, "offline_100.ckpt")
    noise_free = rollout(offline, model, np.random.default_rng(0), deterministic=True, with_grad=False).return_
    ok = abs(sol.objective - 0.64) <= 0.01 and abs(noise_free - sol.objective) <= 0.03
    assert report(2, ok, f"OCP optimum {sol.objective:.5f} (0.64 +/- 0.01); "
                         f"policy noise-free return {noise_free:.5f} (within 0.03)")


def test_c03_online_adaptation(pipeline):
    _, run, summary = pipeline
    _, rows = read_csv(os.path.join(run, "online_progress.csv"))
    mean = float(rows[-1][1])
    note = summary["online_reference"]
    if mean >= 0.58:
        ok, detail = True, f"final online 25-episode mean {mean:.4f} >= 0.58"
    else:
        # the slack band is accepted only when the shortfall is documented in the run summary
        documented = note is not None and "discrepancy" in note and note["final_mean"] == mean
        ok = mean >= 0.58 - 0.05 and documented
        detail = f"final online 25-episode mean {mean:.4f} < 0.58, within slack band 0.53, documented={documented}"
    assert report(3, ok, detail)


def test_c04_rl_beats_nmpc(pipeline):
    _, run, _ = pipeline
    cfg = RunConfig()
    final = _ckpt(run, "online_004.ckpt")
    model = cfg.make("cs1-approx", substeps=cfg.nmpc.model_substeps)
    parts, ok = [], True
    for name in ("cs1", "cs2"):
        plant = cfg.make(name)
        rl, _ = evaluate(final, plant, 100, seed=0)
        mp = np.mean([tr.return_ for tr in run_nmpc(cfg, plant, model, 100)])
        ok &= rl.mean > mp
        parts.append(f"{name}: RL {rl.mean:.4f} vs NMPC {mp:.4f}")
    assert report(4, ok, "; ".join(parts) + " (100 episodes each, RL must exceed NMPC)")


def test_c05_estimator_correctness():
    theta, sigma = 1.0, 0.5
    exact = exact_gradient(theta, sigma)
    trajs = bandit_trajectories(theta, sigma, 100_000, np.random.default_rng(0))
    g = gradient_estimate(trajs, compute_baseline([t.return_ for t in trajs]))
    rel = np.abs(g - exact) / np.abs(exact)
    graph = score_graph()
    wins = 0
    rng = np.random.default_rng(1)
    for _ in range(500):
        tr = bandit_trajectories(theta, sigma, 64, rng, graph)
        J = np.array([t.return_ for t in tr])
        G = np.stack([t.grad for t in tr])
        plain = (J[:, None] * G).var(axis=0).sum()
        based = ((J - J.mean())[:, None] * G).var(axis=0).sum()
        wins += based < plain
    ok = rel.max() <= 0.05 and wins >= 475
    assert report(5, ok, f"K=1e5 max relative error {rel.max():.4f} (<= 0.05); "
                         f"baseline reduced variance in {wins}/500 replicates (>= 475)")


def _random_config(rng):
    n_s = int(rng.integers(2, 4))
    n_a = int(rng.integers(1, 3))
    lower = rng.uniform(-2, 0, n_a)
    return pol.PolicyConfig(
        n_state_inputs=n_s,
        n_actions=n_a,
        lower=lower,
        upper=lower + rng.uniform(0.5, 5, n_a),
        hidden_layers=int(rng.integers(1, 4)),
        neurons=int(rng.integers(2, 7)),
        activation=str(rng.choice(["tanh", "leaky-relu"])),
        split_networks=bool(rng.integers(0, 2)),
        history=int(rng.integers(1, 3)),
        std_scale=rng.uniform(0.2, 2, n_a) if rng.integers(0, 2) else None,
    )


def test_c06_autodiff_finite_differences():
    rng = np.random.default_rng(2024)
    worst, nets = 0.0, 0
    h = 1e-6
    for seed in range(100):
        cfg = _random_config(rng)
        params = pol.init_params(cfg, seed)
        T = int(rng.integers(1, 4))
        inputs = rng.normal(size=(T, 1, cfg.n_inputs))
        draws = rng.normal(size=(T, 1, cfg.n_actions))
        _, grad = pol.sequence_log_prob(params, inputs, draws, per_sample=False)

        def f(v):
            return pol.sequence_log_prob(params.with_values(v), inputs, draws, per_sample=False)[0][0]

        fd = np.empty(cfg.n_params)
        for i in range(cfg.n_params):
            vp, vm = params.values.copy(), params.values.copy()
            vp[i] += h
            vm[i] -= h
            fd[i] = (f(vp) - f(vm)) / (2 * h)
        # relative error per entry, floored at the gradient's own scale
        err = np.abs(grad - fd) / np.maximum(np.abs(fd), np.abs(fd).max())
        worst = max(worst, err.max())
        nets += 1
    ok = nets >= 100 and worst <= 1e-6
    assert report(6, ok, f"{nets} random recurrent networks, worst relative gradient error {worst:.2e} (<= 1e-6)")


def test_c07_integrators():
    def err(n):
        return abs(rk4_step(lambda y, u: -y, np.array([1.0]), None, 1.0, n)[0] - np.exp(-1.0))

    ratio = err(10) / err(20)
    theta, sig, n = 1.0, 0.5, 200
    x = euler_maruyama_step(lambda y, u: -theta * y, lambda y, u: sig, np.zeros(100_000), None, 1.0, n,
                            np.random.default_rng(11))
    h = 1.0 / n
    exact = sig**2 * h * np.sum((1 - theta * h) ** (2 * np.arange(n)))
    rel = abs(x.var() / exact - 1)
    ok = 12 <= ratio <= 20 and rel <= 0.05
    assert report(7, ok, f"RK4 halving ratio {ratio:.2f} (in [12, 20]); EM variance error {rel:.4f} over 1e5 paths (<= 0.05)")


def _cs3_train(du_weights):
    model = make_plant("cs3-approx", du_weights=du_weights)
    params = pol.init_params(pol.config_for_plant(model), 0)
    return train_epochs(params, model, TrainConfig(epochs=100, episodes=200, learning_rate=1e-3, seed=0))


def test_c08_case_study_3(tmp_path):
    # (a) offline trend
    params, reps, _ = _cs3_train((3.125e-8, 3.125e-6))
    r = np.array([x.mean for x in reps])
    ma = np.convolve(r, np.ones(20) / 20, "valid")
    a = bool(np.all(np.diff(ma) >= 0))
    # (b) gate closed -> product unchanged
    model = make_plant("cs3-approx")
    rng = np.random.default_rng(0)
    closed = np.column_stack([rng.uniform(0, 30, 2000), rng.uniform(0, 1000, 2000), rng.uniform(0, 1, 2000)])
    closed = closed[~cs3_switch(closed[:, 1], closed[:, 0])]
    U = np.column_stack([rng.uniform(120, 400, len(closed)), rng.uniform(0, 40, len(closed))])
    b = bool(np.all(model.derivative(closed, U)[:, 2] == 0.0))
    x = np.array([1.0, 150.0, 0.0])
    for t in range(model.intervals):
        nxt, _ = model.step(x, np.array([250.0, 20.0]), t)
        if nxt[0] < 10:
            b &= nxt[2] == x[2]
        x = nxt
    # (c) penalty ablation
    plant = make_plant("cs3")
    span = plant.upper - plant.lower

    def variation(p):
        _, trajs = evaluate(p, plant, 100, seed=0)
        return np.mean([np.sum(np.abs(np.diff(t.actions, axis=0)) / span) for t in trajs])

    free, _, _ = _cs3_train((0.0, 0.0))
    v_pen, v_free = variation(params), variation(free)
    c = v_pen < v_free
    # (d) Table 1 round trip through a config file
    table = {"u_m": 0.0572, "u_d": 0.0, "K_N": 393.1, "Y_NX": 504.1, "k_m": 0.00016, "k_d": 0.281,
             "k_s": 178.9, "k_i": 447.1, "k_sq": 23.51, "k_iq": 800.0, "K_NP": 16.89}
    path = tmp_path / "cs3.yaml"
    path.write_text(yaml.safe_dump({"plant": "cs3", "cs3": {"kinetics": table}}))
    cfg = parse_config(str(path))
    again = from_dict(yaml.safe_load(yaml.safe_dump(cfg.as_dict())))
    d = cfg.make("cs3").params.as_dict() == table == again.cs3.kinetics == RunConfig().cs3.kinetics
    ok = a and b and c and d
    assert report(8, ok, f"(a) 20-epoch moving average nondecreasing={a} (min step {np.diff(ma).min():.2e}); "
                         f"(b) gate={b}; (c) variation {v_pen:.3f} with penalty vs {v_free:.3f} without; (d) table={d}")


def test_c09_transfer_learning_audit(pipeline):
    _, run, summary = pipeline
    offline = _ckpt(run, "offline_100.ckpt")
    online = [_ckpt(run, f"online_{k:03d}.ckpt") for k in range(5)]
    mask = online[0].frozen
    frozen_ok = all(p.values[mask].tobytes() == offline.values[mask].tobytes() for p in online)
    moved = online[-1].values[~mask].tobytes() != offline.values[~mask].tobytes()
    _, rows = read_csv(os.path.join(run, "online_progress.csv"))
    per_epoch = [int(r[-1]) for r in rows]
    used = summary["online_episodes_used"]
    ok = frozen_ok and moved and used == 100 and per_epoch == [25] * 4
    assert report(9, ok, f"frozen slots bit-identical={frozen_ok} over {len(online)} checkpoints; "
                         f"true-plant episodes {used} (4 x 25 = 100)")


def test_c10_determinism(pipeline):
    root, run, _ = pipeline
    other = str(root / "again")
    assert main(["run-pipeline", "--out", other]) == 0
    files = sorted(f for f in os.listdir(run) if f.endswith(".csv"))
    files += sorted(os.path.join("checkpoints", f) for f in os.listdir(os.path.join(run, "checkpoints")))
    differing = []
    for f in files:
        with open(os.path.join(run, f), "rb") as a, open(os.path.join(other, f), "rb") as b:
            if a.read() != b.read():
                differing.append(f)
    ok = not differing and len(files) > 100
    assert report(10, ok, f"{len(files)} CSV and checkpoint files compared, {len(differing)} differ")

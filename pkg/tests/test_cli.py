import hashlib
import os

import pytest

from batchrl import evaluation as ev
from batchrl.cli import main

SMALL = """\
substeps: 4
offline: {epochs: 3, episodes: 40}
online: {epochs: 2, episodes: 4}
evaluate: {episodes: 6}
nmpc: {episodes: 2, multistarts: 1, max_iterations: 30, model_substeps: 2}
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return str(p)


def tree_digest(path):
    h = hashlib.sha1()
    for root, _, files in sorted(os.walk(path)):
        for f in sorted(files):
            full = os.path.join(root, f)
            h.update(full.encode())
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def test_pipeline_evaluate_nmpc_and_plots(tmp_path, config, capsys):
    run, nm, ev_run, plots = (str(tmp_path / n) for n in ("run", "nmpc", "eval", "plots"))
    assert main(["run-pipeline", "--config", config, "--out", run, "--seed", "3"]) == 0
    for name in ("config.yaml", "offline_progress.csv", "online_progress.csv", "eval_returns.csv",
                 "eval_episodes.csv", "summary.json", "manifest.json", "checkpoints/online_002.ckpt"):
        assert os.path.isfile(os.path.join(run, name)), name
    before = tree_digest(run)
    assert main(["nmpc-eval", "--config", config, "--out", nm, "--episodes", "2"]) == 0
    assert main(["evaluate", "--config", config, "--run", run, "--out", ev_run, "--plant", "cs2"]) == 0
    assert main(["emit-plots", "--run", run, nm, "--out", plots]) == 0
    assert tree_digest(run) == before

    _, rows = ev.read_csv(os.path.join(plots, "reward_per_epoch.csv"))
    assert len(rows) == 3 + 2
    assert [r[0] for r in rows] == ["offline"] * 3 + ["online"] * 2
    header, _ = ev.read_csv(os.path.join(plots, "rl_states_band.csv"))
    assert header == ["time", "x0_mean", "x0_p2", "x0_p98", "x1_mean", "x1_p2", "x1_p98"]
    header, rows = ev.read_csv(os.path.join(plots, "overlay_controls.csv"))
    assert header[0] == "method"
    rl = [r[1] for r in rows if r[0] == "rl"]
    mp = [r[1] for r in rows if r[0] == "nmpc"]
    assert rl == mp and len(rl) == 10
    assert os.path.isfile(os.path.join(plots, "README.txt"))


def test_csv_outputs_byte_identical(tmp_path, config):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["run-pipeline", "--config", config, "--out", a]) == 0
    assert main(["run-pipeline", "--config", config, "--out", b]) == 0
    names = sorted(f for f in os.listdir(a) if f.endswith(".csv"))
    assert names
    for f in names + sorted("checkpoints/" + c for c in os.listdir(os.path.join(a, "checkpoints"))):
        with open(os.path.join(a, f), "rb") as fa, open(os.path.join(b, f), "rb") as fb:
            assert fa.read() == fb.read(), f


def test_train_then_adapt(tmp_path, config):
    off, on = str(tmp_path / "off"), str(tmp_path / "on")
    assert main(["train-offline", "--config", config, "--out", off]) == 0
    assert main(["adapt-online", "--config", config, "--run", off, "--out", on]) == 0
    _, rows = ev.read_csv(os.path.join(on, "online_progress.csv"))
    assert len(rows) == 2 and all(r[-1] == "4" for r in rows)


def test_exit_codes(tmp_path, config, capsys):
    out = str(tmp_path / "x")
    assert main(["evaluate", "--out", out]) == 2  # no checkpoint
    assert main(["run-pipeline", "--config", str(tmp_path / "missing.yaml"), "--out", out]) == 2
    assert main(["nmpc-eval", "--out", out, "--episodes", "0"]) == 2
    assert main(["bogus"]) == 2
    assert main(["emit-plots", "--run", str(tmp_path), "--out", out]) == 2
    used = tmp_path / "used"
    used.mkdir()
    (used / "f").write_text("x")
    assert main(["run-pipeline", "--config", config, "--out", str(used)]) == 2
    assert (used / "f").read_text() == "x"


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("plant: cs3\nsubsteps: 2\noffline: {epochs: 1, episodes: 20}\n"
                   "online: {epochs: 1, episodes: 2}\ncs3: {kinetics: {u_m: 1.0e+30}}\n")
    out = tmp_path / "r"
    assert main(["train-offline", "--config", str(cfg), "--out", str(out)]) == 3
    assert not (out / "manifest.json").exists()

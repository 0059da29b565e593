"""Monte-Carlo evaluation, run directories and plot-data emission."""

import datetime
import hashlib
import json
import os

import numpy as np

from . import evaluation as ev
from .exceptions import ConfigurationError
from .reinforce import collect, episode_rngs

EVAL_STREAM = 2
NMPC_STREAM = 3
MANIFEST = "manifest.json"


def evaluate(params, plant, episodes, seed=0, threads=1, deterministic=False, stream=EVAL_STREAM):
    """Fixed-policy rollouts; returns ``(EvalReport, trajectories)``."""
    if episodes < 1:
        raise ConfigurationError("evaluation needs at least one episode")
    rngs = episode_rngs(seed, stream, 0, episodes)
    trajs = collect(params, plant, rngs, threads=threads, deterministic=deterministic, with_grad=False)
    return ev.summarize([tr.return_ for tr in trajs]), trajs


def write_returns_csv(path, trajectories):
    ev.write_csv(path, ["episode", "return"], [[k, float(tr.return_)] for k, tr in enumerate(trajectories)])


def blob_hash(path):
    """Content hash computed the way git hashes a blob."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class RunDirectory:
    """Single writer for one run; the manifest is written last by :meth:`close`."""

    def __init__(self, path, command, config):
        self.path = ev.ensure_new_dir(path)
        self.command = command
        self.config = config
        self.started = now()

    def file(self, *parts):
        p = os.path.join(self.path, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def write_json(self, name, obj):
        with open(self.file(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def close(self):
        artifacts = {}
        for root, _, files in os.walk(self.path):
            for f in files:
                full = os.path.join(root, f)
                rel = os.path.relpath(full, self.path).replace(os.sep, "/")
                if rel != MANIFEST:
                    artifacts[rel] = blob_hash(full)
        ident = hashlib.sha1(json.dumps(artifacts, sort_keys=True).encode()).hexdigest()[:12]
        self.write_json(
            MANIFEST,
            {
                "run_id": f"{self.command}-{ident}",
                "command": self.command,
                "config": self.config.as_dict(),
                "artifacts": dict(sorted(artifacts.items())),
                "started": self.started,
                "finished": now(),
            },
        )


def load_manifest(run_dir):
    path = os.path.join(run_dir, MANIFEST)
    if not os.path.isfile(path):
        raise ConfigurationError(f"{run_dir} has no {MANIFEST}; the run is incomplete")
    with open(path) as fh:
        return json.load(fh)


def episodes_from_csv(path):
    """``(times, states (E,T+1,n), actions (E,T,m))`` from an episodes CSV."""
    cols = ev.load_episodes_csv(path)
    ep = cols["episode"].astype(int)
    E = ep.max() + 1
    T1 = int(cols["interval"].max()) + 1
    xs = sorted((k for k in cols if k.startswith("x")), key=lambda k: int(k[1:]))
    us = sorted((k for k in cols if k.startswith("u")), key=lambda k: int(k[1:]))
    states = np.stack([cols[k] for k in xs], axis=-1).reshape(E, T1, -1)
    actions = np.stack([cols[k] for k in us], axis=-1).reshape(E, T1, -1)[:, :-1]
    times = cols["time"].reshape(E, T1)[0]
    return times, states, actions


def _band_rows(times, stats):
    mean, lo, hi = stats
    return [[float(times[t])] + [float(a[t, i]) for i in range(mean.shape[1]) for a in (mean, lo, hi)]
            for t in range(mean.shape[0])]


def _band_header(prefix, n):
    cols = ["time"]
    for i in range(n):
        cols += [f"{prefix}{i}_mean", f"{prefix}{i}_p2", f"{prefix}{i}_p98"]
    return cols


PLOT_README = """Plot data files (CSV, header row, 17 significant digits)

reward_per_epoch.csv   phase, epoch, step, mean_return, std_return, p2_return, p98_return
                       one row per offline epoch followed by one per online epoch;
                       step counts epochs across both phases
<tag>_states_band.csv  time, then x<i>_mean, x<i>_p2, x<i>_p98 for every state i
<tag>_controls_band.csv time (interval start), then u<i>_mean, u<i>_p2, u<i>_p98
overlay_states.csv     method, then the state band columns; method is rl or nmpc
overlay_controls.csv   method, then the control band columns
returns_summary.csv    method, mean, std, p2, p98, episodes

<tag> is rl for policy evaluation episodes and nmpc for NMPC episodes.
Percentiles use linear interpolation between order statistics.
"""


def emit_plot_data(run_dirs, out_dir):
    """Write plot-ready CSV files for completed runs into a new ``out_dir``."""
    if isinstance(run_dirs, str):
        run_dirs = [run_dirs]
    for d in run_dirs:
        load_manifest(d)
    ev.ensure_new_dir(out_dir)
    written = []

    def out(name):
        written.append(name)
        return os.path.join(out_dir, name)

    rows = []
    for d in run_dirs:
        for phase in ("offline", "online"):
            p = os.path.join(d, f"{phase}_progress.csv")
            if os.path.isfile(p):
                header, data = ev.read_csv(p)
                idx = {h: i for i, h in enumerate(header)}
                for r in data:
                    rows.append([phase, int(r[idx["epoch"]])] + [r[idx[c]] for c in
                                ("mean_return", "std_return", "p2_return", "p98_return")])
    if rows:
        rows = [[r[0], r[1], i + 1] + r[2:] for i, r in enumerate(rows)]
        ev.write_csv(out("reward_per_epoch.csv"),
                     ["phase", "epoch", "step", "mean_return", "std_return", "p2_return", "p98_return"], rows)

    bands, summaries = {}, []
    for d in run_dirs:
        for tag, fname, rname in (("rl", "eval_episodes.csv", "eval_returns.csv"),
                                  ("nmpc", "nmpc_episodes.csv", "nmpc_returns.csv")):
            p = os.path.join(d, fname)
            if not os.path.isfile(p) or tag in bands:
                continue
            times, S, A = episodes_from_csv(p)
            sb, ab = ev.band(S), ev.band(A)
            bands[tag] = (times, sb, ab)
            ev.write_csv(out(f"{tag}_states_band.csv"), _band_header("x", S.shape[2]), _band_rows(times, sb))
            ev.write_csv(out(f"{tag}_controls_band.csv"), _band_header("u", A.shape[2]),
                         _band_rows(times[:-1], ab))
            _, ret = ev.read_csv(os.path.join(d, rname))
            s = ev.summarize([float(r[1]) for r in ret])
            summaries.append([tag, s.mean, s.std, s.p2, s.p98, s.episodes])
    if summaries:
        ev.write_csv(out("returns_summary.csv"), ["method", "mean", "std", "p2", "p98", "episodes"], summaries)
    if "rl" in bands and "nmpc" in bands:
        t_rl, t_mp = bands["rl"][0], bands["nmpc"][0]
        if t_rl.shape != t_mp.shape or not np.allclose(t_rl, t_mp):
            raise ConfigurationError("RL and NMPC runs use different time grids")
        for kind, j, prefix in (("states", 1, "x"), ("controls", 2, "u")):
            n = bands["rl"][j][0].shape[1]
            times = t_rl if kind == "states" else t_rl[:-1]
            rows = [[tag] + r for tag in ("rl", "nmpc") for r in _band_rows(times, bands[tag][j])]
            ev.write_csv(out(f"overlay_{kind}.csv"), ["method"] + _band_header(prefix, n), rows)
    with open(out("README.txt"), "w") as fh:
        fh.write(PLOT_README)
    return written

"""Monte-Carlo evaluation statistics and CSV/plot-data emission."""

import csv
import os
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ConfigurationError

PERCENTILES = (2.0, 98.0)


def fmt(x):
    """17 significant digits, the single float format used in every CSV."""
    return format(float(x), ".17g")


@dataclass
class EvalReport:
    mean: float
    std: float
    p2: float
    p98: float
    episodes: int

    def as_dict(self):
        return asdict(self)


def summarize(returns):
    """Mean, population std and linearly interpolated 2nd/98th percentiles."""
    r = np.asarray(returns, dtype=np.float64).ravel()
    if r.size == 0:
        raise ConfigurationError("cannot summarise an empty sample")
    p2, p98 = np.percentile(r, PERCENTILES, method="linear")
    return EvalReport(float(r.mean()), float(r.std()), float(p2), float(p98), int(r.size))


def band(samples, axis=0):
    """Mean, 2nd and 98th percentile along ``axis``."""
    s = np.asarray(samples, dtype=np.float64)
    lo, hi = np.percentile(s, PERCENTILES, axis=axis, method="linear")
    return s.mean(axis=axis), lo, hi


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_episodes_csv(path, trajectories):
    """One row per (episode, interval): states, actions and rewards."""
    t0 = trajectories[0]
    n_s = t0.states.shape[1]
    n_a = t0.actions.shape[1]
    header = (
        ["episode", "interval", "time"]
        + [f"x{i}" for i in range(n_s)]
        + [f"u{i}" for i in range(n_a)]
        + ["reward", "return"]
    )
    rows = []
    for k, tr in enumerate(trajectories):
        T = tr.actions.shape[0]
        for t in range(T + 1):
            u = tr.actions[t] if t < T else np.full(n_a, np.nan)
            rows.append(
                [k, t, float(tr.times[t])]
                + [float(v) for v in tr.states[t]]
                + [float(v) for v in u]
                + [float(tr.rewards[t]), float(tr.return_)]
            )
    write_csv(path, header, rows)


def load_episodes_csv(path):
    """Inverse of :func:`write_episodes_csv` as arrays keyed by column."""
    header, rows = read_csv(path)
    data = np.array([[float(v) for v in r] for r in rows])
    return {name: data[:, i] for i, name in enumerate(header)}


def trajectory_bands(trajectories):
    """Per-time mean/p2/p98 of states and controls across episodes."""
    times = trajectories[0].times
    states = np.stack([tr.states for tr in trajectories])
    actions = np.stack([tr.actions for tr in trajectories])
    return times, band(states), band(actions)


def write_band_csv(path, times, stats, names):
    mean, lo, hi = stats
    header = ["time"]
    for n in names:
        header += [f"{n}_mean", f"{n}_p2", f"{n}_p98"]
    rows = []
    for t in range(mean.shape[0]):
        row = [float(times[t])]
        for i in range(len(names)):
            row += [float(mean[t, i]), float(lo[t, i]), float(hi[t, i])]
        rows.append(row)
    write_csv(path, header, rows)


def ensure_new_dir(path):
    """Create ``path``; refuse to reuse a non-empty directory."""
    if os.path.exists(path) and (not os.path.isdir(path) or os.listdir(path)):
        raise ConfigurationError(f"refusing to overwrite existing run directory {path}")
    os.makedirs(path, exist_ok=True)
    return path

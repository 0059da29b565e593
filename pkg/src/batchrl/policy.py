"""Recurrent Gaussian policy network.

Each network maps the augmented input (scaled measured state, normalised
previous action, time fraction) through one recurrent hidden layer and
further feedforward layers to the raw mean and standard deviation of a
diagonal Gaussian.  The mean is squashed into the action bounds with a
sigmoid; the standard deviation goes through softplus plus a small floor.

Parameters live in one flat float64 vector.  Layers are numbered from 0 (the
recurrent layer) to ``hidden_layers`` (the output layer), and the flat
vector is laid out layer-major so every layer occupies a contiguous slice.
"""

import functools
import hashlib
import json
import threading
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .exceptions import ConfigurationError, GraphStateError

STD_FLOOR = 1e-6
ACTIVATIONS = ("tanh", "leaky-relu")
CHECKPOINT_MAGIC = "batchrl-policy"


def _tuple(x):
    return None if x is None else tuple(float(v) for v in x)


@dataclass(frozen=True)
class PolicyConfig:
    n_state_inputs: int
    n_actions: int
    lower: tuple
    upper: tuple
    hidden_layers: int = 2
    neurons: int = 20
    activation: str = "tanh"
    split_networks: bool = True
    history: int = 1
    state_scale: tuple = None
    std_scale: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "lower", _tuple(self.lower))
        object.__setattr__(self, "upper", _tuple(self.upper))
        object.__setattr__(self, "state_scale", _tuple(self.state_scale))
        object.__setattr__(self, "std_scale", _tuple(self.std_scale))
        if self.n_state_inputs < 1 or self.n_actions < 1:
            raise ConfigurationError("policy needs at least one state input and one action")
        if self.hidden_layers < 1 or self.neurons < 1:
            raise ConfigurationError("hidden_layers and neurons must be >= 1")
        if self.history < 1:
            raise ConfigurationError("history must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}")
        if len(self.lower) != self.n_actions or len(self.upper) != self.n_actions:
            raise ConfigurationError("bounds must have one entry per action")
        if not all(lo < hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigurationError("lower bounds must be strictly below upper bounds")
        if self.state_scale is not None and len(self.state_scale) != self.n_state_inputs:
            raise ConfigurationError("state_scale must have one entry per state")
        if self.std_scale is not None and len(self.std_scale) != self.n_actions:
            raise ConfigurationError("std_scale must have one entry per action")

    @property
    def n_nets(self):
        return self.n_actions if self.split_networks else 1

    @property
    def net_outputs(self):
        return 1 if self.split_networks else self.n_actions

    @property
    def n_inputs(self):
        return self.history * (self.n_state_inputs + self.n_actions) + 1

    @property
    def hidden_size(self):
        return self.n_nets * self.neurons

    @property
    def output_layer(self):
        return self.hidden_layers

    def as_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @functools.cached_property
    def layout(self):
        """``(layer, net, name, shape, offset)`` for every parameter array."""
        entries = []
        offset = 0
        H = self.neurons
        for layer in range(self.hidden_layers + 1):
            for net in range(self.n_nets):
                if layer == 0:
                    shapes = [("W_in", (H, self.n_inputs)), ("W_rec", (H, H)), ("b", (H,))]
                elif layer < self.hidden_layers:
                    shapes = [("W", (H, H)), ("b", (H,))]
                else:
                    k = 2 * self.net_outputs
                    shapes = [("W", (k, H)), ("b", (k,))]
                for name, shape in shapes:
                    entries.append((layer, net, name, shape, offset))
                    offset += int(np.prod(shape))
        return tuple(entries)

    @property
    def n_params(self):
        layer, net, name, shape, offset = self.layout[-1]
        return offset + int(np.prod(shape))

    def layer_slice(self, layer):
        items = [(off, int(np.prod(shape))) for lay, _, _, shape, off in self.layout if lay == layer]
        if not items:
            raise ConfigurationError(f"no layer {layer}")
        return slice(items[0][0], items[-1][0] + items[-1][1])


@dataclass
class PolicyParams:
    """Flat parameter vector plus the set of layers an optimiser may change."""

    config: PolicyConfig
    values: np.ndarray
    trainable_layers: frozenset = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.config.n_params,):
            raise ConfigurationError(
                f"expected {self.config.n_params} parameters, got shape {self.values.shape}"
            )
        all_layers = frozenset(range(self.config.hidden_layers + 1))
        if self.trainable_layers is None:
            self.trainable_layers = all_layers
        self.trainable_layers = frozenset(int(i) for i in self.trainable_layers)
        if not self.trainable_layers <= all_layers:
            raise ConfigurationError(f"invalid layer indices {sorted(self.trainable_layers - all_layers)}")

    @property
    def frozen(self):
        mask = np.ones(self.config.n_params, dtype=bool)
        for layer in self.trainable_layers:
            mask[self.config.layer_slice(layer)] = False
        return mask

    def arrays(self):
        """Nested ``[net][layer] -> {name: view}`` of the flat vector."""
        cfg = self.config
        nets = [[{} for _ in range(cfg.hidden_layers + 1)] for _ in range(cfg.n_nets)]
        for layer, net, name, shape, off in cfg.layout:
            nets[net][layer][name] = self.values[off : off + int(np.prod(shape))].reshape(shape)
        return nets

    def copy(self):
        return PolicyParams(self.config, self.values.copy(), self.trainable_layers)

    def with_values(self, values):
        return PolicyParams(self.config, values, self.trainable_layers)

    @property
    def snapshot_id(self):
        return hashlib.sha1(self.values.tobytes()).hexdigest()[:16]


@dataclass
class Observation:
    """Network input for one step; arrays may carry a leading batch axis.

    ``state`` and ``previous_action`` hold ``history`` stacked entries,
    newest first.
    """

    state: np.ndarray
    previous_action: np.ndarray
    hidden: np.ndarray
    time_fraction: np.ndarray = field(default_factory=lambda: np.float64(0.0))


def init_params(config, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    rng = np.random.default_rng(seed)
    values = np.empty(config.n_params)
    for layer, net, name, shape, off in config.layout:
        if layer == 0:
            fan_in = config.n_inputs + config.neurons
        else:
            fan_in = config.neurons
        bound = 1.0 / np.sqrt(fan_in)
        n = int(np.prod(shape))
        values[off : off + n] = rng.uniform(-bound, bound, n)
    return PolicyParams(config, values)


def zero_params(config):
    return PolicyParams(config, np.zeros(config.n_params))


def initial_hidden(config, batch=None):
    shape = (config.hidden_size,) if batch is None else (batch, config.hidden_size)
    return np.zeros(shape)


def encode_input(config, obs):
    """Concatenate the scaled state, normalised previous action and time."""
    lo = np.asarray(config.lower)
    hi = np.asarray(config.upper)
    state = np.asarray(obs.state, dtype=np.float64)
    prev = np.asarray(obs.previous_action, dtype=np.float64)
    n_s, n_a, hist = config.n_state_inputs, config.n_actions, config.history
    if state.shape[-1] != hist * n_s or prev.shape[-1] != hist * n_a:
        raise ConfigurationError(
            f"observation expects {hist * n_s} state and {hist * n_a} action entries, "
            f"got {state.shape[-1]} and {prev.shape[-1]}"
        )
    if config.state_scale is not None:
        state = state / np.tile(config.state_scale, hist)
    prev = (prev - np.tile(lo, hist)) / np.tile(hi - lo, hist)
    batch = np.broadcast_shapes(state.shape[:-1], prev.shape[:-1], np.shape(obs.time_fraction))
    tf = np.broadcast_to(np.asarray(obs.time_fraction, dtype=np.float64), batch)[..., None]
    state = np.broadcast_to(state, batch + state.shape[-1:])
    prev = np.broadcast_to(prev, batch + prev.shape[-1:])
    return np.concatenate([state, prev, tf], axis=-1)


def _activation(config):
    return ad.tanh if config.activation == "tanh" else ad.leaky_relu


def _net_step(config, weights, x, hiddens):
    """One recurrent step for every network.

    ``weights[net][layer]`` maps names to arrays or graph Vars; ``hiddens``
    is one recurrent state per network.  Works numerically and symbolically.
    """
    act = _activation(config)
    lo = np.asarray(config.lower)
    span = np.asarray(config.upper) - lo
    std_scale = np.ones(config.n_actions) if config.std_scale is None else np.asarray(config.std_scale)
    mean_raw, std_raw, new_h = [], [], []
    k = config.net_outputs
    for net in range(config.n_nets):
        w = weights[net]
        h = act(ad.linear(x, w[0]["W_in"]) + ad.linear(hiddens[net], w[0]["W_rec"]) + w[0]["b"])
        new_h.append(h)
        for layer in range(1, config.hidden_layers):
            h = act(ad.linear(h, w[layer]["W"]) + w[layer]["b"])
        out = ad.linear(h, w[config.hidden_layers]["W"]) + w[config.hidden_layers]["b"]
        for i in range(k):
            mean_raw.append(out[..., i])
            std_raw.append(out[..., k + i])
    mean = lo + span * ad.sigmoid(ad.stack(mean_raw))
    std = std_scale * (ad.softplus(ad.stack(std_raw)) + STD_FLOOR)
    return mean, std, new_h


def _split_hidden(config, hidden):
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.shape[-1] != config.hidden_size:
        raise ConfigurationError(
            f"hidden state must have {config.hidden_size} entries, got {hidden.shape[-1]}"
        )
    H = config.neurons
    return [hidden[..., i * H : (i + 1) * H] for i in range(config.n_nets)]


def policy_forward(params, obs):
    """Mean, standard deviation and next hidden state for an observation."""
    cfg = params.config
    x = encode_input(cfg, obs)
    mean, std, new_h = _net_step(cfg, params.arrays(), x, _split_hidden(cfg, obs.hidden))
    return mean, std, np.concatenate(new_h, axis=-1)


def _rows(rng, n_rows):
    if isinstance(rng, np.random.Generator):
        return None
    rngs = list(rng)
    if len(rngs) != n_rows:
        raise ConfigurationError(f"{n_rows} rows but {len(rngs)} generators")
    return rngs


def sample_action(mean, std, rng, lower=None, upper=None):
    """Draw ``mean + std * z`` and clip it to the bounds.

    Returns ``(action, draw)``; the unclipped draw is what the log-density
    must be evaluated at.  ``rng`` is a Generator or one Generator per row.
    """
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.ndim == 2 and not isinstance(rng, np.random.Generator):
        rngs = _rows(rng, mean.shape[0])
        z = np.stack([r.standard_normal(mean.shape[1]) for r in rngs])
    else:
        z = rng.standard_normal(mean.shape)
    draw = mean + std * z
    action = draw
    if lower is not None or upper is not None:
        action = np.clip(draw, lower, upper)
    return action, draw


def _build_graph(config, steps, with_hidden_input):
    g = ad.Graph()
    weights = [[{} for _ in range(config.hidden_layers + 1)] for _ in range(config.n_nets)]
    for layer, net, name, shape, off in config.layout:
        weights[net][layer][name] = g.param()
    if with_hidden_input:
        hiddens = [g.input() for _ in range(config.n_nets)]
    else:
        hiddens = [np.zeros(config.neurons)] * config.n_nets
    total = None
    for _ in range(steps):
        x = g.input()
        draw = g.input()
        mean, std, hiddens = _net_step(config, weights, x, hiddens)
        lp = ad.gaussian_log_density(draw, mean, std)
        total = lp if total is None else total + lp
    g.output(total)
    return g


_graphs = threading.local()


def sequence_graph(config, steps, with_hidden_input=False):
    """Unrolled graph summing log-densities over ``steps`` recurrent steps.

    Graphs hold node values, so the cache is per thread.
    """
    cache = getattr(_graphs, "cache", None)
    if cache is None:
        cache = _graphs.cache = {}
    key = (config, steps, with_hidden_input)
    if key not in cache:
        cache[key] = _build_graph(config, steps, with_hidden_input)
    return cache[key]


def _param_list(params):
    cfg = params.config
    return [params.values[off : off + int(np.prod(shape))].reshape(shape) for _, _, _, shape, off in cfg.layout]


def _flatten_grads(grads, per_sample):
    if per_sample:
        return np.concatenate([g.reshape(g.shape[0], -1) for g in grads], axis=1)
    return np.concatenate([g.ravel() for g in grads])


def sequence_log_prob(params, inputs, draws, per_sample=True):
    """Summed log-density of an episode and its gradient.

    ``inputs`` is (T, B, n_inputs) of encoded network inputs and ``draws``
    (T, B, n_actions) of pre-clip draws; the recurrent state starts at zero
    and is recomputed through the graph, so the gradient includes the
    recurrent path.  Frozen parameter slots get exactly zero.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    draws = np.asarray(draws, dtype=np.float64)
    steps = inputs.shape[0]
    g = sequence_graph(params.config, steps)
    feed = []
    for t in range(steps):
        feed += [inputs[t], draws[t]]
    (value,) = g.forward(feed, _param_list(params))
    grad = _flatten_grads(g.backward(0, per_sample=per_sample), per_sample)
    grad[..., params.frozen] = 0.0
    return value, grad


def log_prob(params, obs, drawn_action):
    """Log-density of one recorded draw and its gradient over unfrozen slots.

    A batched observation gives per-sample values and gradients.
    """
    if drawn_action is None:
        raise GraphStateError("no recorded draw to evaluate")
    cfg = params.config
    x = encode_input(cfg, obs)
    draw = np.asarray(drawn_action, dtype=np.float64)
    hiddens = _split_hidden(cfg, obs.hidden)
    single = x.ndim == 1
    if single:
        x, draw = x[None], draw[None]
        hiddens = [h[None] for h in hiddens]
    else:
        hiddens = [np.broadcast_to(h, x.shape[:1] + h.shape[-1:]) for h in hiddens]
    g = sequence_graph(cfg, 1, with_hidden_input=True)
    (value,) = g.forward(hiddens + [x, draw], _param_list(params))
    grad = _flatten_grads(g.backward(0, per_sample=True), True)
    grad[:, params.frozen] = 0.0
    if single:
        return float(value[0]), grad[0]
    return value, grad


def apply_freeze(params, layers_to_train):
    """Copy of ``params`` where only ``layers_to_train`` may be updated."""
    layers = frozenset(int(i) for i in layers_to_train)
    if not layers:
        raise ConfigurationError("at least one layer must stay trainable")
    return PolicyParams(params.config, params.values.copy(), layers)


def default_trainable_layers(config):
    """Last hidden layer and the output layer."""
    return frozenset({config.hidden_layers - 1, config.hidden_layers})


def save_checkpoint(params, path):
    """Text checkpoint: a JSON header line, then one line per layer."""
    cfg = params.config
    header = {"config": cfg.as_dict(), "trainable_layers": sorted(params.trainable_layers)}
    lines = [f"# {CHECKPOINT_MAGIC} " + json.dumps(header, sort_keys=True)]
    for layer in range(cfg.hidden_layers + 1):
        seg = params.values[cfg.layer_slice(layer)]
        lines.append(" ".join(format(v, ".17g") for v in seg))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    prefix = f"# {CHECKPOINT_MAGIC} "
    if not lines or not lines[0].startswith(prefix):
        raise ConfigurationError(f"{path} is not a policy checkpoint")
    header = json.loads(lines[0][len(prefix) :])
    cfg = PolicyConfig.from_dict(header["config"])
    if len(lines) - 1 != cfg.hidden_layers + 1:
        raise ConfigurationError(f"{path}: expected {cfg.hidden_layers + 1} layer lines")
    values = np.empty(cfg.n_params)
    for layer, line in enumerate(lines[1:]):
        seg = np.array([float(v) for v in line.split()])
        sl = cfg.layer_slice(layer)
        if seg.size != sl.stop - sl.start:
            raise ConfigurationError(f"{path}: layer {layer} has {seg.size} values")
        values[sl] = seg
    return PolicyParams(cfg, values, header["trainable_layers"])


def config_for_plant(plant, **overrides):
    """Default architecture for a plant: split tanh nets for two-state plants,
    one unified leaky-ReLU net for the phycocyanin model."""
    if plant.n_states == 3:
        kw = dict(
            hidden_layers=4,
            activation="leaky-relu",
            split_networks=False,
            state_scale=(10.0, 500.0, 0.01),
            std_scale=tuple(0.1 * (np.asarray(plant.upper) - np.asarray(plant.lower))),
        )
    else:
        kw = dict(hidden_layers=2, activation="tanh", split_networks=True)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return PolicyConfig(
        n_state_inputs=plant.n_states,
        n_actions=plant.n_controls,
        lower=tuple(plant.lower),
        upper=tuple(plant.upper),
        **kw,
    )


__all__ = [
    "Observation",
    "PolicyConfig",
    "PolicyParams",
    "apply_freeze",
    "config_for_plant",
    "default_trainable_layers",
    "encode_input",
    "init_params",
    "initial_hidden",
    "load_checkpoint",
    "log_prob",
    "policy_forward",
    "sample_action",
    "save_checkpoint",
    "sequence_log_prob",
    "zero_params",
]

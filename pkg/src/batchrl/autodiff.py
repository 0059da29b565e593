"""Reverse-mode differentiation over small static computation graphs.

A :class:`Graph` is built symbolically through :class:`Var` handles (operator
overloading plus the module-level functions below), then evaluated with
:func:`forward` and differentiated with :func:`backward`.  Node values are
float64 arrays.  Nodes created from batched inputs carry a leading batch axis;
parameters are unbatched by default, and ``backward(per_sample=True)`` keeps
the batch axis on their gradients instead of summing over it.

The same functions accept plain numpy arrays, so model code such as plant
dynamics can be written once and run either numerically or on a graph.
"""

import math

import numpy as np

from .exceptions import ConfigurationError, DomainError, GraphStateError

LOG_2PI = math.log(2.0 * math.pi)
LEAKY_SLOPE = 0.01


def _unbroadcast(g, shape):
    g = np.asarray(g, dtype=np.float64)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.broadcast_to(g, shape)


def _sigmoid(a):
    # split by sign so neither branch overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def sigmoid_np(a):
    a = np.asarray(a, dtype=np.float64)
    return _sigmoid(np.atleast_1d(a)).reshape(a.shape)


def _linear_fwd(x, W):
    return x @ W.T


def _linear_vjp(g, vals, out, attrs, per_sample):
    x, W = vals
    gx = g @ W
    if per_sample:
        gW = np.einsum("...o,...i->...oi", g, x)
    elif g.ndim == 1 and x.ndim == 1:
        gW = np.outer(g, x)
    else:
        xb = np.broadcast_to(x, g.shape[:-1] + x.shape[-1:])
        gW = g.reshape(-1, g.shape[-1]).T @ xb.reshape(-1, x.shape[-1])
    return gx, gW


def _take_vjp(g, vals, out, attrs, per_sample):
    (a,) = vals
    full = np.zeros(np.broadcast_shapes(g.shape, out.shape) + a.shape[-1:])
    full[..., attrs["index"]] = g
    return (full,)


def _stack_vjp(g, vals, out, attrs, per_sample):
    return tuple(g[..., k] for k in range(len(vals)))


def _sum_vjp(g, vals, out, attrs, per_sample):
    (a,) = vals
    n = a.shape[-1]
    return (np.repeat(np.asarray(g)[..., None], n, axis=-1),)


def _logpdf_fwd(u, mean, std):
    z = (u - mean) / std
    return np.sum(-0.5 * LOG_2PI - np.log(std) - 0.5 * z * z, axis=-1)


def _logpdf_vjp(g, vals, out, attrs, per_sample):
    u, mean, std = vals
    z = (u - mean) / std
    ge = np.asarray(g)[..., None]
    dmean = ge * z / std
    return -dmean, dmean, ge * (z * z - 1.0) / std


def _leaky_fwd(a, slope):
    return np.where(a > 0, a, slope * a)


# name -> (forward(*values, **attrs), vjp(g, values, out, attrs, per_sample))
_OPS = {
    "add": (np.add, lambda g, v, o, at, ps: (g, g)),
    "sub": (np.subtract, lambda g, v, o, at, ps: (g, -g)),
    "mul": (np.multiply, lambda g, v, o, at, ps: (g * v[1], g * v[0])),
    "div": (np.divide, lambda g, v, o, at, ps: (g / v[1], -g * v[0] / (v[1] * v[1]))),
    "neg": (np.negative, lambda g, v, o, at, ps: (-g,)),
    "square": (np.square, lambda g, v, o, at, ps: (2.0 * v[0] * g,)),
    "sqrt": (np.sqrt, lambda g, v, o, at, ps: (g / (2.0 * o),)),
    "exp": (np.exp, lambda g, v, o, at, ps: (g * o,)),
    "log": (np.log, lambda g, v, o, at, ps: (g / v[0],)),
    "tanh": (np.tanh, lambda g, v, o, at, ps: (g * (1.0 - o * o),)),
    "sigmoid": (sigmoid_np, lambda g, v, o, at, ps: (g * o * (1.0 - o),)),
    "softplus": (lambda a: np.logaddexp(0.0, a), lambda g, v, o, at, ps: (g * sigmoid_np(v[0]),)),
    "leaky_relu": (
        _leaky_fwd,
        lambda g, v, o, at, ps: (g * np.where(v[0] > 0, 1.0, at["slope"]),),
    ),
    "clamp_min": (
        lambda a, floor: np.maximum(a, floor),
        lambda g, v, o, at, ps: (g * (v[0] > at["floor"]),),
    ),
    "take": (lambda a, index: a[..., index], _take_vjp),
    "stack": (lambda *vals: np.stack(np.broadcast_arrays(*vals), axis=-1), _stack_vjp),
    "sum": (lambda a: np.sum(a, axis=-1), _sum_vjp),
    "linear": (_linear_fwd, _linear_vjp),
    "gaussian_logpdf": (_logpdf_fwd, _logpdf_vjp),
}


class _Zero(float):
    """Marker for an adjoint that has not received any contribution."""


ZERO = _Zero(0.0)


class Node:
    __slots__ = ("op", "parents", "attrs", "batched", "needs_grad", "value", "adjoint")

    def __init__(self, op, parents=(), attrs=None, batched=False, needs_grad=False):
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.batched = batched
        self.needs_grad = needs_grad
        self.value = None
        self.adjoint = ZERO

    def __repr__(self):
        return f"Node({self.op}, parents={self.parents})"


class Var:
    """Symbolic handle on a graph node."""

    __slots__ = ("graph", "index")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, graph, index):
        self.graph = graph
        self.index = index

    @property
    def node(self):
        return self.graph.nodes[self.index]

    @property
    def value(self):
        return self.node.value

    def __add__(self, other):
        return self.graph.apply("add", self, other)

    def __radd__(self, other):
        return self.graph.apply("add", other, self)

    def __sub__(self, other):
        return self.graph.apply("sub", self, other)

    def __rsub__(self, other):
        return self.graph.apply("sub", other, self)

    def __mul__(self, other):
        return self.graph.apply("mul", self, other)

    def __rmul__(self, other):
        return self.graph.apply("mul", other, self)

    def __truediv__(self, other):
        return self.graph.apply("div", self, other)

    def __rtruediv__(self, other):
        return self.graph.apply("div", other, self)

    def __neg__(self):
        return self.graph.apply("neg", self)

    def __pow__(self, exponent):
        if exponent == 2:
            return self.graph.apply("square", self)
        raise NotImplementedError("only squaring is supported")

    def __getitem__(self, key):
        if isinstance(key, tuple) and len(key) == 2 and key[0] is Ellipsis:
            key = key[1]
        if not isinstance(key, (int, np.integer)):
            raise TypeError("Var supports x[..., i] indexing on the last axis only")
        return self.graph.apply("take", self, index=int(key))

    def __repr__(self):
        return f"Var({self.index}, {self.node.op})"


class Graph:
    """Static computation graph with declared input and parameter slots."""

    def __init__(self):
        self.nodes = []
        self.input_slots = []
        self.param_slots = []
        self.outputs = []
        self._evaluated = False
        self._compiled = None

    def _plan(self):
        if self._compiled is None:
            self._compiled = [
                (n, _OPS[n.op][0], n.parents, n.attrs) for n in self.nodes if n.parents
            ]
        return self._compiled

    def _add(self, node):
        self.nodes.append(node)
        self._evaluated = False
        self._compiled = None
        return Var(self, len(self.nodes) - 1)

    def input(self, batched=True):
        v = self._add(Node("input", batched=batched))
        self.input_slots.append(v.index)
        return v

    def param(self, batched=False):
        v = self._add(Node("param", batched=batched, needs_grad=True))
        self.param_slots.append(v.index)
        return v

    def constant(self, value):
        node = Node("const")
        node.value = np.asarray(value, dtype=np.float64)
        return self._add(node)

    def lift(self, x):
        if isinstance(x, Var):
            if x.graph is not self:
                raise ConfigurationError("cannot mix nodes from different graphs")
            return x
        return self.constant(x)

    def apply(self, op, *args, **attrs):
        if op not in _OPS:
            raise ConfigurationError(f"unknown primitive {op!r}")
        parents = [self.lift(a).index for a in args]
        pnodes = [self.nodes[p] for p in parents]
        return self._add(
            Node(
                op,
                parents,
                attrs,
                batched=any(p.batched for p in pnodes),
                needs_grad=any(p.needs_grad for p in pnodes),
            )
        )

    def output(self, *vars):
        for v in vars:
            self.outputs.append(self.lift(v).index)
        return self

    def forward(self, inputs, params):
        inputs = list(inputs)
        params = list(params)
        if len(inputs) != len(self.input_slots):
            raise ConfigurationError(
                f"graph declares {len(self.input_slots)} inputs, got {len(inputs)}"
            )
        if len(params) != len(self.param_slots):
            raise ConfigurationError(
                f"graph declares {len(self.param_slots)} parameters, got {len(params)}"
            )
        nodes = self.nodes
        for slot, val in zip(self.input_slots, inputs):
            nodes[slot].value = np.asarray(val, dtype=np.float64)
        for slot, val in zip(self.param_slots, params):
            nodes[slot].value = np.asarray(val, dtype=np.float64)
        for node, fwd, parents, attrs in self._plan():
            node.value = fwd(*[nodes[p].value for p in parents], **attrs)
        self._evaluated = True
        return [nodes[i].value for i in self.outputs]

    def backward(self, seed_output=0, seed=None, per_sample=False):
        """Gradient of one output with respect to every parameter slot.

        Non-scalar outputs are reduced against ``seed`` (ones by default).
        With ``per_sample`` the output must be batched, and each gradient
        gains a leading batch axis holding the per-sample contributions.
        """
        if not self._evaluated:
            raise GraphStateError("backward called before forward")
        if not 0 <= seed_output < len(self.outputs):
            raise ConfigurationError(f"no output {seed_output}")
        nodes = self.nodes
        root = self.outputs[seed_output]
        out = nodes[root]
        if seed is None:
            seed = np.ones_like(out.value)
        seed = np.broadcast_to(np.asarray(seed, dtype=np.float64), out.value.shape)
        batch = None
        if per_sample:
            if not out.batched:
                raise ConfigurationError("per-sample gradients need a batched output")
            batch = out.value.shape[0]

        def target(node):
            if batch is not None and not node.batched:
                return (batch,) + node.value.shape
            return node.value.shape

        try:
            out.adjoint = seed
            for i in range(root, -1, -1):
                node = nodes[i]
                g = node.adjoint
                if not node.needs_grad or node.op == "param" or g is ZERO:
                    continue
                vals = tuple(nodes[p].value for p in node.parents)
                grads = _OPS[node.op][1](g, vals, node.value, node.attrs, per_sample)
                for p, gp in zip(node.parents, grads):
                    pn = nodes[p]
                    if not pn.needs_grad:
                        continue
                    gp = _unbroadcast(gp, target(pn))
                    pn.adjoint = gp if pn.adjoint is ZERO else pn.adjoint + gp
            result = []
            for slot in self.param_slots:
                a = nodes[slot].adjoint
                if a is ZERO:
                    a = np.zeros(target(nodes[slot]))
                result.append(np.array(a, dtype=np.float64))
        finally:
            for node in nodes:
                node.adjoint = ZERO
        return result


def forward(graph, inputs, params):
    return graph.forward(inputs, params)


def backward(graph, seed_output=0, seed=None, per_sample=False):
    return graph.backward(seed_output, seed=seed, per_sample=per_sample)


def _dispatch(op, np_fn, *args, **attrs):
    for a in args:
        if isinstance(a, Var):
            return a.graph.apply(op, *args, **attrs)
    return np_fn(*(np.asarray(a, dtype=np.float64) for a in args), **attrs)


def tanh(x):
    return _dispatch("tanh", np.tanh, x)


def sigmoid(x):
    return _dispatch("sigmoid", sigmoid_np, x)


def softplus(x):
    return _dispatch("softplus", lambda a: np.logaddexp(0.0, a), x)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return _dispatch("leaky_relu", _leaky_fwd, x, slope=slope)


def sqrt(x):
    return _dispatch("sqrt", np.sqrt, x)


def exp(x):
    return _dispatch("exp", np.exp, x)


def log(x):
    return _dispatch("log", np.log, x)


def clamp_min(x, floor=0.0):
    return _dispatch("clamp_min", lambda a, floor: np.maximum(a, floor), x, floor=floor)


def linear(x, W):
    """``x @ W.T`` for weights of shape (out, in)."""
    return _dispatch("linear", _linear_fwd, x, W)


def sum_last(x):
    return _dispatch("sum", lambda a: np.sum(a, axis=-1), x)


def stack(items):
    """Stack along a new trailing axis."""
    for a in items:
        if isinstance(a, Var):
            return a.graph.apply("stack", *items)
    return np.stack(np.broadcast_arrays(*[np.asarray(a, dtype=np.float64) for a in items]), axis=-1)


def gaussian_log_density(u, mean, std):
    """Log-density of a diagonal Gaussian, summed over the last axis."""
    if not any(isinstance(a, Var) for a in (u, mean, std)):
        std = np.asarray(std, dtype=np.float64)
        if np.any(~(std > 0)):
            raise DomainError("standard deviations must be positive")
        return _logpdf_fwd(np.asarray(u, dtype=np.float64), np.asarray(mean, dtype=np.float64), std)
    return _dispatch("gaussian_logpdf", _logpdf_fwd, u, mean, std)

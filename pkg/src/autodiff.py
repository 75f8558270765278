"""
Reverse-Mode Differentiation Engine.

Every network in the laboratory is built on this module. A `Tape` records the
operations executed on `Node` values (numpy float64 arrays) in the order they
run, which is a valid topological order by construction. `Tape.backward`
walks that list in reverse, accumulating gradients into the `Parameter`
objects that were bound onto the tape.

The spike nonlinearity is a hard threshold in the forward pass and a
rectangular surrogate window in the backward pass. A tape created with
`smooth_spikes=True` replaces the forward step by the ramp whose derivative is
exactly that window, which is what finite-difference checks run against.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

import config
from errors import CholeskyError, NonFiniteError, ShapeMismatchError, UnboundInputError

DTYPE = np.float64


# --- Parameters and nodes ---

class Parameter:
    """A trainable array plus its accumulated gradient."""

    def __init__(self, value, trainable: bool = True):
        self.value = np.array(value, dtype=DTYPE)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter(shape={self.value.shape})"


class Node:
    __slots__ = ("tape", "index", "op", "inputs", "value", "grad", "backward_fn", "param")
    __array_ufunc__ = None  # ndarray (op) Node dispatches to the Node reflected op

    def __init__(self, tape, index, op, inputs, value, backward_fn=None, param=None):
        self.tape = tape
        self.index = index
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.backward_fn = backward_fn
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.index}, op={self.op}, shape={self.value.shape})"

    # Arithmetic sugar; non-node operands become constants on the same tape.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)


class Tape:
    """
    Records operations for one forward pass.

    A tape is single-threaded. With `record=False` ops still compute values
    but nothing is kept for a backward pass (used for rollouts).
    """

    def __init__(self, record: bool = True, smooth_spikes: bool = False):
        self.nodes: List[Node] = []
        self.record = record
        self.smooth_spikes = smooth_spikes
        self._param_nodes: Dict[int, Node] = {}
        self._counter = 0

    def _record(self, op: str, inputs: Sequence[Node], value: np.ndarray,
                backward_fn: Optional[Callable] = None, param: Parameter = None) -> Node:
        node = Node(self, self._counter, op, tuple(n.index for n in inputs), value,
                    backward_fn if self.record else None, param)
        self._counter += 1
        if self.record:
            self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._record("const", (), np.asarray(value, dtype=DTYPE))

    def param(self, p: Parameter) -> Node:
        """Binds a parameter onto the tape (once per tape)."""
        node = self._param_nodes.get(id(p))
        if node is None:
            node = self._record("param", (), p.value, param=p)
            self._param_nodes[id(p)] = node
        return node

    @property
    def parameter_nodes(self) -> List[Node]:
        return list(self._param_nodes.values())

    def backward(self, loss: Node) -> Dict[Parameter, np.ndarray]:
        """
        Reverse sweep from a scalar loss node.

        Gradients are accumulated into `Parameter.grad` (a second call without
        `zero_grad` doubles them) and also returned per parameter.
        """
        if not self.record:
            raise ShapeMismatchError("backward", loss.index, "tape was created with record=False")
        if loss.value.size != 1:
            raise ShapeMismatchError("backward", loss.index,
                                     f"loss must be scalar, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.index + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            input_grads = node.backward_fn(node.grad)
            for input_index, g in zip(node.inputs, input_grads):
                if g is None:
                    continue
                target = self.nodes[input_index]
                if target.grad is None:
                    target.grad = np.array(g, dtype=DTYPE, copy=True)
                else:
                    target.grad += g
        for node in self.nodes:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
        grads = {}
        for node in self._param_nodes.values():
            node.param.grad += node.grad
            grads[node.param] = node.grad
        return grads


def _tape_of(*operands) -> Tape:
    for x in operands:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _as_node(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sums `grad` down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _compute(tape: Tape, op: str, fn: Callable):
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            return fn()
    except ValueError as exc:
        raise ShapeMismatchError(op, tape._counter, str(exc)) from exc


# --- Elementwise ops ---

def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    value = _compute(tape, "add", lambda: a.value + b.value)
    sa, sb = a.shape, b.shape
    return tape._record("add", (a, b), value,
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    value = _compute(tape, "sub", lambda: a.value - b.value)
    sa, sb = a.shape, b.shape
    return tape._record("sub", (a, b), value,
                        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av, bv = a.value, b.value
    value = _compute(tape, "mul", lambda: av * bv)
    return tape._record("mul", (a, b), value,
                        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av, bv = a.value, b.value
    value = _compute(tape, "div", lambda: av / bv)
    return tape._record("div", (a, b), value,
                        lambda g: (_unbroadcast(g / bv, av.shape),
                                   _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(a: Node) -> Node:
    return a.tape._record("neg", (a,), -a.value, lambda g: (-g,))


def square(a: Node) -> Node:
    av = a.value
    return a.tape._record("square", (a,), av * av, lambda g: (2.0 * av * g,))


def sqrt(a: Node) -> Node:
    value = np.sqrt(a.value)
    return a.tape._record("sqrt", (a,), value, lambda g: (g / (2.0 * value),))


def exp(a: Node) -> Node:
    value = np.exp(a.value)
    return a.tape._record("exp", (a,), value, lambda g: (g * value,))


def log(a: Node) -> Node:
    av = a.value
    with np.errstate(divide="ignore"):
        value = np.log(av)
    return a.tape._record("log", (a,), value, lambda g: (g / av,))


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)
    return a.tape._record("tanh", (a,), value, lambda g: (g * (1.0 - value * value),))


def relu(a: Node) -> Node:
    av = a.value
    return a.tape._record("relu", (a,), np.maximum(av, 0.0), lambda g: (g * (av > 0.0),))


def softplus(a: Node) -> Node:
    av = a.value
    with np.errstate(over="ignore", invalid="ignore"):
        value = np.log1p(np.exp(-np.abs(av))) + np.maximum(av, 0.0)
    sig = 0.5 * (1.0 + np.tanh(0.5 * av))
    return a.tape._record("softplus", (a,), value, lambda g: (g * sig,))


def minimum(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    take_a = a.value <= b.value
    value = np.where(take_a, a.value, b.value)
    sa, sb = a.shape, b.shape
    return tape._record("minimum", (a, b), value,
                        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)))


def clip(a: Node, low: float, high: float) -> Node:
    av = a.value
    inside = (av >= low) & (av <= high)
    return a.tape._record("clip", (a,), np.clip(av, low, high), lambda g: (g * inside,))


def masked_fill(a: Node, mask: np.ndarray, fill: float) -> Node:
    """Replaces entries where `mask` is True by `fill`; those entries get no gradient."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    value = np.where(mask, fill, a.value)
    return a.tape._record("masked_fill", (a,), value, lambda g: (np.where(mask, 0.0, g),))


# --- Linear algebra ---

def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    av = a.value if a.value.ndim > 1 else a.value[None, :]
    bv = b.value if b.value.ndim > 1 else b.value[:, None]
    out = _compute(tape, "matmul", lambda: np.matmul(av, bv))
    value = out
    if b.value.ndim == 1:
        value = value[..., 0]
    if a.value.ndim == 1:
        value = value[..., 0, :] if b.value.ndim > 1 else value[..., 0]
    sa, sb = a.shape, b.shape

    def backward(g):
        g2 = g.reshape(out.shape)
        ga = np.matmul(g2, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g2)
        ga = _unbroadcast(ga, av.shape).reshape(sa)
        gb = _unbroadcast(gb, bv.shape).reshape(sb)
        return ga, gb

    return tape._record("matmul", (a, b), value, backward)


def logdet_psd(a: Node) -> Node:
    """log det of a (stack of) symmetric positive-definite matrices via Cholesky."""
    av = a.value
    try:
        chol = np.linalg.cholesky(av)
    except np.linalg.LinAlgError as exc:
        raise CholeskyError(f"Cholesky factorization failed: {exc}") from exc
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    value = 2.0 * np.sum(np.log(diag), axis=-1)
    inverse = np.linalg.inv(av)

    def backward(g):
        return (np.asarray(g)[..., None, None] * np.swapaxes(inverse, -1, -2),)

    return a.tape._record("logdet", (a,), value, backward)


# --- Reductions, shapes and indexing ---

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a: Node, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 (mirrors numpy)
    shape = a.shape
    value = np.sum(a.value, axis=axis, keepdims=keepdims)
    return a.tape._record("sum", (a,), np.asarray(value, dtype=DTYPE),
                          lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),))


def mean(a: Node, axis=None, keepdims: bool = False) -> Node:
    shape = a.shape
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    value = np.mean(a.value, axis=axis, keepdims=keepdims)
    return a.tape._record("mean", (a,), np.asarray(value, dtype=DTYPE),
                          lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,))


def reshape(a: Node, shape) -> Node:
    original = a.shape
    value = _compute(a.tape, "reshape", lambda: a.value.reshape(shape))
    return a.tape._record("reshape", (a,), value, lambda g: (g.reshape(original),))


def transpose(a: Node, axes) -> Node:
    inverse = np.argsort(axes)
    return a.tape._record("transpose", (a,), np.transpose(a.value, axes),
                          lambda g: (np.transpose(g, inverse),))


def concat(nodes: Sequence, axis: int = -1) -> Node:
    tape = _tape_of(*nodes)
    nodes = [_as_node(tape, n) for n in nodes]
    value = _compute(tape, "concat", lambda: np.concatenate([n.value for n in nodes], axis=axis))
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    return tape._record("concat", nodes, value, lambda g: tuple(np.split(g, splits, axis=axis)))


def getitem(a: Node, index) -> Node:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return a.tape._record("getitem", (a,), a.value[index], backward)


def pick(a: Node, indices: np.ndarray) -> Node:
    """Selects `a[i, indices[i]]` along the last axis of a 2-D node."""
    rows = np.arange(a.shape[0])
    return getitem(a, (rows, np.asarray(indices, dtype=np.int64)))


# --- Normalizations ---

def softmax(a: Node, axis: int = -1) -> Node:
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / np.sum(e, axis=axis, keepdims=True)
    return a.tape._record("softmax", (a,), value,
                          lambda g: (value * (g - np.sum(g * value, axis=axis, keepdims=True)),))


def log_softmax(a: Node, axis: int = -1) -> Node:
    shifted = a.value - np.max(a.value, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    value = shifted - lse
    probs = np.exp(value)
    return a.tape._record("log_softmax", (a,), value,
                          lambda g: (g - probs * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(a: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    av = a.value
    mu = av.mean(axis=-1, keepdims=True)
    var = av.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (av - mu) * inv_std
    gv = gamma.value
    value = xhat * gv + beta.value

    def backward(g):
        gxhat = g * gv
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gv.shape), _unbroadcast(g, beta.shape)

    return a.tape._record("layer_norm", (a, gamma, beta), value, backward)


def l2_normalize(a: Node, axis: int = -1) -> Node:
    norm = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=True))
    value = a.value / norm

    def backward(g):
        return ((g - value * np.sum(g * value, axis=axis, keepdims=True)) / norm,)

    return a.tape._record("l2_normalize", (a,), value, backward)


# --- Spiking nonlinearity ---

def surrogate_spike(v: Node, v_th: float, width: float = config.SURROGATE_WIDTH) -> Node:
    """
    Heaviside spike `v >= v_th` with a rectangular surrogate derivative
    of height 1/(2*width) inside |v - v_th| < width.
    """
    if width <= 0:
        raise ValueError("surrogate width must be positive")
    vv = v.value
    window = (np.abs(vv - v_th) < width) / (2.0 * width)
    if v.tape.smooth_spikes:
        value = np.clip((vv - v_th + width) / (2.0 * width), 0.0, 1.0)
    else:
        value = (vv >= v_th).astype(DTYPE)
    return v.tape._record("spike", (v,), value, lambda g: (g * window,))


# --- Modules ---

def orthogonal(rng: np.random.Generator, shape, gain: float = 1.0) -> np.ndarray:
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class Module:
    """Container whose Parameter / Module attributes form a named parameter tree."""

    input_names: Sequence[str] = ()

    def named_parameters(self, prefix: str = "") -> Dict[str, Parameter]:
        out: Dict[str, Parameter] = {}
        for name, attr in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(attr, Parameter):
                out[key] = attr
            elif isinstance(attr, Module):
                out.update(attr.named_parameters(prefix=f"{key}."))
            elif isinstance(attr, (list, tuple)) and attr and all(isinstance(m, Module) for m in attr):
                for i, m in enumerate(attr):
                    out.update(m.named_parameters(prefix=f"{key}.{i}."))
        return out

    def parameters(self) -> List[Parameter]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(np.sum([p.value.size for p in self.parameters()]))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        params = self.named_parameters()
        for name, p in params.items():
            p.value = np.array(state[name], dtype=DTYPE)
            p.grad = np.zeros_like(p.value)

    def bind(self, inputs: Dict[str, object]):
        """Checks that every declared input is present and finite."""
        for name in self.input_names:
            value = inputs.get(name)
            if value is None:
                raise UnboundInputError(name, type(self).__name__)
            array = value.value if isinstance(value, Node) else np.asarray(value, dtype=DTYPE)
            if not np.all(np.isfinite(array)):
                raise NonFiniteError(f"input '{name}' of {type(self).__name__} is not finite")


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, gain: float = math.sqrt(2.0)):
        self.weight = Parameter(orthogonal(rng, (in_features, out_features), gain))
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, tape: Tape, x) -> Node:
        return add(matmul(_as_node(tape, x), tape.param(self.weight)), tape.param(self.bias))


ACTIVATIONS = {"tanh": tanh, "relu": relu}


class MLP(Module):
    """Stack of Linear layers with a shared hidden activation and a linear output."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, activation: str = "tanh",
                 out_gain: float = 1.0):
        self.layers = [
            Linear(sizes[i], sizes[i + 1], rng, gain=out_gain if i == len(sizes) - 2 else math.sqrt(2.0))
            for i in range(len(sizes) - 1)
        ]
        self.activation = activation

    def __call__(self, tape: Tape, x) -> Node:
        h = _as_node(tape, x)
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            h = layer(tape, h)
            if i < len(self.layers) - 1:
                h = act(h)
        return h


def forward(tape: Tape, module: Module, **inputs):
    """Runs `module` on named inputs after checking they are all bound."""
    module.bind(inputs)
    return module(tape, **inputs)


# --- Gradient checking ---

def finite_diff_check(loss_fn: Callable[[Tape], Node], params: Iterable[Parameter], eps: float = 1e-5,
                      probes: int = 100, rng: Optional[np.random.Generator] = None) -> float:
    """
    Compares analytic gradients with central differences.

    `loss_fn` must rebuild the loss on the tape it is given (spikes evaluated
    smoothly). Returns max |analytic - numeric| / max(1, |analytic|) over
    `probes` randomly sampled parameter entries.
    """
    params = [p for p in params]
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    tape = Tape(smooth_spikes=True)
    tape.backward(loss_fn(tape))
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    sizes = np.array([p.value.size for p in params])
    if sizes.sum() == 0:
        return 0.0
    worst = 0.0
    for _ in range(probes):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        p = params[which]
        flat = int(rng.integers(p.value.size))
        idx = np.unravel_index(flat, p.value.shape)
        original = p.value[idx]
        p.value[idx] = original + eps
        f_plus = float(loss_fn(Tape(record=False, smooth_spikes=True)).value)
        p.value[idx] = original - eps
        f_minus = float(loss_fn(Tape(record=False, smooth_spikes=True)).value)
        p.value[idx] = original
        numeric = (f_plus - f_minus) / (2.0 * eps)
        a = float(analytic[which][idx])
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst

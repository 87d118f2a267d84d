"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every model and loss in the package is written against :class:`Tape`.
A tape records primitive applications in execution order (which is
already topological), keeps each node's value, and walks the record
backwards to accumulate gradients for parameter and input leaves.

Example::

    tape = Tape()
    x = tape.input(np.array([3.0]), name="x")
    loss = tape.sum(x * x)
    tape.backward(loss)["x"]      # array([6.])
"""
from __future__ import annotations

from collections import Counter
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

NORM_EPS = 1e-12


class DiffError(Exception):
    """Base class for errors raised by the differentiation core."""


class ShapeError(DiffError, ValueError):
    def __init__(self, primitive: str, *shapes: Tuple[int, ...], detail: str = ""):
        self.primitive = primitive
        self.shapes = shapes
        msg = f"{primitive}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(DiffError, ValueError):
    pass


class ContractError(DiffError, ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives: forward(*values, **attrs) -> (output, vjp)
# vjp(g) returns one gradient (or None) per input.
# ---------------------------------------------------------------------------

def _add(a, b):
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _sub(a, b):
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _mul(a, b):
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _scale(a, *, factor):
    return a * factor, lambda g: (g * factor,)


def _matmul(a, b):
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    out = np.matmul(a, b)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _concat(*xs, axis=-1):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError("concat", *(x.shape for x in xs)) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _stack(*xs, axis=0):
    try:
        out = np.stack(xs, axis=axis)
    except ValueError:
        raise ShapeError("stack", *(x.shape for x in xs)) from None
    return out, lambda g: tuple(np.moveaxis(g, axis, 0))


def _reshape(x, *, shape):
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return out, lambda g: (g.reshape(x.shape),)


def _transpose(x, *, axes):
    inverse = np.argsort(axes)
    return np.transpose(x, axes), lambda g: (np.transpose(g, inverse),)


def _relu(x):
    mask = x > 0
    return np.where(mask, x, 0.0), lambda g: (g * mask,)


def _sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, lambda g: (g * y * (1.0 - y),)


def _tanh(x):
    y = np.tanh(x)
    return y, lambda g: (g * (1.0 - y * y),)


def _softmax_values(x, temperature, axis):
    z = x / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax(x, *, temperature=1.0, axis=-1):
    if not temperature > 0:
        raise DomainError(f"softmax: temperature must be > 0, got {temperature}")
    y = _softmax_values(x, temperature, axis)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature,)

    return y, vjp


def _l2_normalize(x, *, axis=-1):
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    live = norm >= NORM_EPS
    safe = np.where(live, norm, 1.0)
    y = np.where(live, x / safe, 0.0)

    def vjp(g):
        return (np.where(live, (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe, 0.0),)

    return y, vjp


def _sum(x, *, axis=None, keepdims=False):
    out = np.sum(x, axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return np.asarray(out, dtype=np.float64), vjp


def _mean(x, *, axis=None, keepdims=False):
    out, vjp_sum = _sum(x, axis=axis, keepdims=keepdims)
    count = x.size / max(out.size, 1) if axis is not None else x.size
    return out / count, lambda g: (vjp_sum(g / count)[0],)


def _square(x):
    return x * x, lambda g: (2.0 * g * x,)


def _sqrt(x):
    if np.any(x < 0):
        raise DomainError(f"sqrt of negative value (min {x.min()})")
    y = np.sqrt(x)
    safe = np.where(y > 0, y, np.inf)
    return y, lambda g: (g / (2.0 * safe),)


def _log(x):
    if np.any(x <= 0):
        raise DomainError(f"log of non-positive value (min {x.min()})")
    return np.log(x), lambda g: (g / x,)


def _check_target(name, z, target):
    if target.shape != z.shape:
        raise ShapeError(name, z.shape, target.shape)


def _cross_entropy(z, *, target):
    """Mean softmax cross-entropy; ``target`` holds one-hot (or soft) rows."""
    target = np.asarray(target, dtype=np.float64)
    _check_target("cross_entropy", z, target)
    shifted = z - z.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsumexp
    rows = z.size // z.shape[-1]
    loss = -(target * logp).sum() / rows

    def vjp(g):
        p = np.exp(logp)
        return (g * (p * target.sum(axis=-1, keepdims=True) - target) / rows,)

    return np.asarray(loss), vjp


def _bce_with_logits(z, *, target):
    target = np.asarray(target, dtype=np.float64)
    _check_target("bce_with_logits", z, target)
    loss = np.mean(np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z))))

    def vjp(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * (p - target) / z.size,)

    return np.asarray(loss), vjp


def _mse(a, b):
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    d = a - b
    loss = np.mean(d * d)
    return np.asarray(loss), lambda g: (2.0 * g * d / d.size, -2.0 * g * d / d.size)


def _cosine_similarity(a, b, *, axis=-1):
    if a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    ua, vja = _l2_normalize(a, axis=axis)
    ub, vjb = _l2_normalize(b, axis=axis)
    out = (ua * ub).sum(axis=axis)

    def vjp(g):
        g = np.expand_dims(g, axis)
        return vja(g * ub)[0], vjb(g * ua)[0]

    return out, vjp


def _euclidean_distance(a, b, *, axis=-1):
    if a.shape != b.shape:
        raise ShapeError("euclidean_distance", a.shape, b.shape)
    d = a - b
    dist = np.sqrt((d * d).sum(axis=axis))

    def vjp(g):
        dk = np.expand_dims(dist, axis)
        unit = np.where(dk >= NORM_EPS, d / np.where(dk >= NORM_EPS, dk, 1.0), 0.0)
        ga = np.expand_dims(g, axis) * unit
        return ga, -ga

    return dist, vjp


PRIMITIVES: Dict[str, Callable] = {
    "add": _add,
    "sub": _sub,
    "mul": _mul,
    "scale": _scale,
    "matmul": _matmul,
    "concat": _concat,
    "stack": _stack,
    "reshape": _reshape,
    "transpose": _transpose,
    "relu": _relu,
    "hinge": _relu,
    "sigmoid": _sigmoid,
    "tanh": _tanh,
    "softmax": _softmax,
    "l2_normalize": _l2_normalize,
    "sum": _sum,
    "mean": _mean,
    "square": _square,
    "sqrt": _sqrt,
    "log": _log,
    "cross_entropy": _cross_entropy,
    "bce_with_logits": _bce_with_logits,
    "mse": _mse,
    "cosine_similarity": _cosine_similarity,
    "euclidean_distance": _euclidean_distance,
}


class Node:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.index]

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape.apply("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape.apply("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape.apply("sub", self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.apply("scale", self, factor=float(other))
        return self.tape.apply("mul", self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.apply("scale", self, factor=-1.0)

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def __repr__(self):
        return f"Node({self.index}, kind={self.tape.kinds[self.index]!r}, shape={self.shape})"


class Tape:
    """Append-only record of a computation.

    Leaves are created with :meth:`constant`, :meth:`param` and :meth:`input`;
    everything else goes through :meth:`apply` (or the named shortcuts).
    ``counts`` tallies primitive executions by kind, which the model tests
    use as an op-count probe.
    """

    def __init__(self):
        self.values: List[np.ndarray] = []
        self.kinds: List[str] = []
        self.parents: List[Tuple[int, ...]] = []
        self.attrs: List[dict] = []
        self.vjps: List[Optional[Callable]] = []
        self.requires: List[bool] = []
        self.leaf_names: Dict[int, str] = {}
        self._params: Dict[str, Node] = {}
        self.counts: Counter = Counter()

    def __len__(self):
        return len(self.values)

    def _push(self, kind, value, parents=(), attrs=None, vjp=None, requires=False) -> Node:
        self.values.append(value)
        self.kinds.append(kind)
        self.parents.append(tuple(parents))
        self.attrs.append(attrs or {})
        self.vjps.append(vjp)
        self.requires.append(requires)
        return Node(self, len(self.values) - 1)

    # leaves ---------------------------------------------------------------
    def constant(self, value) -> Node:
        return self._push("const", np.asarray(value, dtype=np.float64))

    def param(self, name: str, value: np.ndarray) -> Node:
        """Parameter leaf; repeated calls with the same name share one node."""
        node = self._params.get(name)
        if node is None:
            node = self._push("param", np.asarray(value, dtype=np.float64), requires=True)
            self._params[name] = node
            self.leaf_names[node.index] = name
        return node

    def input(self, value, name: Optional[str] = None) -> Node:
        node = self._push("input", np.asarray(value, dtype=np.float64), requires=True)
        self.leaf_names[node.index] = name if name is not None else f"input{node.index}"
        return node

    # recording ------------------------------------------------------------
    def apply(self, kind: str, *inputs: Node, **attrs) -> Node:
        try:
            fn = PRIMITIVES[kind]
        except KeyError:
            raise ContractError(f"unknown primitive {kind!r}") from None
        for x in inputs:
            if x.tape is not self:
                raise ContractError(f"{kind}: input node belongs to another tape")
        out, vjp = fn(*(self.values[x.index] for x in inputs), **attrs)
        self.counts[kind] += 1
        requires = any(self.requires[x.index] for x in inputs)
        return self._push(kind, np.asarray(out, dtype=np.float64), [x.index for x in inputs],
                          attrs, vjp if requires else None, requires)

    def backward(self, loss: Node) -> Dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` keyed by leaf name.

        Every named leaf gets an entry, zero when the loss does not depend on it.
        """
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(self.values[loss.index])}
        for i in range(loss.index, -1, -1):
            vjp = self.vjps[i]
            if vjp is None or i not in grads:
                continue
            for p, gp in zip(self.parents[i], vjp(grads.pop(i))):
                if gp is None or not self.requires[p]:
                    continue
                gp = np.asarray(gp, dtype=np.float64).reshape(self.values[p].shape)
                grads[p] = grads[p] + gp if p in grads else gp
        return {name: grads.get(idx, np.zeros_like(self.values[idx]))
                for idx, name in self.leaf_names.items()}

    def replay(self) -> List[np.ndarray]:
        """Recompute every node value from the recorded leaves and attributes."""
        values: List[np.ndarray] = []
        for i, kind in enumerate(self.kinds):
            if kind in ("const", "param", "input"):
                values.append(self.values[i].copy())
            else:
                out, _ = PRIMITIVES[kind](*(values[p] for p in self.parents[i]), **self.attrs[i])
                values.append(np.asarray(out, dtype=np.float64))
        return values

    # named shortcuts --------------------------------------------------------
    def matmul(self, a, b): return self.apply("matmul", a, b)
    def concat(self, xs: Sequence[Node], axis=-1): return self.apply("concat", *xs, axis=axis)
    def stack(self, xs: Sequence[Node], axis=0): return self.apply("stack", *xs, axis=axis)
    def reshape(self, x, shape): return self.apply("reshape", x, shape=tuple(shape))
    def transpose(self, x, axes): return self.apply("transpose", x, axes=tuple(axes))
    def relu(self, x): return self.apply("relu", x)
    def hinge(self, x): return self.apply("hinge", x)
    def sigmoid(self, x): return self.apply("sigmoid", x)
    def tanh(self, x): return self.apply("tanh", x)
    def softmax(self, x, temperature=1.0, axis=-1): return self.apply("softmax", x, temperature=temperature, axis=axis)
    def l2_normalize(self, x, axis=-1): return self.apply("l2_normalize", x, axis=axis)
    def sum(self, x, axis=None, keepdims=False): return self.apply("sum", x, axis=axis, keepdims=keepdims)
    def mean(self, x, axis=None, keepdims=False): return self.apply("mean", x, axis=axis, keepdims=keepdims)
    def square(self, x): return self.apply("square", x)
    def sqrt(self, x): return self.apply("sqrt", x)
    def log(self, x): return self.apply("log", x)
    def cross_entropy(self, z, target): return self.apply("cross_entropy", z, target=target)
    def bce_with_logits(self, z, target): return self.apply("bce_with_logits", z, target=target)
    def mse(self, a, b): return self.apply("mse", a, b)
    def cosine_similarity(self, a, b, axis=-1): return self.apply("cosine_similarity", a, b, axis=axis)
    def euclidean_distance(self, a, b, axis=-1): return self.apply("euclidean_distance", a, b, axis=axis)


def softmax(x, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Plain-array temperature softmax (no tape)."""
    if not temperature > 0:
        raise DomainError(f"softmax: temperature must be > 0, got {temperature}")
    return _softmax_values(np.asarray(x, dtype=np.float64), temperature, axis)


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------

GraphBuilder = Callable[[np.random.Generator], Tuple[Callable[..., Node], List[np.ndarray]]]

_KINKED = ("relu", "hinge")


def _kink_margin(tape: Tape) -> float:
    margin = np.inf
    for i, kind in enumerate(tape.kinds):
        if kind in _KINKED:
            margin = min(margin, float(np.abs(tape.values[tape.parents[i][0]]).min()))
    return margin


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradient_error(fn: Callable[..., Node], inputs: Sequence[np.ndarray], epsilon: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences."""
    tape = Tape()
    leaves = [tape.input(x, name=f"x{k}") for k, x in enumerate(inputs)]
    grads = tape.backward(fn(tape, *leaves))

    def evaluate(values):
        t = Tape()
        return float(fn(t, *(t.constant(v) for v in values)).value)

    worst = 0.0
    for k, x in enumerate(inputs):
        numeric = np.zeros_like(x, dtype=np.float64)
        for idx in np.ndindex(x.shape):
            plus = [v.copy() for v in inputs]
            minus = [v.copy() for v in inputs]
            plus[k][idx] += epsilon
            minus[k][idx] -= epsilon
            numeric[idx] = (evaluate(plus) - evaluate(minus)) / (2.0 * epsilon)
        worst = max(worst, relative_error(grads[f"x{k}"], numeric))
    return worst


def check_gradients(builder: GraphBuilder, epsilon: float = 1e-5, trials: int = 20,
                    seed: int = 0, max_redraws: int = 100) -> float:
    """Build ``trials`` graphs from ``builder`` and compare against central differences.

    ``builder(rng)`` returns ``(fn, inputs)``; ``fn(tape, *leaf_nodes)`` must
    return a scalar node. Draws whose relu/hinge inputs come within
    ``10 * epsilon`` of the kink are redrawn.
    """
    if not 0 < epsilon <= 1e-3:
        raise ContractError(f"epsilon must lie in (0, 1e-3], got {epsilon}")
    if trials < 1:
        raise ContractError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        for _ in range(max_redraws):
            fn, inputs = builder(rng)
            probe = Tape()
            fn(probe, *(probe.input(x) for x in inputs))
            if _kink_margin(probe) > 10 * epsilon:
                break
        else:
            raise ContractError("could not draw a graph away from relu kinks")
        worst = max(worst, gradient_error(fn, inputs, epsilon))
    return worst


def random_mixed_graph(rng: np.random.Generator, max_dim: int = 8) -> Tuple[Callable[..., Node], List[np.ndarray]]:
    """A random small perceptron with a randomly chosen activation and loss."""
    batch = int(rng.integers(1, 4))
    d_in, d_hid, d_out = (int(v) for v in rng.integers(2, max_dim + 1, size=3))
    x = rng.normal(size=(batch, d_in))
    w1 = rng.normal(size=(d_in, d_hid)) / np.sqrt(d_in)
    b1 = rng.normal(size=(d_hid,)) * 0.1
    w2 = rng.normal(size=(d_hid, d_out)) / np.sqrt(d_hid)
    other = rng.normal(size=(batch, d_out))
    act = ["relu", "tanh", "sigmoid", "softmax", "l2_normalize"][int(rng.integers(5))]
    head = ["cross_entropy", "bce", "mse", "cosine", "euclid", "sqrt_log", "concat"][int(rng.integers(7))]
    onehot = np.eye(d_out)[rng.integers(d_out, size=batch)]
    temperature = float(rng.uniform(0.5, 3.0))

    def fn(tape, x, w1, b1, w2, other):
        h = tape.matmul(x, w1) + b1
        if act == "softmax":
            h = tape.softmax(h, temperature=temperature)
        else:
            h = tape.apply(act, h)
        z = tape.matmul(h, w2)
        if head == "cross_entropy":
            return tape.cross_entropy(z, onehot)
        if head == "bce":
            return tape.bce_with_logits(z, onehot)
        if head == "mse":
            return tape.mse(z, other)
        if head == "cosine":
            return tape.mean(tape.cosine_similarity(z, other))
        if head == "euclid":
            return tape.mean(tape.euclidean_distance(z, other))
        if head == "sqrt_log":
            return tape.log(tape.sqrt(tape.sum(tape.square(z)) + 1.0))
        return tape.sum(tape.tanh(tape.concat([z, other * z])))

    return fn, [x, w1, b1, w2, other]

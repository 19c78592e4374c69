"""
Deterministic float64 tensor engine with reverse-mode automatic differentiation.

Provides the primitive set the model needs, a finite-difference gradient checker,
the Adam optimizer and the seeded random streams every other module draws from.
"""

import contextlib
import logging
from dataclasses import dataclass, field, fields
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64

# Stream ids are part of the reproducibility contract: changing them changes every run.
RNG_STREAMS = {
    "encoders": 1,
    "graph_rgcn": 2,
    "mpt": 3,
    "losses": 4,
    "classifier": 5,
    "dropout": 6,
    "shuffle": 7,
    "synthetic": 8,
    "gradcheck": 9,
}

_grad_enabled = True


class TensorError(Exception):
    """Base class for tensor engine failures."""


class ShapeMismatchError(TensorError, ValueError):
    pass


class InvalidAxisError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, ArithmeticError):
    pass


class GradCheckError(TensorError, ValueError):
    pass


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """
    Create the PCG64 generator for one named stream of a run.

    Args:
        seed: Run seed (non-negative)
        stream: One of RNG_STREAMS

    Returns:
        Generator seeded from SeedSequence([seed, stream_id])
    """
    if stream not in RNG_STREAMS:
        raise KeyError(f"Unknown RNG stream '{stream}'")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), RNG_STREAMS[stream]])))


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


@dataclass
class Node:
    """One primitive application recorded in the compute graph."""

    primitive: "Primitive"
    inputs: Tuple["Tensor", ...]
    attrs: Dict[str, Any]
    saved: Any


class Tensor:
    """Dense float64 array that can take part in an autodiff graph."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> Dict["Tensor", np.ndarray]:
        return backward(self)

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        op = self._node.primitive.name if self._node else "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE, order="C"), requires_grad=True)


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    arity: Optional[int]  # None means variadic
    forward: Callable[[List[np.ndarray], Dict[str, Any]], Tuple[np.ndarray, Any]]
    backward: Callable[[np.ndarray, List[np.ndarray], np.ndarray, Any, Dict[str, Any]], List[Optional[np.ndarray]]]


PRIMITIVES: Dict[str, Primitive] = {}


def _register(name: str, arity: Optional[int]):
    def wrap(pair):
        fwd, bwd = pair()
        PRIMITIVES[name] = Primitive(name=name, arity=arity, forward=fwd, backward=bwd)
        return pair

    return wrap


def _check_axis(axis: int, ndim: int, kind: str) -> int:
    if not isinstance(axis, (int, np.integer)) or not -ndim <= axis < ndim:
        raise InvalidAxisError(f"{kind}: axis {axis} invalid for rank {ndim}")
    return int(axis) % ndim


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


@_register("matmul", 2)
def _matmul():
    def fwd(xs, attrs):
        a, b = xs
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
            raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        return a @ b, None

    def bwd(g, xs, out, saved, attrs):
        a, b = xs
        return [g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g]

    return fwd, bwd


@_register("add", 2)
def _add():
    def fwd(xs, attrs):
        _broadcast_shape("add", *xs)
        return xs[0] + xs[1], None

    def bwd(g, xs, out, saved, attrs):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]

    return fwd, bwd


@_register("sub", 2)
def _sub():
    def fwd(xs, attrs):
        _broadcast_shape("sub", *xs)
        return xs[0] - xs[1], None

    def bwd(g, xs, out, saved, attrs):
        return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]

    return fwd, bwd


@_register("mul", 2)
def _mul():
    def fwd(xs, attrs):
        _broadcast_shape("mul", *xs)
        return xs[0] * xs[1], None

    def bwd(g, xs, out, saved, attrs):
        a, b = xs
        return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]

    return fwd, bwd


@_register("scale", 1)
def _scale():
    def fwd(xs, attrs):
        return xs[0] * float(attrs["c"]), None

    def bwd(g, xs, out, saved, attrs):
        return [g * float(attrs["c"])]

    return fwd, bwd


@_register("concat", None)
def _concat():
    def fwd(xs, attrs):
        if not xs:
            raise ShapeMismatchError("concat: no inputs")
        ndim = xs[0].ndim
        axis = _check_axis(attrs.get("axis", 0), ndim, "concat")
        for x in xs[1:]:
            if x.ndim != ndim or any(x.shape[k] != xs[0].shape[k] for k in range(ndim) if k != axis):
                raise ShapeMismatchError(f"concat(axis={axis}): shapes {xs[0].shape} and {x.shape} do not conform")
        offsets = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis), (axis, offsets)

    def bwd(g, xs, out, saved, attrs):
        axis, offsets = saved
        return list(np.split(g, offsets, axis=axis))

    return fwd, bwd


@_register("slice", 1)
def _slice():
    def fwd(xs, attrs):
        x = xs[0]
        axis = _check_axis(attrs.get("axis", 0), x.ndim, "slice")
        start, stop = int(attrs["start"]), int(attrs["stop"])
        if not 0 <= start < stop <= x.shape[axis]:
            raise ShapeMismatchError(f"slice: range [{start}, {stop}) outside extent {x.shape[axis]} of shape {x.shape}")
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, stop)
        index = tuple(index)
        return x[index], index

    def bwd(g, xs, out, saved, attrs):
        grad = np.zeros_like(xs[0])
        grad[saved] = g
        return [grad]

    return fwd, bwd


def _reduce_axis(x: np.ndarray, attrs: Dict[str, Any], kind: str):
    axis = attrs.get("axis")
    if axis is None:
        return None, x.size
    axis = _check_axis(axis, x.ndim, kind)
    return axis, x.shape[axis]


@_register("sum", 1)
def _sum():
    def fwd(xs, attrs):
        axis, _ = _reduce_axis(xs[0], attrs, "sum")
        return np.sum(xs[0], axis=axis, keepdims=attrs.get("keepdims", False)), axis

    def bwd(g, xs, out, saved, attrs):
        axis = saved
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, xs[0].shape).copy()]

    return fwd, bwd


@_register("mean", 1)
def _mean():
    def fwd(xs, attrs):
        axis, count = _reduce_axis(xs[0], attrs, "mean")
        return np.mean(xs[0], axis=axis, keepdims=attrs.get("keepdims", False)), (axis, count)

    def bwd(g, xs, out, saved, attrs):
        axis, count = saved
        if axis is not None and not attrs.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, xs[0].shape) / count]

    return fwd, bwd


@_register("softmax", 1)
def _softmax():
    def fwd(xs, attrs):
        axis = _check_axis(attrs.get("axis", -1), xs[0].ndim, "softmax")
        shifted = xs[0] - np.max(xs[0], axis=axis, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=axis, keepdims=True), axis

    def bwd(g, xs, out, saved, attrs):
        return [out * (g - np.sum(g * out, axis=saved, keepdims=True))]

    return fwd, bwd


@_register("log_softmax", 1)
def _log_softmax():
    def fwd(xs, attrs):
        axis = _check_axis(attrs.get("axis", -1), xs[0].ndim, "log_softmax")
        shifted = xs[0] - np.max(xs[0], axis=axis, keepdims=True)
        return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True)), axis

    def bwd(g, xs, out, saved, attrs):
        return [g - np.exp(out) * np.sum(g, axis=saved, keepdims=True)]

    return fwd, bwd


@_register("sigmoid", 1)
def _sigmoid():
    def fwd(xs, attrs):
        # tanh form never overflows
        return 0.5 * (1.0 + np.tanh(0.5 * xs[0])), None

    def bwd(g, xs, out, saved, attrs):
        return [g * out * (1.0 - out)]

    return fwd, bwd


@_register("tanh", 1)
def _tanh():
    def fwd(xs, attrs):
        return np.tanh(xs[0]), None

    def bwd(g, xs, out, saved, attrs):
        return [g * (1.0 - out * out)]

    return fwd, bwd


@_register("relu", 1)
def _relu():
    def fwd(xs, attrs):
        return np.where(xs[0] > 0, xs[0], 0.0), None

    def bwd(g, xs, out, saved, attrs):
        return [np.where(xs[0] > 0, g, 0.0)]

    return fwd, bwd


@_register("leaky_relu", 1)
def _leaky_relu():
    def fwd(xs, attrs):
        slope = float(attrs.get("slope", 0.01))
        return np.where(xs[0] > 0, xs[0], slope * xs[0]), slope

    def bwd(g, xs, out, saved, attrs):
        return [np.where(xs[0] > 0, g, saved * g)]

    return fwd, bwd


@_register("exp", 1)
def _exp():
    def fwd(xs, attrs):
        with np.errstate(over="ignore"):
            return np.exp(xs[0]), None

    def bwd(g, xs, out, saved, attrs):
        return [g * out]

    return fwd, bwd


@_register("log", 1)
def _log():
    def fwd(xs, attrs):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(xs[0]), None

    def bwd(g, xs, out, saved, attrs):
        return [g / xs[0]]

    return fwd, bwd


@_register("layer_norm", None)
def _layer_norm():
    def fwd(xs, attrs):
        x = xs[0]
        if len(xs) not in (1, 3):
            raise ShapeMismatchError("layer_norm: expects x or (x, gain, bias)")
        width = x.shape[-1]
        for extra in xs[1:]:
            if extra.shape != (width,):
                raise ShapeMismatchError(f"layer_norm: parameter shape {extra.shape} does not match input {x.shape}")
        eps = float(attrs.get("eps", 1e-5))
        mu = x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
        x_hat = (x - mu) * inv_std
        out = x_hat * xs[1] + xs[2] if len(xs) == 3 else x_hat
        return out, (x_hat, inv_std)

    def bwd(g, xs, out, saved, attrs):
        x_hat, inv_std = saved
        width = xs[0].shape[-1]
        g_hat = g * xs[1] if len(xs) == 3 else g
        gx = (inv_std / width) * (
            width * g_hat - g_hat.sum(axis=-1, keepdims=True) - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        if len(xs) == 1:
            return [gx]
        lead = tuple(range(g.ndim - 1))
        return [gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)]

    return fwd, bwd


@_register("l2_normalize", 1)
def _l2_normalize():
    def fwd(xs, attrs):
        x = xs[0]
        axis = _check_axis(attrs.get("axis", -1), x.ndim, "l2_normalize")
        eps = float(attrs.get("eps", 1e-12))
        norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
        clamped = np.maximum(norm, eps)
        return x / clamped, (axis, norm > eps, clamped)

    def bwd(g, xs, out, saved, attrs):
        axis, active, clamped = saved
        projected = g - out * np.sum(g * out, axis=axis, keepdims=True)
        return [np.where(active, projected, g) / clamped]

    return fwd, bwd


@_register("dropout", 1)
def _dropout():
    def fwd(xs, attrs):
        p = float(attrs.get("p", 0.0))
        if not 0.0 <= p < 1.0:
            raise TensorError(f"dropout: p={p} outside [0, 1)")
        if p == 0.0 or not attrs.get("training", False):
            return xs[0].copy(), None
        rng = attrs["rng"]
        mask = (rng.random(xs[0].shape) >= p) / (1.0 - p)
        return xs[0] * mask, mask

    def bwd(g, xs, out, saved, attrs):
        return [g if saved is None else g * saved]

    return fwd, bwd


@_register("transpose", 1)
def _transpose():
    def fwd(xs, attrs):
        x = xs[0]
        axes = attrs.get("axes")
        if axes is None:
            if x.ndim < 2:
                raise InvalidAxisError(f"transpose: rank {x.ndim} has no last two axes")
            axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
        axes = [_check_axis(a, x.ndim, "transpose") for a in axes]
        if sorted(axes) != list(range(x.ndim)):
            raise InvalidAxisError(f"transpose: {axes} is not a permutation of rank {x.ndim}")
        return np.transpose(x, axes), np.argsort(axes)

    def bwd(g, xs, out, saved, attrs):
        return [np.transpose(g, saved)]

    return fwd, bwd


@_register("reshape", 1)
def _reshape():
    def fwd(xs, attrs):
        shape = tuple(int(s) for s in attrs["shape"])
        if int(np.prod(shape)) != xs[0].size:
            raise ShapeMismatchError(f"reshape: cannot view shape {xs[0].shape} as {shape}")
        return xs[0].reshape(shape), None

    def bwd(g, xs, out, saved, attrs):
        return [g.reshape(xs[0].shape)]

    return fwd, bwd


def apply_primitive(kind: str, inputs: Sequence[Tensor], attrs: Optional[Dict[str, Any]] = None) -> Tensor:
    """
    Apply one registered primitive and record it in the graph when needed.

    Args:
        kind: Primitive name (see PRIMITIVES)
        inputs: Input tensors
        attrs: Primitive attributes (axis, slope, p, ...)

    Returns:
        Output tensor; it carries a graph node when any input requires grad
    """
    if kind not in PRIMITIVES:
        raise TensorError(f"Unknown primitive '{kind}'")
    primitive = PRIMITIVES[kind]
    attrs = dict(attrs or {})
    inputs = tuple(as_tensor(x) for x in inputs)
    if primitive.arity is not None and len(inputs) != primitive.arity:
        raise TensorError(f"{kind}: expected {primitive.arity} inputs, got {len(inputs)}")

    out_data, saved = primitive.forward([x.data for x in inputs], attrs)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"Primitive '{kind}' produced a non-finite value")

    out = Tensor(out_data)
    if is_grad_enabled() and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        out._node = Node(primitive=primitive, inputs=inputs, attrs=attrs, saved=saved)
    return out


# Thin named wrappers keep model code readable.
def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(x: Tensor, c: float) -> Tensor:
    return apply_primitive("scale", [x], {"c": c})


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply_primitive("concat", list(xs), {"axis": axis})


def slice_(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    return apply_primitive("slice", [x], {"start": start, "stop": stop, "axis": axis})


def sum_(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("sum", [x], {"axis": axis, "keepdims": keepdims})


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    return apply_primitive("mean", [x], {"axis": axis, "keepdims": keepdims})


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("softmax", [x], {"axis": axis})


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("log_softmax", [x], {"axis": axis})


def sigmoid(x: Tensor) -> Tensor:
    return apply_primitive("sigmoid", [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", [x])


def relu(x: Tensor) -> Tensor:
    return apply_primitive("relu", [x])


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    return apply_primitive("leaky_relu", [x], {"slope": slope})


def exp(x: Tensor) -> Tensor:
    return apply_primitive("exp", [x])


def log(x: Tensor) -> Tensor:
    return apply_primitive("log", [x])


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    inputs = [x] if gain is None else [x, gain, bias]
    return apply_primitive("layer_norm", inputs, {"eps": eps})


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    return apply_primitive("l2_normalize", [x], {"axis": axis})


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    return apply_primitive("dropout", [x], {"p": p, "rng": rng, "training": training})


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    return apply_primitive("transpose", [x], {"axes": axes})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply_primitive("reshape", [x], {"shape": tuple(shape)})


# ---------------------------------------------------------------------------
# Reverse mode
# ---------------------------------------------------------------------------


@dataclass
class ComputeGraph:
    """Topologically ordered primitive applications reachable from a root."""

    nodes: List[Tensor]
    leaves: List[Tensor]

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputeGraph":
        order: List[Tensor] = []
        leaves: List[Tensor] = []
        visited = set()
        # Iterative post-order; recurrent encoders produce chains deeper than the recursion limit.
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            if tensor._node is None:
                if tensor.requires_grad:
                    leaves.append(tensor)
                continue
            stack.append((tensor, True))
            for parent in reversed(tensor._node.inputs):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order, leaves=leaves)


def backward(root: Tensor, graph: Optional[ComputeGraph] = None) -> Dict[Tensor, np.ndarray]:
    """
    Propagate d(root)/d(leaf) to every requires-grad leaf of the graph.

    Gradients are summed over all paths and accumulated into ``leaf.grad``.

    Returns:
        Mapping leaf tensor -> its gradient array
    """
    if root.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar root, got shape {root.shape}")
    graph = graph or ComputeGraph.from_root(root)
    pending: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}

    if root._node is None and root.requires_grad:
        root.grad = pending[id(root)] if root.grad is None else root.grad + pending[id(root)]
        return {root: root.grad}

    for tensor in reversed(graph.nodes):
        grad_out = pending.pop(id(tensor), None)
        if grad_out is None:
            continue
        node = tensor._node
        input_grads = node.primitive.backward(grad_out, [x.data for x in node.inputs], tensor.data, node.saved, node.attrs)
        for inp, grad in zip(node.inputs, input_grads):
            if grad is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = grad.copy() if inp.grad is None else inp.grad + grad
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + grad
            else:
                pending[id(inp)] = grad

    for leaf in graph.leaves:
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
    return {leaf: leaf.grad for leaf in graph.leaves}


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of analytic and central-difference gradients."""

    indices: np.ndarray
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    excluded: np.ndarray
    tol: float
    atol: float = 0.0

    @property
    def failures(self) -> np.ndarray:
        bad = (self.rel_errors >= self.tol) & (np.abs(self.analytic - self.numeric) > self.atol)
        return bad & ~self.excluded

    @property
    def passed(self) -> bool:
        return not bool(self.failures.any())

    @property
    def max_error(self) -> float:
        kept = self.rel_errors[~self.excluded]
        return float(kept.max()) if kept.size else 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "passed": self.passed,
            "checked": int(self.indices.size),
            "excluded": int(self.excluded.sum()),
            "max_rel_error": self.max_error,
            "tol": self.tol,
        }


# One-sided quotients differing by more than this (relative) mark a kink.
_KINK_TOL = 1e-2


def _numeric_report(
    value_fn: Callable[[], float],
    x: Tensor,
    analytic: np.ndarray,
    eps: float,
    tol: float,
    atol: float,
    max_coords: Optional[int],
    seed: int,
) -> GradCheckReport:
    if not x.data.flags.c_contiguous:
        x.data = np.ascontiguousarray(x.data)
    flat = x.data.reshape(-1)
    if max_coords is not None and max_coords < flat.size:
        rng = make_rng(seed, "gradcheck")
        indices = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
    else:
        indices = np.arange(flat.size)

    with no_grad():
        f0 = value_fn()
        numeric = np.empty(indices.size)
        excluded = np.zeros(indices.size, dtype=bool)
        for k, idx in enumerate(indices):
            original = flat[idx]
            flat[idx] = original + eps
            f_plus = value_fn()
            flat[idx] = original - eps
            f_minus = value_fn()
            flat[idx] = original
            numeric[k] = (f_plus - f_minus) / (2.0 * eps)
            forward_q = (f_plus - f0) / eps
            backward_q = (f0 - f_minus) / eps
            if abs(forward_q - backward_q) > _KINK_TOL * max(1.0, abs(forward_q), abs(backward_q)):
                excluded[k] = True

    picked = analytic.reshape(-1)[indices]
    rel = np.abs(picked - numeric) / np.maximum(np.maximum(np.abs(picked), np.abs(numeric)), 1e-8)
    return GradCheckReport(
        indices=indices, analytic=picked, numeric=numeric, rel_errors=rel, excluded=excluded, tol=tol, atol=atol
    )


def _validate_eps(eps: float) -> None:
    if not 0.0 < eps <= 1e-2:
        raise GradCheckError(f"eps={eps} outside (0, 1e-2]")


def _scalar_value(out: Tensor) -> float:
    if out.size != 1:
        raise GradCheckError(f"Function under check must return a scalar, got shape {out.shape}")
    return out.item()


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 0.0,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare the analytic gradient of f at x with central finite differences.

    Args:
        f: Deterministic scalar-valued tensor function (dropout disabled)
        x: Point of evaluation; its data is perturbed in place and restored
        eps: Perturbation size in (0, 1e-2]
        tol: Relative error bound |a-n| / max(|a|, |n|, 1e-8)
        atol: Absolute difference below which a coordinate passes regardless
        max_coords: Check a seeded subsample of coordinates when set

    Returns:
        GradCheckReport; coordinates at non-differentiable points are excluded
    """
    _validate_eps(eps)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    _scalar_value(out)
    backward(out)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    return _numeric_report(lambda: _scalar_value(f(x)), x, analytic, eps, tol, atol, max_coords, seed)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Dict[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 0.0,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> Dict[str, GradCheckReport]:
    """Run grad_check against every tensor of a named parameter map with one backward pass."""
    _validate_eps(eps)
    zero_grads(params)
    out = loss_fn()
    _scalar_value(out)
    backward(out)
    reports = {}
    for name, tensor in params.items():
        analytic = tensor.grad.copy() if tensor.grad is not None else np.zeros_like(tensor.data)
        reports[name] = _numeric_report(lambda: _scalar_value(loss_fn()), tensor, analytic, eps, tol, atol, max_coords, seed)
    return reports


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


def zero_grads(params: Dict[str, Tensor]) -> None:
    for tensor in params.values():
        tensor.grad = None


def collect_grads(params: Dict[str, Tensor]) -> Dict[str, np.ndarray]:
    """Gradient map for a parameter set; parameters the loss never touched get zeros."""
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Dict[str, Tensor], **hyper) -> "AdamState":
        state = cls(**hyper)
        state.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        state.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        return state


def adam_step(
    params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState
) -> Tuple[Dict[str, Tensor], AdamState]:
    """
    Apply one bias-corrected Adam update in place.

    Args:
        params: Named parameters to update
        grads: Gradient for every parameter
        state: Moments and step count; t is incremented by one

    Returns:
        The updated (params, state)
    """
    missing = [name for name in params if name not in grads]
    if missing:
        raise TensorError(f"adam_step: no gradient for {missing}")
    for name, tensor in params.items():
        if grads[name].shape != tensor.shape:
            raise ShapeMismatchError(f"adam_step: gradient shape {grads[name].shape} != parameter {tensor.shape} ({name})")
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        elif state.m[name].shape != tensor.shape:
            raise ShapeMismatchError(f"adam_step: state shape {state.m[name].shape} != parameter {tensor.shape} ({name})")

    state.t += 1
    correction1 = 1.0 - state.beta1**state.t
    correction2 = 1.0 - state.beta2**state.t
    for name, tensor in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        tensor.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# Initialisers
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def uniform(rng: np.random.Generator, shape: Sequence[int], bound: float) -> Tensor:
    return parameter(rng.uniform(-bound, bound, size=tuple(shape)))


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return parameter(q[:rows, :cols])


def zeros(shape: Iterable[int]) -> Tensor:
    return parameter(np.zeros(tuple(shape)))


def ones(shape: Iterable[int]) -> Tensor:
    return parameter(np.ones(tuple(shape)))


# ---------------------------------------------------------------------------
# Parameter groups
# ---------------------------------------------------------------------------


class ParameterGroup:
    """
    Mixin for dataclasses holding trainable tensors.

    Tensor fields, nested groups and lists of either are walked in field order, giving
    every parameter a stable dotted path such as ``mpt_v.blocks.0.w_q``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for f in fields(self):
            yield from _walk(getattr(self, f.name), f"{prefix}{f.name}")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def parameter_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())


def _walk(value, path: str) -> Iterator[Tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield path, value
    elif isinstance(value, ParameterGroup):
        yield from value.named_parameters(prefix=f"{path}.")
    elif isinstance(value, (list, tuple)):
        for index, item in enumerate(value):
            yield from _walk(item, f"{path}.{index}")

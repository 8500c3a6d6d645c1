"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is dynamic: every primitive that sees a ``requires_grad`` input records a
``Node`` holding its inputs and a local gradient rule. ``backward`` collects the
nodes reachable from a scalar loss into a ``ComputationGraph`` ordered by creation
sequence and replays them in reverse exactly once.

Broadcasting is deliberately absent; the only implicit expansion is ``add_bias``,
which adds a vector along axis 1.
"""
import contextlib
import itertools
import logging
import threading
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, DomainError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]

_sequence = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording nodes on this thread"""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Node:
    """One recorded primitive: inputs, output and the rule mapping the output
    gradient to one gradient per input (``None`` where no gradient flows)."""

    __slots__ = ("op", "inputs", "output", "rule", "seq")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...],
                 rule: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]):
        self.op = op
        self.inputs = inputs
        self.output: Optional["Tensor"] = None
        self.rule = rule
        self.seq = next(_sequence)


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, node: Optional[Node] = None):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, _as_tensor(other, self.shape))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, _as_tensor(other, self.shape))

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _as_tensor(value, shape: Tuple[int, ...]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _record(op: str, out: np.ndarray, inputs: Tuple[Tensor, ...],
            rule: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    tracked = _grad_enabled() and any(t.requires_grad for t in inputs)
    if not tracked:
        return Tensor(out)
    node = Node(op, inputs, rule)
    result = Tensor(out, requires_grad=True, node=node)
    node.output = result
    return result


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# =============== Primitives ===============

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of an m×k and a k×n tensor"""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    a_data, b_data = a.data, b.data

    def rule(g):
        return g @ b_data.T, a_data.T @ g

    return _record("matmul", a_data @ b_data, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    a_data, b_data = a.data, b.data
    return _record("mul", a_data * b_data, (a, b), lambda g: (g * b_data, g * a_data))


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record("scale", a.data * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _record("relu", np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input has non-positive entries")
    a_data = a.data
    return _record("log", np.log(a_data), (a,), lambda g: (g / a_data,))


def square(a: Tensor) -> Tensor:
    a_data = a.data
    return _record("square", a_data * a_data, (a,), lambda g: (2.0 * a_data * g,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n vector to every slice of x along axis 1"""
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError(f"add_bias: cannot add bias {bias.shape} to {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    reduce_axes = tuple(i for i in range(x.data.ndim) if i != 1)

    def rule(g):
        return g, g.sum(axis=reduce_axes)

    return _record("add_bias", x.data + bias.data.reshape(view), (x, bias), rule)


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record("sum", a.data.sum(axis=axis), (a,), rule)


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.size)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {original} as {shape}") from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(original),))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate an N×C×H×W batch with an O×C×kh×kw kernel"""
    if x.data.ndim != 4 or kernel.data.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    _, _, kh, kw = kernel.shape
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise DimensionError(f"conv2d: kernel {kernel.shape} larger than padded input {padded.shape}")
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    k_data = kernel.data
    out = np.einsum("nchwij,ocij->nohw", windows, k_data)

    def rule(g):
        grad_kernel = np.einsum("nchwij,nohw->ocij", windows, g)
        grad_windows = np.einsum("nohw,ocij->nchwij", g, k_data)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    grad_windows[..., i, j]
        h, w = x.shape[2], x.shape[3]
        return grad_padded[:, :, padding:padding + h, padding:padding + w], grad_kernel

    return _record("conv2d", out, (x, kernel), rule)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
}


def elementwise(op: str, *args: Tensor) -> Tensor:
    """Dispatch one of the entry-wise primitives by name"""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{op}'") from None
    return fn(*args)


# =============== Backward pass ===============

class ComputationGraph:
    """Nodes reachable from an output, in creation (= topological) order."""

    def __init__(self, nodes: List[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputationGraph":
        seen = set()
        nodes: List[Node] = []
        stack = [output.node] if output.node is not None else []
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            seen.add(node.seq)
            nodes.append(node)
            stack.extend(t.node for t in node.inputs if t.node is not None and t.requires_grad)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)

    def run(self, output: Tensor) -> None:
        pending = {id(output): np.ones_like(output.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g_out = pending.pop(id(node.output), None)
            if g_out is None:
                continue
            out = node.output
            out.grad = g_out.copy() if out.grad is None else out.grad + g_out
            for tensor, g_in in zip(node.inputs, node.rule(g_out)):
                if g_in is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                pending[key] = g_in if key not in pending else pending[key] + g_in
                if tensor.node is None:
                    leaves[key] = tensor
        for key, tensor in leaves.items():
            g = pending[key]
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``grad`` with d(loss)/d(tensor) on every tracked tensor feeding ``loss``.

    Gradients accumulate across calls until cleared with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor that does not require grad")
    if loss.node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    graph = ComputationGraph.from_output(loss)
    logger.debug("backward over %d nodes", len(graph))
    graph.run(loss)


def finite_difference_gradient(f: Callable[[Tensor], Union[Tensor, float]],
                               x: Union[Tensor, np.ndarray], h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time"""
    if h <= 0:
        raise ContractError(f"finite difference step must be positive, got {h}")
    base = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    grad = np.zeros(base.size)
    point = base.astype(np.float64).reshape(-1).copy()

    def evaluate(values: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor(values.reshape(base.shape)))
        return out.item() if isinstance(out, Tensor) else float(out)

    for i in range(point.size):
        original = point[i]
        point[i] = original + h
        upper = evaluate(point)
        point[i] = original - h
        lower = evaluate(point)
        point[i] = original
        grad[i] = (upper - lower) / (2.0 * h)
    return Tensor(grad.reshape(base.shape))

"""
A small dense-tensor engine with reverse-mode automatic differentiation.

Every value is a float64 numpy array wrapped in a Tensor. Operations called while a
ComputationTape is active (``with ComputationTape() as tape: ...``) append a node holding
their backward rule to that tape; ``backward(loss, tape)`` replays the tape in reverse.
Outside of a tape nothing is recorded, which is how inference runs.
"""
import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from state_transition.errors import DimensionError, UsageError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

RMSNORM_EPS = 1e-6
GELU_COEFF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False) -> None:
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        # Set only on tensors produced while a tape was recording
        self.node: Optional["TapeNode"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return add(self, as_tensor(other))

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(as_tensor(other), self)

    def __sub__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        return sub(self, as_tensor(other))

    def __mul__(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: float) -> "Tensor":
        return scale(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        return index(self, key)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class TapeNode:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE_TAPES: List["ComputationTape"] = []


class ComputationTape:
    "Ordered record of the operations executed while the tape is active"

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self._node_ids = set()

    def __enter__(self) -> "ComputationTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)
        self._node_ids.add(id(node))

    def contains(self, tensor: Tensor) -> bool:
        return tensor.node is not None and id(tensor.node) in self._node_ids

    def backward(self, loss: Tensor) -> None:
        """
        Reverse-mode pass from a scalar loss. Gradients of leaves with requires_grad are
        accumulated into their .grad, so calling this twice without zeroing adds up.
        """
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.contains(loss):
            raise UsageError("The loss was not produced while this tape was recording")

        pending = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = pending.pop(id(node.output), None)
            if upstream is None:
                continue

            input_grads = node.backward_fn(upstream)
            for tensor, grad in zip(node.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.is_leaf:
                    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
                elif id(tensor) in pending:
                    pending[id(tensor)] = pending[id(tensor)] + grad
                else:
                    pending[id(tensor)] = grad


def current_tape() -> Optional[ComputationTape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def backward(loss: Tensor, tape: ComputationTape) -> None:
    "Populate .grad on every leaf of the tape that requires it"
    tape.backward(loss)


@dataclass
class KernelCounters:
    "Exact bookkeeping of multiply-accumulates and softmax row widths"
    macs: int = 0
    softmax_widths: Counter = field(default_factory=Counter)

    def max_softmax_width(self) -> int:
        return max(self.softmax_widths) if self.softmax_widths else 0


_ACTIVE_COUNTERS: List[KernelCounters] = []


@contextmanager
def counting() -> Iterator[KernelCounters]:
    counters = KernelCounters()
    _ACTIVE_COUNTERS.append(counters)
    try:
        yield counters
    finally:
        _ACTIVE_COUNTERS.pop()


def _count_macs(macs: int) -> None:
    for counters in _ACTIVE_COUNTERS:
        counters.macs += int(macs)


def _count_softmax(widths: np.ndarray) -> None:
    if not _ACTIVE_COUNTERS:
        return
    values, counts = np.unique(widths, return_counts=True)
    for counters in _ACTIVE_COUNTERS:
        for width, count in zip(values, counts):
            counters.softmax_widths[int(width)] += int(count)


def _record(name: str, inputs: Tuple[Tensor, ...], out_data: np.ndarray, backward_fn: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.node = None

    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = TapeNode(name, inputs, out, backward_fn)
        out.node = node
        tape.record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    "Sum grad down to shape, undoing numpy broadcasting"
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcastable(name: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} cannot be combined")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable("add", a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable("sub", a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcastable("mul", a, b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, factor: float) -> Tensor:
    return _record("scale", (a,), a.data * factor, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    _count_macs(a.shape[0] * a.shape[1] * b.shape[1])
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def _parse_einsum(subscripts: str) -> Tuple[str, str, str]:
    inputs, output = subscripts.replace(" ", "").split("->")
    left, right = inputs.split(",")
    return left, right, output


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """
    Two-operand einsum with an explicit output, e.g. einsum("bij,bjk->bik", x, y).
    Each index of an operand must also appear in the other operand or in the output,
    and no operand may repeat an index, so both gradients are plain einsums again.
    """
    left, right, output = _parse_einsum(subscripts)
    assert len(set(left)) == len(left) and len(set(right)) == len(right), subscripts
    assert set(left) <= set(right) | set(output), subscripts
    assert set(right) <= set(left) | set(output), subscripts

    if len(left) != a.ndim or len(right) != b.ndim:
        raise DimensionError(f"einsum {subscripts}: operand shapes {a.shape} and {b.shape} do not match")
    extents = {}
    for letters, shape in ((left, a.shape), (right, b.shape)):
        for letter, extent in zip(letters, shape):
            if extents.setdefault(letter, extent) != extent:
                raise DimensionError(
                    f"einsum {subscripts}: index '{letter}' disagrees between shapes {a.shape} and {b.shape}")

    _count_macs(math.prod(extents.values()))

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return (np.einsum(f"{output},{right}->{left}", g, b.data),
                np.einsum(f"{output},{left}->{right}", g, a.data))

    return _record("einsum", (a, b), np.einsum(subscripts, a.data, b.data), backward_fn)


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {a.shape} as {shape}")
    return _record("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _record("transpose", (a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def index(a: Tensor, key) -> Tensor:
    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        np.add.at(grad, key, g)
        return (grad,)

    return _record("index", (a,), a.data[key], backward_fn)


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    "Gather along one axis with an integer index array (repeats allowed)"
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        grad = np.zeros_like(a.data)
        gathered_axes = list(range(axis, axis + indices.ndim))
        np.add.at(np.moveaxis(grad, axis, 0), indices,
                  np.moveaxis(g, gathered_axes, list(range(indices.ndim))))
        return (grad,)

    return _record("take", (a,), np.take(a.data, indices, axis=axis), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, boundaries, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if len({t.shape for t in tensors}) > 1:
        raise DimensionError(f"stack: shapes {[t.shape for t in tensors]} differ")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _record("stack", tensors, out,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def sum_all(a: Tensor) -> Tensor:
    return _record("sum", (a,), np.array(a.data.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis, stabilized by subtracting each row's max. Entries where
    mask is False get probability exactly 0; every row must keep at least one entry.
    """
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax_rows: rows of shape {x.shape} are empty")

    if mask is None:
        shifted = x.data - x.data.max(axis=-1, keepdims=True)
        widths = np.full(x.shape[:-1], x.shape[-1])
    else:
        mask = np.broadcast_to(mask, x.shape)
        widths = mask.sum(axis=-1)
        assert widths.min() >= 1, "softmax_rows: a row has every entry masked"
        masked = np.where(mask, x.data, -np.inf)
        shifted = masked - masked.max(axis=-1, keepdims=True)

    _count_softmax(widths)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", (x,), probs, backward_fn)


def rmsnorm(x: Tensor, gain: Tensor) -> Tensor:
    "Divide each trailing slice by sqrt(mean square + 1e-6) and scale by gain"
    if gain.ndim != 1 or x.ndim == 0 or x.shape[-1] != gain.shape[0]:
        raise DimensionError(f"rmsnorm: input shape {x.shape} does not end in gain shape {gain.shape}")

    inv_rms = 1.0 / np.sqrt(np.mean(x.data ** 2, axis=-1, keepdims=True) + RMSNORM_EPS)
    normed = x.data * inv_rms

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        scaled = g * gain.data
        dim = x.shape[-1]
        dx = inv_rms * scaled - x.data * inv_rms ** 3 * np.sum(scaled * x.data, axis=-1, keepdims=True) / dim
        dgain = (g * normed).reshape(-1, dim).sum(axis=0)
        return dx, dgain

    return _record("rmsnorm", (x, gain), normed * gain.data, backward_fn)


def gelu(x: Tensor) -> Tensor:
    "Gaussian-error linear unit, tanh approximation"
    inner = SQRT_2_OVER_PI * (x.data + GELU_COEFF * x.data ** 3)
    t = np.tanh(inner)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray]:
        d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * d_inner),)

    return _record("gelu", (x,), 0.5 * x.data * (1.0 + t), backward_fn)


def clip(x: Tensor, bound: float) -> Tensor:
    "Clamp to [-bound, bound]; the gradient passes only where the input was inside"
    inside = np.abs(x.data) <= bound
    return _record("clip", (x,), np.clip(x.data, -bound, bound), lambda g: (g * inside,))


def conv2d(inputs: Tensor, kernels: Tensor, stride: int) -> Tensor:
    """
    3x3 cross-correlation with zero padding 1. inputs is [c_in, h, w] or [batch, c_in, h, w];
    the output has ceil(h / stride) x ceil(w / stride) spatial extent.
    """
    if stride not in (1, 2):
        raise UsageError(f"conv2d: stride must be 1 or 2, got {stride}")
    batched = inputs.ndim == 4
    x = inputs.data if batched else inputs.data[None]
    if x.ndim != 4 or kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise DimensionError(f"conv2d: cannot apply kernels {kernels.shape} to input {inputs.shape}")
    if kernels.shape[1] != x.shape[1]:
        raise DimensionError(
            f"conv2d: kernels {kernels.shape} expect {kernels.shape[1]} channels, input {inputs.shape} has {x.shape[1]}")
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise DimensionError(f"conv2d: input {inputs.shape} is smaller than the 3x3 kernel")

    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    _count_macs(x.shape[0] * kernels.shape[0] * out_h * out_w * x.shape[1] * 9)
    out = np.einsum("bcyxij,ocij->boyx", windows, kernels.data)

    def backward_fn(g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        g = g if batched else g[None]
        d_kernels = np.einsum("boyx,bcyxij->ocij", g, windows)
        d_windows = np.einsum("boyx,ocij->bcyxij", g, kernels.data)
        d_padded = np.zeros_like(padded)
        for i in range(3):
            for j in range(3):
                d_padded[:, :, i:i + stride * (out_h - 1) + 1:stride,
                         j:j + stride * (out_w - 1) + 1:stride] += d_windows[..., i, j]
        d_inputs = d_padded[:, :, 1:-1, 1:-1]
        return (d_inputs if batched else d_inputs[0]), d_kernels

    return _record("conv2d", (inputs, kernels), out if batched else out[0], backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    "x[..., d_in] @ weight[d_in, d_out] (+ bias), batched over leading axes"
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply weight {weight.shape} to input {x.shape}")
    flat = reshape(x, (-1, x.shape[-1]))
    out = reshape(matmul(flat, weight), x.shape[:-1] + (weight.shape[1],))
    return out if bias is None else add(out, bias)

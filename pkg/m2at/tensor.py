"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Graph` is an append-only tape of primitive-op records. Node ids are
tape positions, so inputs always precede their consumers and the reverse of
the tape is a valid topological order. Tensors created without a graph are
plain values: ops on them compute forward results without recording.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog

from m2at.errors import NonFiniteError, PrecisionError, ShapeError

log = structlog.get_logger(__name__)

_SETTINGS: Dict[str, Any] = {"dtype": np.dtype(np.float32), "deterministic": True}


def default_dtype() -> np.dtype:
    return _SETTINGS["dtype"]


def is_deterministic() -> bool:
    return bool(_SETTINGS["deterministic"])


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Verification precision: tensors and graphs created inside use float64."""
    previous = _SETTINGS["dtype"]
    _SETTINGS["dtype"] = np.dtype(np.float64)
    try:
        yield
    finally:
        _SETTINGS["dtype"] = previous


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True) -> Iterator[None]:
    """Force fixed contraction order for matmul/conv reductions."""
    previous = _SETTINGS["deterministic"]
    _SETTINGS["deterministic"] = enabled
    try:
        yield
    finally:
        _SETTINGS["deterministic"] = previous


def _freeze(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class Tensor:
    """Immutable dense array, optionally bound to a node of a :class:`Graph`."""

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data: Any, dtype: Any = None):
        array = np.array(data, dtype=default_dtype() if dtype is None else dtype, copy=True)
        if not np.isfinite(array).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = _freeze(array)
        self.graph: Optional[Graph] = None
        self.node_id: Optional[int] = None

    @classmethod
    def _wrap(cls, array: np.ndarray, graph: Optional["Graph"] = None, node_id: Optional[int] = None) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = array if not array.flags.writeable else _freeze(array)
        tensor.graph = graph
        tensor.node_id = node_id
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def requires_grad(self) -> bool:
        return self.graph is not None and self.graph.nodes[self.node_id].requires_grad

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other: Any) -> "Tensor":
        return add(self, other)

    def __mul__(self, other: Any) -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: Any) -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        where = f", node={self.node_id}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"


def as_tensor(value: Any, dtype: Any = None) -> Tensor:
    """Wrap without copying when ``value`` is already a read-only array of the right dtype."""
    if isinstance(value, Tensor):
        return value
    target = np.dtype(default_dtype() if dtype is None else dtype)
    if isinstance(value, np.ndarray) and value.dtype == target and not value.flags.writeable:
        return Tensor._wrap(value)
    return Tensor(value, dtype=target)


@dataclass
class Node:
    """One tape record: op kind, input node ids, attributes and saved state."""

    kind: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    requires_grad: bool
    attrs: Dict[str, Any] = field(default_factory=dict)
    saved: Any = None
    name: Optional[str] = None


class Graph:
    """Append-only tape of primitive ops."""

    def __init__(self, dtype: Any = None):
        self.dtype = np.dtype(default_dtype() if dtype is None else dtype)
        self.nodes: List[Node] = []
        self.names: Dict[str, int] = {}
        self.output: Optional[int] = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value: Any, name: Optional[str] = None, requires_grad: bool = True) -> Tensor:
        """Record an input node (parameter or data) on the tape."""
        array = np.array(value.data if isinstance(value, Tensor) else value, dtype=self.dtype, copy=True)
        if not np.isfinite(array).all():
            raise NonFiniteError(f"leaf {name or len(self.nodes)} contains NaN or Inf")
        kind = "leaf" if requires_grad else "constant"
        node = Node(kind=kind, inputs=(), value=_freeze(array), requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        node_id = len(self.nodes) - 1
        if name is not None:
            self.names[name] = node_id
        return Tensor._wrap(node.value, self, node_id)

    def constant(self, value: Any, name: Optional[str] = None) -> Tensor:
        return self.leaf(value, name=name, requires_grad=False)

    def tensor(self, key: Union[str, int]) -> Tensor:
        node_id = self.names[key] if isinstance(key, str) else int(key)
        return Tensor._wrap(self.nodes[node_id].value, self, node_id)

    def leaves(self) -> List[int]:
        return [i for i, node in enumerate(self.nodes) if node.kind == "leaf"]

    def set_output(self, tensor: Tensor) -> None:
        if tensor.graph is not self:
            raise ShapeError("output tensor is not recorded on this graph")
        self.output = tensor.node_id

    def _record(
        self,
        kind: str,
        inputs: Tuple[int, ...],
        value: np.ndarray,
        attrs: Dict[str, Any],
        saved: Any,
    ) -> Tensor:
        requires_grad = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(
            Node(kind=kind, inputs=inputs, value=value, requires_grad=requires_grad, attrs=attrs, saved=saved)
        )
        return Tensor._wrap(value, self, len(self.nodes) - 1)

    def evaluate(self, overrides: Optional[Mapping[int, np.ndarray]] = None, output: Optional[int] = None) -> np.ndarray:
        """Replay the forward pass with substituted leaf values."""
        overrides = overrides or {}
        target = self._output_id(output)
        values: List[np.ndarray] = []
        for node_id, node in enumerate(self.nodes[: target + 1]):
            if node.kind in ("leaf", "constant"):
                values.append(np.asarray(overrides.get(node_id, node.value), dtype=self.dtype))
                continue
            op = _OPS[node.kind]
            out, _ = op.forward(*(values[i] for i in node.inputs), **node.attrs)
            values.append(out)
        return values[target]

    def _output_id(self, output: Optional[int]) -> int:
        if output is not None:
            return int(output)
        if self.output is not None:
            return self.output
        if not self.nodes:
            raise ShapeError("graph is empty")
        return len(self.nodes) - 1


# --- primitive ops -----------------------------------------------------------

BackwardFn = Callable[..., Tuple[Optional[np.ndarray], ...]]


class Op:
    """A primitive: shape check, forward returning (value, saved), backward."""

    kind = ""

    @staticmethod
    def check(*shapes: Tuple[int, ...], **attrs: Any) -> None:
        return None

    @staticmethod
    def forward(*arrays: np.ndarray, **attrs: Any) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    @staticmethod
    def backward(grad: np.ndarray, saved: Any, inputs: Sequence[np.ndarray], needs: Sequence[bool], **attrs: Any) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


_OPS: Dict[str, type] = {}
_BACKWARD_OVERRIDES: Dict[str, BackwardFn] = {}


def register(cls: type) -> type:
    _OPS[cls.kind] = cls
    return cls


@contextlib.contextmanager
def override_backward(kind: str, fn: BackwardFn) -> Iterator[None]:
    """Swap the backward of ``kind`` (test hook for gradient-check failures)."""
    if kind not in _OPS:
        raise KeyError(f"unknown op kind: {kind}")
    _BACKWARD_OVERRIDES[kind] = fn
    try:
        yield
    finally:
        _BACKWARD_OVERRIDES.pop(kind, None)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(kind: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a} and {b}") from None


def _contract(spec: str, *operands: np.ndarray) -> np.ndarray:
    if is_deterministic():
        return np.einsum(spec, *operands, optimize=False)
    return np.einsum(spec, *operands, optimize=True)


@register
class Add(Op):
    kind = "add"

    @staticmethod
    def check(a, b, **attrs):
        _broadcast_check("add", a, b)

    @staticmethod
    def forward(a, b):
        return a + b, None

    @staticmethod
    def backward(grad, saved, inputs, needs):
        a, b = inputs
        return (
            _unbroadcast(grad, a.shape) if needs[0] else None,
            _unbroadcast(grad, b.shape) if needs[1] else None,
        )


@register
class Mul(Op):
    kind = "mul"

    @staticmethod
    def check(a, b, **attrs):
        _broadcast_check("mul", a, b)

    @staticmethod
    def forward(a, b):
        return a * b, None

    @staticmethod
    def backward(grad, saved, inputs, needs):
        a, b = inputs
        return (
            _unbroadcast(grad * b, a.shape) if needs[0] else None,
            _unbroadcast(grad * a, b.shape) if needs[1] else None,
        )


@register
class MatMul(Op):
    kind = "matmul"

    @staticmethod
    def check(a, b, **attrs):
        if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
            raise ShapeError(f"matmul: incompatible shapes {a} and {b}")

    @staticmethod
    def forward(a, b):
        if is_deterministic():
            return _contract("ij,jk->ik", a, b), None
        return a @ b, None

    @staticmethod
    def backward(grad, saved, inputs, needs):
        a, b = inputs
        return (
            _contract("ik,jk->ij", grad, b) if needs[0] else None,
            _contract("ij,ik->jk", a, grad) if needs[1] else None,
        )


def _conv_windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


@register
class Conv2d(Op):
    """Cross-correlation, x[n,c,h,w] * w[o,c,kh,kw], zero padding."""

    kind = "conv2d"

    @staticmethod
    def check(x, w, stride=1, padding=0):
        if len(x) != 4 or len(w) != 4 or x[1] != w[1]:
            raise ShapeError(f"conv2d: incompatible input {x} and kernel {w}")
        if stride not in (1, 2):
            raise ShapeError(f"conv2d: unsupported stride {stride}")
        if x[2] + 2 * padding < w[2] or x[3] + 2 * padding < w[3]:
            raise ShapeError(f"conv2d: kernel {w} larger than padded input {x}")

    @staticmethod
    def forward(x, w, stride=1, padding=0):
        windows = _conv_windows(x, w.shape[2], w.shape[3], stride, padding)
        out = _contract("nchwij,ocij->nohw", windows, w)
        return out, None

    @staticmethod
    def backward(grad, saved, inputs, needs, stride=1, padding=0):
        x, w = inputs
        kh, kw = w.shape[2], w.shape[3]
        grad_w = None
        if needs[1]:
            windows = _conv_windows(x, kh, kw, stride, padding)
            grad_w = _contract("nohw,nchwij->ocij", grad, windows)
        grad_x = None
        if needs[0]:
            n, c, h, width = x.shape
            oh, ow = grad.shape[2], grad.shape[3]
            padded = np.zeros((n, c, h + 2 * padding, width + 2 * padding), dtype=grad.dtype)
            for i in range(kh):
                for j in range(kw):
                    padded[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += _contract(
                        "nohw,oc->nchw", grad, w[:, :, i, j]
                    )
            grad_x = padded[:, :, padding : padding + h, padding : padding + width]
        return grad_x, grad_w


@register
class Relu(Op):
    kind = "relu"

    @staticmethod
    def forward(x):
        mask = x > 0
        return np.where(mask, x, np.zeros((), dtype=x.dtype)), mask

    @staticmethod
    def backward(grad, saved, inputs, needs):
        return (grad * saved if needs[0] else None,)


@register
class MaxPool2d(Op):
    """Non-overlapping k×k max pooling; ties go to the first row-major element."""

    kind = "maxpool2d"

    @staticmethod
    def check(x, size=2):
        if len(x) != 4 or x[2] < size or x[3] < size:
            raise ShapeError(f"maxpool2d: input {x} smaller than window {size}")

    @staticmethod
    def forward(x, size=2):
        n, c, h, w = x.shape
        oh, ow = h // size, w // size
        cropped = x[:, :, : oh * size, : ow * size]
        windows = cropped.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
        index = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, index[..., None], axis=-1)[..., 0]
        return out, index

    @staticmethod
    def backward(grad, saved, inputs, needs, size=2):
        if not needs[0]:
            return (None,)
        (x,) = inputs
        n, c, h, w = x.shape
        oh, ow = grad.shape[2], grad.shape[3]
        windows = np.zeros((n, c, oh, ow, size * size), dtype=grad.dtype)
        np.put_along_axis(windows, saved[..., None], grad[..., None], axis=-1)
        block = windows.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size)
        full = np.zeros(x.shape, dtype=grad.dtype)
        full[:, :, : oh * size, : ow * size] = block
        return (full,)


@register
class Mean(Op):
    kind = "mean"

    @staticmethod
    def forward(x, axis=None):
        return np.asarray(np.mean(x, axis=axis), dtype=x.dtype), None

    @staticmethod
    def backward(grad, saved, inputs, needs, axis=None):
        if not needs[0]:
            return (None,)
        (x,) = inputs
        if axis is None:
            return (np.full(x.shape, grad / x.size, dtype=x.dtype),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
        return (np.broadcast_to(np.expand_dims(grad, axes), x.shape) / count,)


@register
class Reshape(Op):
    kind = "reshape"

    @staticmethod
    def check(x, shape=()):
        target = tuple(shape)
        if -1 not in target and int(np.prod(target)) != int(np.prod(x)):
            raise ShapeError(f"reshape: cannot view {x} as {target}")

    @staticmethod
    def forward(x, shape=()):
        return x.reshape(tuple(shape)), None

    @staticmethod
    def backward(grad, saved, inputs, needs, shape=()):
        return (grad.reshape(inputs[0].shape) if needs[0] else None,)


@register
class SoftmaxCrossEntropy(Op):
    """Mean over the batch of -sum_j t_j log softmax(z)_j with dense targets."""

    kind = "softmax_cross_entropy"

    @staticmethod
    def check(logits, targets):
        if len(logits) != 2 or tuple(logits) != tuple(targets):
            raise ShapeError(f"softmax_cross_entropy: logits {logits} vs targets {targets}")

    @staticmethod
    def forward(logits, targets):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -(targets * log_probs).sum() / logits.shape[0]
        return np.asarray(loss, dtype=logits.dtype), log_probs

    @staticmethod
    def backward(grad, saved, inputs, needs):
        logits, targets = inputs
        n = logits.shape[0]
        log_probs = saved
        grad_logits = None
        if needs[0]:
            probs = np.exp(log_probs)
            grad_logits = grad * (probs * targets.sum(axis=1, keepdims=True) - targets) / n
        grad_targets = -grad * log_probs / n if needs[1] else None
        return grad_logits, grad_targets


@register
class MarginLoss(Op):
    """Mean over the batch of max_{j != y} z_j - z_y."""

    kind = "margin_loss"

    @staticmethod
    def check(logits, labels=()):
        if len(logits) != 2 or logits[0] != len(labels):
            raise ShapeError(f"margin_loss: logits {logits} vs {len(labels)} labels")

    @staticmethod
    def forward(logits, labels=()):
        labels = np.asarray(labels, dtype=np.int64)
        rows = np.arange(logits.shape[0])
        others = logits.copy()
        others[rows, labels] = -np.inf
        runner_up = others.argmax(axis=1)
        margins = logits[rows, runner_up] - logits[rows, labels]
        return np.asarray(margins.mean(), dtype=logits.dtype), runner_up

    @staticmethod
    def backward(grad, saved, inputs, needs, labels=()):
        if not needs[0]:
            return (None,)
        (logits,) = inputs
        n = logits.shape[0]
        rows = np.arange(n)
        out = np.zeros_like(logits)
        out[rows, saved] += grad / n
        out[rows, np.asarray(labels, dtype=np.int64)] -= grad / n
        return (out,)


def _resolve_graph(inputs: Sequence[Any]) -> Optional[Graph]:
    graph: Optional[Graph] = None
    for item in inputs:
        if isinstance(item, Tensor) and item.graph is not None:
            if graph is not None and item.graph is not graph:
                raise ShapeError("inputs are recorded on different graphs")
            graph = item.graph
    return graph


def primitive_forward(kind: str, inputs: Sequence[Any], **attrs: Any) -> Tensor:
    """Run primitive ``kind`` on ``inputs`` and record it when any input is on a graph."""
    try:
        op = _OPS[kind]
    except KeyError:
        raise ShapeError(f"unknown op kind: {kind}") from None
    graph = _resolve_graph(inputs)
    tensors: List[Tensor] = []
    for item in inputs:
        if isinstance(item, Tensor):
            tensors.append(item)
        elif graph is not None:
            tensors.append(graph.constant(item))
        else:
            tensors.append(Tensor(item))
    if graph is not None:
        tensors = [t if t.graph is graph else graph.constant(t.data) for t in tensors]
    arrays = [t.data for t in tensors]
    op.check(*(a.shape for a in arrays), **attrs)
    value, saved = op.forward(*arrays, **attrs)
    value = np.asarray(value)
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    value = _freeze(value)
    if graph is None:
        return Tensor._wrap(value)
    return graph._record(kind, tuple(t.node_id for t in tensors), value, dict(attrs), saved)


def add(a: Any, b: Any) -> Tensor:
    return primitive_forward("add", (a, b))


def mul(a: Any, b: Any) -> Tensor:
    return primitive_forward("mul", (a, b))


def matmul(a: Any, b: Any) -> Tensor:
    return primitive_forward("matmul", (a, b))


def conv2d(x: Any, w: Any, stride: int = 1, padding: int = 0) -> Tensor:
    return primitive_forward("conv2d", (x, w), stride=stride, padding=padding)


def relu(x: Any) -> Tensor:
    return primitive_forward("relu", (x,))


def maxpool2d(x: Any, size: int = 2) -> Tensor:
    return primitive_forward("maxpool2d", (x,), size=size)


def mean(x: Any, axis: Optional[Union[int, Tuple[int, ...]]] = None) -> Tensor:
    return primitive_forward("mean", (x,), axis=axis)


def reshape(x: Any, shape: Sequence[int]) -> Tensor:
    return primitive_forward("reshape", (x,), shape=tuple(shape))


def softmax_cross_entropy(logits: Any, targets: Any) -> Tensor:
    return primitive_forward("softmax_cross_entropy", (logits, targets))


def margin_loss(logits: Any, labels: Sequence[int]) -> Tensor:
    return primitive_forward("margin_loss", (logits,), labels=tuple(int(y) for y in labels))


# --- reverse pass ------------------------------------------------------------

NodeRef = Union[int, str, Tensor]


def _node_id(graph: Graph, ref: NodeRef) -> int:
    if isinstance(ref, Tensor):
        if ref.graph is not graph:
            raise ShapeError("tensor is not recorded on this graph")
        return int(ref.node_id)
    if isinstance(ref, str):
        return graph.names[ref]
    return int(ref)


def backward(graph: Graph, wrt: Iterable[NodeRef], output: Optional[NodeRef] = None) -> Dict[int, np.ndarray]:
    """Gradients of the scalar ``output`` node for every requested node.

    Nodes the output does not depend on (constants included) get zeros.
    """
    out_id = graph._output_id(None if output is None else _node_id(graph, output))
    out_value = graph.nodes[out_id].value
    if out_value.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out_value.shape}")
    wanted = {_node_id(graph, ref) for ref in wrt}
    grads: Dict[int, np.ndarray] = {out_id: np.ones_like(out_value)}
    result: Dict[int, np.ndarray] = {}
    for node_id in range(out_id, -1, -1):
        grad = grads.pop(node_id, None)
        node = graph.nodes[node_id]
        if node_id in wanted:
            result[node_id] = grad if grad is not None else np.zeros_like(node.value)
        if grad is None or not node.requires_grad or not node.inputs:
            continue
        inputs = [graph.nodes[i].value for i in node.inputs]
        needs = [graph.nodes[i].requires_grad for i in node.inputs]
        backward_fn = _BACKWARD_OVERRIDES.get(node.kind, _OPS[node.kind].backward)
        input_grads = backward_fn(grad, node.saved, inputs, needs, **node.attrs)
        for input_id, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or not graph.nodes[input_id].requires_grad:
                continue
            if input_id in grads:
                grads[input_id] = grads[input_id] + input_grad
            else:
                grads[input_id] = np.asarray(input_grad, dtype=graph.dtype)
    for node_id in wanted:
        result.setdefault(node_id, np.zeros_like(graph.nodes[node_id].value))
    return result


# --- gradient verification ---------------------------------------------------


@dataclass
class GradCheckEntry:
    """Comparison of analytic and central-difference gradients for one leaf."""

    name: str
    shape: Tuple[int, ...]
    checked: int
    max_abs_error: float
    max_rel_error: float


@dataclass
class GradCheckReport:
    tolerance: float
    entries: List[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.max_rel_error < self.tolerance for e in self.entries)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(
    graph: Graph,
    tolerance: float = 1e-4,
    wrt: Optional[Iterable[NodeRef]] = None,
    step: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against central differences for each leaf.

    Args:
        graph: Tape whose output is a scalar; must be a float64 graph.
        tolerance: Pass threshold for the max relative error.
        wrt: Leaves to check (default: every differentiable leaf).
        step: Finite-difference step h.
        max_entries: Check at most this many coordinates per leaf (seeded sample).
        seed: Seed for coordinate sampling.

    Returns:
        GradCheckReport with one entry per checked leaf.

    Raises:
        PrecisionError: If the graph is not float64.
    """
    if graph.dtype != np.float64:
        raise PrecisionError(f"grad_check requires a float64 graph, got {graph.dtype}")
    leaf_ids = [_node_id(graph, ref) for ref in wrt] if wrt is not None else graph.leaves()
    analytic = backward(graph, leaf_ids)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for leaf_id in leaf_ids:
        node = graph.nodes[leaf_id]
        base = node.value
        size = base.size
        coords = np.arange(size)
        if max_entries is not None and size > max_entries:
            coords = np.sort(rng.choice(size, size=max_entries, replace=False))
        numeric = np.empty(len(coords))
        for k, flat in enumerate(coords):
            shifted = base.copy().reshape(-1)
            shifted[flat] = base.reshape(-1)[flat] + step
            plus = float(graph.evaluate({leaf_id: shifted.reshape(base.shape)}))
            shifted[flat] = base.reshape(-1)[flat] - step
            minus = float(graph.evaluate({leaf_id: shifted.reshape(base.shape)}))
            numeric[k] = (plus - minus) / (2.0 * step)
        exact = analytic[leaf_id].reshape(-1)[coords]
        errors = relative_error(exact, numeric) if len(coords) else np.zeros(0)
        entry = GradCheckEntry(
            name=node.name or f"node{leaf_id}",
            shape=tuple(base.shape),
            checked=len(coords),
            max_abs_error=float(np.max(np.abs(exact - numeric))) if len(coords) else 0.0,
            max_rel_error=float(errors.max()) if len(coords) else 0.0,
        )
        report.entries.append(entry)
        log.debug("gradcheck.leaf", name=entry.name, checked=entry.checked, max_rel_error=entry.max_rel_error)
    return report

"""Classifier zoo, parameter initialization, momentum SGD and checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from pydantic import ValidationError

from m2at import tensor as T
from m2at.errors import CheckpointError, NonFiniteError, ShapeError
from m2at.schemas.config import ModelConfig, OptimizerConfig

log = structlog.get_logger(__name__)

MLP_HIDDEN = 64
SMALL_CNN_CHANNELS = (16, 32)
WRN_CHANNELS = (16, 32, 64)
WRN_STRIDES = (1, 2, 2)
WRN_BLOCKS = 2
WRN_STEM = 16

ParamSpec = Tuple[str, Tuple[int, ...], int]


def _scaled(base: int, width: float) -> int:
    return max(1, int(round(base * width)))


def _conv_out(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _conv_spec(prefix: str, c_in: int, c_out: int, kernel: int, bias: bool = True) -> List[ParamSpec]:
    fan_in = c_in * kernel * kernel
    specs = [(f"{prefix}.weight", (c_out, c_in, kernel, kernel), fan_in)]
    if bias:
        specs.append((f"{prefix}.bias", (c_out,), fan_in))
    return specs


def _dense_spec(prefix: str, d_in: int, d_out: int) -> List[ParamSpec]:
    return [(f"{prefix}.weight", (d_in, d_out), d_in), (f"{prefix}.bias", (d_out,), d_in)]


def _wrn_blocks(config: ModelConfig) -> Iterator[Tuple[str, int, int, int]]:
    """Yield (prefix, c_in, c_out, stride) for every residual block."""
    c_in = WRN_STEM
    for group, (base, stride) in enumerate(zip(WRN_CHANNELS, WRN_STRIDES)):
        c_out = _scaled(base, config.width)
        for block in range(WRN_BLOCKS):
            yield f"g{group}.b{block}", c_in, c_out, stride if block == 0 else 1
            c_in = c_out


def param_specs(config: ModelConfig) -> List[ParamSpec]:
    """Ordered (name, shape, fan_in) for every parameter of ``config``."""
    c, h, w = config.input_shape
    k = config.num_classes
    if config.arch == "linear":
        return _dense_spec("fc", c * h * w, k)
    if config.arch == "mlp":
        hidden = _scaled(MLP_HIDDEN, config.width)
        return _dense_spec("fc1", c * h * w, hidden) + _dense_spec("fc2", hidden, k)
    if config.arch == "small-cnn":
        c1, c2 = (_scaled(base, config.width) for base in SMALL_CNN_CHANNELS)
        flat = c2 * ((h // 2) // 2) * ((w // 2) // 2)
        if flat == 0:
            raise ShapeError(f"small-cnn input {config.input_shape} pools to nothing")
        return _conv_spec("conv1", c, c1, 3) + _conv_spec("conv2", c1, c2, 3) + _dense_spec("fc", flat, k)
    specs = _conv_spec("stem", c, WRN_STEM, 3)
    c_last = WRN_STEM
    for prefix, c_in, c_out, stride in _wrn_blocks(config):
        specs += _conv_spec(f"{prefix}.conv1", c_in, c_out, 3)
        specs += _conv_spec(f"{prefix}.conv2", c_out, c_out, 3)
        if c_in != c_out or stride != 1:
            specs += _conv_spec(f"{prefix}.shortcut", c_in, c_out, 1, bias=False)
        c_last = c_out
    return specs + _dense_spec("fc", c_last, k)


@dataclass(frozen=True)
class ModelParams:
    """Ordered named parameter arrays plus the architecture they belong to.

    Arrays are read-only; updates always produce a new ``ModelParams``.
    """

    config: ModelConfig
    tensors: Dict[str, np.ndarray]

    def __post_init__(self) -> None:
        for array in self.tensors.values():
            array.setflags(write=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.tensors.values())).dtype

    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: np.array(a, dtype=dtype) for n, a in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: a.copy() for n, a in self.tensors.items()})

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of config and every tensor."""
        return (
            self.config == other.config
            and self.names == other.names
            and all(np.array_equal(a, other.tensors[n]) and a.dtype == other.tensors[n].dtype for n, a in self.tensors.items())
        )


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fan-in scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape, fan_in in param_specs(config):
        bound = 1.0 / np.sqrt(fan_in)
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return ModelParams(config, tensors)


def zero_params(config: ModelConfig, dtype=np.float32) -> ModelParams:
    return ModelParams(config, {name: np.zeros(shape, dtype=dtype) for name, shape, _ in param_specs(config)})


# --- forward ------------------------------------------------------------------

Weights = Mapping[str, T.Tensor]


def bind(params: ModelParams, graph: Optional[T.Graph] = None, requires_grad: bool = True) -> Dict[str, T.Tensor]:
    """Parameters as tensors: graph leaves when ``graph`` is given, plain values otherwise."""
    if graph is None:
        return {name: T.as_tensor(array, dtype=array.dtype) for name, array in params.tensors.items()}
    return {name: graph.leaf(array, name=name, requires_grad=requires_grad) for name, array in params.tensors.items()}


def _conv(x: T.Tensor, weights: Weights, prefix: str, stride: int = 1, padding: int = 1) -> T.Tensor:
    out = T.conv2d(x, weights[f"{prefix}.weight"], stride=stride, padding=padding)
    bias = weights.get(f"{prefix}.bias")
    if bias is None:
        return out
    return T.add(out, T.reshape(bias, (bias.shape[0], 1, 1)))


def _dense(x: T.Tensor, weights: Weights, prefix: str) -> T.Tensor:
    return T.add(T.matmul(x, weights[f"{prefix}.weight"]), weights[f"{prefix}.bias"])


def _wrn_forward(config: ModelConfig, x: T.Tensor, weights: Weights) -> T.Tensor:
    out = _conv(x, weights, "stem")
    for prefix, c_in, c_out, stride in _wrn_blocks(config):
        activated = T.relu(out)
        branch = _conv(activated, weights, f"{prefix}.conv1", stride=stride)
        branch = _conv(T.relu(branch), weights, f"{prefix}.conv2")
        if f"{prefix}.shortcut.weight" in weights:
            shortcut = _conv(activated, weights, f"{prefix}.shortcut", stride=stride, padding=0)
        else:
            shortcut = out
        out = T.add(branch, shortcut)
    pooled = T.mean(T.relu(out), axis=(2, 3))
    return _dense(pooled, weights, "fc")


def forward_logits(params: ModelParams, batch: Union[np.ndarray, T.Tensor], weights: Optional[Weights] = None) -> T.Tensor:
    """Logits [n, K] for a batch [n, c, h, w].

    Pass ``weights`` from :func:`bind` with a graph to record the computation.
    """
    config = params.config
    shape = tuple(batch.shape)
    if len(shape) != 4 or shape[1:] != tuple(config.input_shape):
        raise ShapeError(f"batch shape {shape} does not match model input (n, {', '.join(map(str, config.input_shape))})")
    weights = weights if weights is not None else bind(params)
    x = batch if isinstance(batch, T.Tensor) else T.as_tensor(np.asarray(batch, dtype=params.dtype), dtype=params.dtype)
    n = shape[0]
    if config.arch == "linear":
        return _dense(T.reshape(x, (n, -1)), weights, "fc")
    if config.arch == "mlp":
        hidden = T.relu(_dense(T.reshape(x, (n, -1)), weights, "fc1"))
        return _dense(hidden, weights, "fc2")
    if config.arch == "small-cnn":
        out = T.maxpool2d(T.relu(_conv(x, weights, "conv1")))
        out = T.maxpool2d(T.relu(_conv(out, weights, "conv2")))
        return _dense(T.reshape(out, (n, -1)), weights, "fc")
    return _wrn_forward(config, x, weights)


def one_hot(labels: Sequence[int], num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax class per image; ties go to the lowest class index."""
    out = []
    for start in range(0, images.shape[0], batch_size):
        logits = forward_logits(params, images[start : start + batch_size]).numpy()
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def input_gradient(params: ModelParams, images: np.ndarray, labels: Sequence[int], loss_kind: str = "cross_entropy") -> np.ndarray:
    """Gradient of the attack loss with respect to the input batch."""
    graph = T.Graph(dtype=params.dtype)
    weights = bind(params, graph, requires_grad=False)
    x = graph.leaf(images, name="input")
    logits = forward_logits(params, x, weights)
    if loss_kind == "margin":
        loss = T.margin_loss(logits, labels)
    else:
        targets = graph.constant(one_hot(labels, params.config.num_classes))
        loss = T.softmax_cross_entropy(logits, targets)
    graph.set_output(loss)
    return T.backward(graph, [x])[x.node_id]


def loss_graph(params: ModelParams, images: np.ndarray, targets: np.ndarray) -> Tuple[T.Graph, Dict[str, T.Tensor]]:
    """Record soft-label cross-entropy of a batch; parameters are the graph leaves."""
    graph = T.Graph(dtype=params.dtype)
    weights = bind(params, graph)
    logits = forward_logits(params, graph.constant(images), weights)
    graph.set_output(T.softmax_cross_entropy(logits, graph.constant(targets)))
    return graph, weights


def loss_and_grads(params: ModelParams, images: np.ndarray, targets: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Soft-label cross-entropy on a batch and its gradient for every parameter."""
    graph, weights = loss_graph(params, images, targets)
    loss = graph.tensor(graph.output)
    grads = T.backward(graph, weights.values())
    return loss.item(), {name: grads[tensor.node_id] for name, tensor in weights.items()}


# --- optimizer ----------------------------------------------------------------


def decays(name: str) -> bool:
    return name.endswith(".weight")


@dataclass
class OptimState:
    """Momentum buffers and the learning-rate schedule; owned by one trainer."""

    base_lr: float
    momentum: float
    weight_decay: float
    milestones: Tuple[float, ...] = (0.5, 0.75)
    gamma: float = 0.1
    lr: float = 0.0
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.lr:
            self.lr = self.base_lr

    @classmethod
    def for_params(cls, params: ModelParams, config: OptimizerConfig) -> "OptimState":
        return cls(
            base_lr=config.lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
            milestones=tuple(config.milestones),
            gamma=config.gamma,
            buffers={name: np.zeros_like(a) for name, a in params.tensors.items()},
        )

    def lr_for_epoch(self, epoch: int, total_epochs: int) -> float:
        """Base rate times gamma per milestone reached; epochs are 0-based."""
        passed = sum(1 for m in self.milestones if epoch >= int(m * total_epochs))
        return self.base_lr * self.gamma**passed

    def start_epoch(self, epoch: int, total_epochs: int) -> float:
        self.lr = self.lr_for_epoch(epoch, total_epochs)
        return self.lr


def sgd_step(params: ModelParams, grads: Mapping[str, np.ndarray], opt: OptimState) -> ModelParams:
    """v <- m*v + (g + wd*theta); theta <- theta - lr*v. Weight decay skips biases.

    Raises:
        ShapeError: If gradients do not match the parameters.
        NonFiniteError: If any gradient holds NaN/Inf; the step is rejected and
            neither parameters nor momentum buffers change.
    """
    if set(grads) != set(params.tensors):
        raise ShapeError(f"gradient names {sorted(grads)} do not match parameters {params.names}")
    for name, array in params.tensors.items():
        if grads[name].shape != array.shape:
            raise ShapeError(f"gradient for {name} has shape {grads[name].shape}, expected {array.shape}")
        if not np.isfinite(grads[name]).all():
            raise NonFiniteError(f"non-finite gradient for {name}; step rejected")
    updated: Dict[str, np.ndarray] = {}
    for name, theta in params.tensors.items():
        g = np.asarray(grads[name], dtype=theta.dtype)
        if opt.weight_decay and decays(name):
            g = g + theta.dtype.type(opt.weight_decay) * theta
        buffer = opt.buffers.get(name)
        velocity = g if buffer is None else theta.dtype.type(opt.momentum) * buffer + g
        opt.buffers[name] = velocity
        updated[name] = theta - theta.dtype.type(opt.lr) * velocity
    return ModelParams(params.config, updated)


# --- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"M2AT"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(params: ModelParams) -> bytes:
    config = params.config.model_dump_json().encode("utf-8")
    chunks = [struct.pack("<4sI", CHECKPOINT_MAGIC, CHECKPOINT_VERSION), struct.pack("<I", len(config)), config]
    chunks.append(struct.pack("<I", len(params.tensors)))
    for name, array in params.tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.asarray(array, dtype="<f4").tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.source = source
        self.offset = 0

    def take(self, count: int, what: str) -> bytes:
        if self.offset + count > len(self.payload):
            raise CheckpointError(
                f"{self.source}: truncated at byte offset {self.offset} reading {what} "
                f"({count} bytes needed, {len(self.payload) - self.offset} left)"
            )
        chunk = self.payload[self.offset : self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def params_from_bytes(payload: bytes, source: str = "<bytes>") -> ModelParams:
    reader = _Reader(payload, source)
    magic, version = reader.unpack("<4sI", "header")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r} at byte offset 0, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    (config_len,) = reader.unpack("<I", "config length")
    try:
        config = ModelConfig.model_validate(json.loads(reader.take(config_len, "config").decode("utf-8")))
    except (ValueError, ValidationError) as exc:
        raise CheckpointError(f"{source}: invalid config descriptor: {exc}") from None
    (count,) = reader.unpack("<I", "tensor count")
    expected = {name: shape for name, shape, _ in param_specs(config)}
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "name length")
        name = reader.take(name_len, "name").decode("utf-8")
        (ndim,) = reader.unpack("<B", f"{name} rank")
        shape = reader.unpack(f"<{ndim}I", f"{name} shape")
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(reader.take(4 * size, f"{name} data"), dtype="<f4").astype(np.float32)
        tensors[name] = data.reshape(shape)
    if reader.offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - reader.offset} trailing bytes at offset {reader.offset}")
    if {n: tuple(a.shape) for n, a in tensors.items()} != expected:
        raise CheckpointError(f"{source}: tensors do not match the {config.arch} architecture")
    if not all(np.isfinite(a).all() for a in tensors.values()):
        raise CheckpointError(f"{source}: non-finite parameter values")
    return ModelParams(config, {name: tensors[name] for name in expected})


def save_checkpoint(params: ModelParams, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))
    log.info("checkpoint.saved", path=str(path), parameters=params.num_parameters())
    return path


def load_checkpoint(path: Path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    return params_from_bytes(path.read_bytes(), source=str(path))

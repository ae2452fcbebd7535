"""
NumPy training engine for the candidate template.

Every layer implements forward(x, params) and backward(output_grad, params);
backward returns the gradient with respect to the layer input together with
the gradients of the layer's own parameters. Tensors are laid out
[batch, length, channels].
"""
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from architecture import ArchSpec, LayerKind, KERNEL_SIZE, POOL_SIZE
from dataset import seed_entropy

# Set up logging
log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-7
EVAL_BATCH_SIZE = 512

PARAMS_MAGIC = b'TTNN'
PARAMS_VERSION = 1


class TrainingError(RuntimeError):
    """Base class for failures while training a candidate"""


class TrainingDivergedError(TrainingError):
    """Loss or parameters became NaN/Inf"""


class ParamsFormatError(ValueError):
    """A TTNN parameter container is malformed or does not fit the spec"""


class ModelParams:
    """Named parameter tensors of one candidate, in template order"""

    def __init__(self, tensors: "OrderedDict[str, np.ndarray]"):
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self) -> List[str]:
        return list(self.tensors.keys())

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(OrderedDict((name, value.copy()) for name, value in self.tensors.items()))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(OrderedDict((name, np.zeros_like(value)) for name, value in self.tensors.items()))

    def all_finite(self) -> bool:
        return all(np.isfinite(value).all() for value in self.tensors.values())

    def count(self) -> int:
        return int(sum(value.size for value in self.tensors.values()))

    def __repr__(self):
        shapes = ', '.join(f"{name}={value.shape}" for name, value in self.tensors.items())
        return f"ModelParams({shapes})"


def param_shapes(spec: ArchSpec) -> "OrderedDict[str, Tuple[int, ...]]":
    """Names and shapes of every trainable tensor of a spec"""
    shapes = OrderedDict()
    conv_index = 0
    for layer in spec.layers:
        if layer.kind == LayerKind.DS_CONV:
            prefix = f"conv{conv_index}"
            shapes[f"{prefix}.depthwise"] = (KERNEL_SIZE, layer.in_channels)
            shapes[f"{prefix}.pointwise"] = (layer.in_channels, layer.out_channels)
            shapes[f"{prefix}.bias"] = (layer.out_channels,)
            conv_index += 1
        elif layer.kind == LayerKind.DENSE_RELU:
            shapes["dense.weight"] = (layer.in_channels, layer.out_channels)
            shapes["dense.bias"] = (layer.out_channels,)
        elif layer.kind == LayerKind.DENSE_SOFTMAX:
            shapes["classifier.weight"] = (layer.in_channels, layer.out_channels)
            shapes["classifier.bias"] = (layer.out_channels,)
    return shapes


def _round_down(limit: float, dtype) -> np.ndarray:
    """Largest value of dtype not above limit"""
    bound = np.asarray(limit, dtype=dtype)
    if float(bound) > limit:
        bound = np.nextafter(bound, np.asarray(0, dtype=dtype))
    return bound


def init_params(spec: ArchSpec, seed: int, dtype=np.float32) -> ModelParams:
    """
    He-uniform for weights feeding a ReLU, Glorot-uniform for the classifier,
    zero biases. The depthwise fan-in is the kernel size (one input channel per filter).
    """
    rng = np.random.default_rng(seed_entropy(seed))
    tensors = OrderedDict()
    for name, shape in param_shapes(spec).items():
        if name.endswith('.bias'):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if name.endswith('.depthwise'):
            limit = np.sqrt(6.0 / KERNEL_SIZE)
        elif name == 'classifier.weight':
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        else:
            limit = np.sqrt(6.0 / shape[0])
        bound = _round_down(limit, dtype)
        tensors[name] = np.clip(rng.uniform(-limit, limit, size=shape).astype(dtype), -bound, bound)
    return ModelParams(tensors)


class Layer:
    """Base class: a differentiable step of the template"""
    param_names: Tuple[str, ...] = ()

    def forward(self, x: np.ndarray, params: ModelParams) -> np.ndarray:
        raise NotImplementedError

    def backward(self, output_grad: np.ndarray, params: ModelParams) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError


class SeparableConv1D(Layer):
    """Depthwise kernel 3 (zero 'same' padding, no bias), pointwise 1x1 with bias, ReLU"""

    def __init__(self, prefix: str):
        self.depthwise = f"{prefix}.depthwise"
        self.pointwise = f"{prefix}.pointwise"
        self.bias = f"{prefix}.bias"
        self.param_names = (self.depthwise, self.pointwise, self.bias)
        self._cache = None

    def forward(self, x, params):
        kernel = params[self.depthwise]
        length = x.shape[1]
        pad = KERNEL_SIZE // 2
        padded = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        depthwise = padded[:, 0:length] * kernel[0]
        for j in range(1, KERNEL_SIZE):
            depthwise = depthwise + padded[:, j:j + length] * kernel[j]
        pre = depthwise @ params[self.pointwise] + params[self.bias]
        self._cache = (padded, depthwise, pre)
        return np.maximum(pre, 0)

    def backward(self, output_grad, params):
        padded, depthwise, pre = self._cache
        length = depthwise.shape[1]
        pre_grad = output_grad * (pre > 0)
        grads = {
            self.pointwise: np.tensordot(depthwise, pre_grad, axes=([0, 1], [0, 1])),
            self.bias: pre_grad.sum(axis=(0, 1)),
        }
        depthwise_grad = pre_grad @ params[self.pointwise].T
        kernel = params[self.depthwise]
        kernel_grad = np.empty_like(kernel)
        padded_grad = np.zeros_like(padded)
        for j in range(KERNEL_SIZE):
            kernel_grad[j] = (depthwise_grad * padded[:, j:j + length]).sum(axis=(0, 1))
            padded_grad[:, j:j + length] += depthwise_grad * kernel[j]
        grads[self.depthwise] = kernel_grad
        pad = KERNEL_SIZE // 2
        return padded_grad[:, pad:pad + length], grads


class MaxPool1D(Layer):
    """Pool size 2, stride 2; odd trailing element dropped; ties go to the earliest index"""

    def __init__(self):
        self._cache = None

    def forward(self, x, params):
        batch, length, channels = x.shape
        out_length = length // POOL_SIZE
        windows = x[:, :out_length * POOL_SIZE].reshape(batch, out_length, POOL_SIZE, channels)
        argmax = windows.argmax(axis=2)
        self._cache = (x.shape, argmax)
        return np.take_along_axis(windows, argmax[:, :, None, :], axis=2)[:, :, 0, :]

    def backward(self, output_grad, params):
        shape, argmax = self._cache
        batch, length, channels = shape
        out_length = argmax.shape[1]
        windows_grad = np.zeros((batch, out_length, POOL_SIZE, channels), dtype=output_grad.dtype)
        np.put_along_axis(windows_grad, argmax[:, :, None, :], output_grad[:, :, None, :], axis=2)
        input_grad = np.zeros(shape, dtype=output_grad.dtype)
        input_grad[:, :out_length * POOL_SIZE] = windows_grad.reshape(batch, out_length * POOL_SIZE, channels)
        return input_grad, {}


class GlobalAveragePool1D(Layer):

    def __init__(self):
        self._length = None

    def forward(self, x, params):
        self._length = x.shape[1]
        return x.mean(axis=1)

    def backward(self, output_grad, params):
        grad = np.repeat(output_grad[:, None, :] / self._length, self._length, axis=1)
        return grad, {}


class Dense(Layer):
    """Fully connected layer; ReLU unless it is the classifier (raw logits)"""

    def __init__(self, prefix: str, relu: bool):
        self.weight = f"{prefix}.weight"
        self.bias = f"{prefix}.bias"
        self.relu = relu
        self.param_names = (self.weight, self.bias)
        self._cache = None

    def forward(self, x, params):
        pre = x @ params[self.weight] + params[self.bias]
        self._cache = (x, pre)
        return np.maximum(pre, 0) if self.relu else pre

    def backward(self, output_grad, params):
        x, pre = self._cache
        if self.relu:
            output_grad = output_grad * (pre > 0)
        grads = {
            self.weight: x.T @ output_grad,
            self.bias: output_grad.sum(axis=0),
        }
        return output_grad @ params[self.weight].T, grads


def build_layers(spec: ArchSpec) -> List[Layer]:
    layers = []
    conv_index = 0
    for layer in spec.layers:
        if layer.kind == LayerKind.DS_CONV:
            layers.append(SeparableConv1D(f"conv{conv_index}"))
            conv_index += 1
        elif layer.kind == LayerKind.MAX_POOL:
            layers.append(MaxPool1D())
        elif layer.kind == LayerKind.GAP:
            layers.append(GlobalAveragePool1D())
        elif layer.kind == LayerKind.DENSE_RELU:
            layers.append(Dense("dense", relu=True))
        else:
            layers.append(Dense("classifier", relu=False))
    return layers


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


class Network:
    """Layer stack of one spec; caches activations between forward and backward"""

    def __init__(self, spec: ArchSpec):
        self.spec = spec
        self.layers = build_layers(spec)
        self.last_logits = None

    def _check_batch(self, batch: np.ndarray):
        expected = (self.spec.input.length, self.spec.input.channels)
        if batch.ndim != 3 or tuple(batch.shape[1:]) != expected:
            raise ValueError(f"Batch shape {batch.shape} does not match [B x {expected[0]} x {expected[1]}]")

    def _check_labels(self, labels: np.ndarray, batch_size: int):
        if labels.shape != (batch_size,):
            raise ValueError(f"Expected {batch_size} labels, got shape {labels.shape}")
        num_classes = self.spec.input.num_classes
        if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
            raise ValueError(f"Labels must lie in [0, {num_classes})")

    def logits(self, params: ModelParams, batch: np.ndarray) -> np.ndarray:
        self._check_batch(batch)
        activation = batch
        for layer in self.layers:
            activation = layer.forward(activation, params)
        self.last_logits = activation
        return activation

    def forward(self, params: ModelParams, batch: np.ndarray) -> np.ndarray:
        return softmax(self.logits(params, batch))

    def backward(self, params: ModelParams, batch: np.ndarray, labels: np.ndarray) -> Tuple[float, ModelParams]:
        """Mean cross-entropy over the batch and its gradient for every parameter"""
        logits = self.logits(params, batch)
        self._check_labels(labels, batch.shape[0])
        rows = np.arange(batch.shape[0])
        log_probs = log_softmax(logits)
        loss = float(-log_probs[rows, labels].mean())

        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        grad /= batch.shape[0]

        grads = params.zeros_like()
        for layer in reversed(self.layers):
            grad, layer_grads = layer.backward(grad, params)
            for name, value in layer_grads.items():
                grads[name] = value.astype(params[name].dtype, copy=False)
        return loss, grads


def forward(spec: ArchSpec, params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Class probabilities [B x num_classes] for a batch [B x L x C]"""
    return Network(spec).forward(params, batch)


def backward(spec: ArchSpec, params: ModelParams, batch: np.ndarray,
             labels: np.ndarray) -> Tuple[float, ModelParams]:
    return Network(spec).backward(params, batch, labels)


@dataclass
class AdamState:
    """Step counter and first/second moment estimates"""
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams) -> "AdamState":
        return cls(
            t=0,
            m={name: np.zeros_like(value) for name, value in params.items()},
            v={name: np.zeros_like(value) for name, value in params.items()},
        )


def adam_step(params: ModelParams, gradients: ModelParams, state: AdamState,
              learning_rate: float) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update (beta1 0.9, beta2 0.999, epsilon 1e-7), in place"""
    if not state.m:
        state = AdamState.fresh(params)
    state.t += 1
    correction1 = 1.0 - ADAM_BETA1 ** state.t
    correction2 = 1.0 - ADAM_BETA2 ** state.t
    for name, value in params.items():
        g = gradients[name]
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        value -= (learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPSILON)).astype(value.dtype, copy=False)
    return params, state


@dataclass(frozen=True)
class PlateauSchedule:
    """Learning-rate reduction when validation accuracy stops improving"""
    factor: float = 0.5
    patience: int = 20
    min_lr: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.factor < 1.0:
            raise ValueError(f"factor must lie in (0, 1), got {self.factor}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.min_lr <= 0:
            raise ValueError(f"min_lr must be positive, got {self.min_lr}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    learning_rate: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    plateau_schedule: Optional[PlateauSchedule] = None
    dtype: str = 'float32'

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dtype not in ('float32', 'float64'):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")


class PlateauTracker:
    """Tracks the best validation accuracy and lowers the learning rate after `patience` flat epochs"""

    def __init__(self, learning_rate: float, schedule: PlateauSchedule):
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.best = -np.inf
        self.wait = 0

    def update(self, val_accuracy: float) -> bool:
        """Record one epoch; returns True when it is a new best"""
        if val_accuracy > self.best:
            self.best = val_accuracy
            self.wait = 0
            return True
        self.wait += 1
        if self.wait >= self.schedule.patience:
            reduced = max(self.learning_rate * self.schedule.factor, self.schedule.min_lr)
            if reduced < self.learning_rate:
                log.info(f"Validation accuracy flat for {self.wait} epochs, "
                         f"learning rate {self.learning_rate:g} -> {reduced:g}")
                self.learning_rate = reduced
            self.wait = 0
        return False


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float
    learning_rate: float

    def to_dict(self) -> Dict[str, float]:
        return {
            'epoch': self.epoch,
            'loss': self.loss,
            'train_accuracy': self.train_accuracy,
            'val_accuracy': self.val_accuracy,
            'learning_rate': self.learning_rate,
        }


@dataclass
class TrainResult:
    best_params: ModelParams
    best_val_accuracy: float
    best_epoch: int
    history: List[EpochRecord]


def evaluate_accuracy(spec: ArchSpec, params: ModelParams, samples: np.ndarray, labels: np.ndarray,
                      network: Optional[Network] = None) -> float:
    """Fraction of windows whose argmax prediction equals the label"""
    if labels.size == 0:
        log.warning("Accuracy requested on an empty split, reporting 0")
        return 0.0
    network = network or Network(spec)
    dtype = next(iter(params.tensors.values())).dtype
    correct = 0
    for start in range(0, labels.size, EVAL_BATCH_SIZE):
        batch = samples[start:start + EVAL_BATCH_SIZE].astype(dtype, copy=False)
        predictions = network.logits(params, batch).argmax(axis=1)
        correct += int((predictions == labels[start:start + EVAL_BATCH_SIZE]).sum())
    return correct / labels.size


def _train_epoch(network: Network, params: ModelParams, state: AdamState, x: np.ndarray, y: np.ndarray,
                 learning_rate: float, batch_size: int, rng: np.random.Generator) -> Tuple[float, float, AdamState]:
    order = rng.permutation(y.size)
    total_loss = 0.0
    correct = 0
    for start in range(0, y.size, batch_size):
        idx = order[start:start + batch_size]
        batch = x[idx]
        loss, grads = network.backward(params, batch, y[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"Non-finite loss while training {network.spec.compact()}")
        correct += int((network.last_logits.argmax(axis=1) == y[idx]).sum())
        params, state = adam_step(params, grads, state, learning_rate)
        if not params.all_finite():
            raise TrainingDivergedError(f"Non-finite parameters while training {network.spec.compact()}")
        total_loss += loss * idx.size
        log.debug(f"{network.spec.compact()} batch at {start}: loss {loss:.4f}")
    return total_loss / max(y.size, 1), correct / max(y.size, 1), state


def _training_arrays(dataset, dtype) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    return (dataset.train_x.astype(dtype), dataset.train_y,
            dataset.val_x.astype(dtype), dataset.val_y)


def train_candidate(spec: ArchSpec, dataset, cfg: TrainConfig) -> float:
    """
    Short training of a search candidate.

    Trains for exactly cfg.epochs epochs with Adam on the training split and
    returns the accuracy on the validation split.

    Raises:
        TrainingDivergedError: loss or parameters became non-finite
    """
    dtype = np.dtype(cfg.dtype)
    train_x, train_y, val_x, val_y = _training_arrays(dataset, dtype)
    network = Network(spec)
    params = init_params(spec, cfg.seed, dtype=dtype)
    state = AdamState.fresh(params)
    rng = np.random.default_rng([seed_entropy(cfg.seed), 1])
    for epoch in range(1, cfg.epochs + 1):
        loss, _, state = _train_epoch(network, params, state, train_x, train_y,
                                      cfg.learning_rate, cfg.batch_size, rng)
        log.debug(f"{spec.compact()} epoch {epoch}/{cfg.epochs}: loss {loss:.4f}")
    return evaluate_accuracy(spec, params, val_x, val_y, network)


def train_full(spec: ArchSpec, dataset, cfg: TrainConfig) -> TrainResult:
    """
    Full training with plateau learning-rate reduction and best-epoch checkpointing.

    After every epoch the validation accuracy is measured; the parameters of
    the best epoch (earliest on ties) are returned together with the complete
    per-epoch history.
    """
    if cfg.plateau_schedule is None:
        raise ValueError("train_full needs a plateau_schedule")
    dtype = np.dtype(cfg.dtype)
    train_x, train_y, val_x, val_y = _training_arrays(dataset, dtype)
    network = Network(spec)
    params = init_params(spec, cfg.seed, dtype=dtype)
    state = AdamState.fresh(params)
    rng = np.random.default_rng([seed_entropy(cfg.seed), 1])
    tracker = PlateauTracker(cfg.learning_rate, cfg.plateau_schedule)

    history = []
    best_params = params.copy()
    best_epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        learning_rate = tracker.learning_rate
        loss, train_accuracy, state = _train_epoch(network, params, state, train_x, train_y,
                                                   learning_rate, cfg.batch_size, rng)
        val_accuracy = evaluate_accuracy(spec, params, val_x, val_y, network)
        history.append(EpochRecord(epoch, loss, train_accuracy, val_accuracy, learning_rate))
        if tracker.update(val_accuracy):
            best_params = params.copy()
            best_epoch = epoch
        log.info(f"Epoch {epoch}/{cfg.epochs}: loss {loss:.4f}, train {train_accuracy:.4f}, "
                 f"val {val_accuracy:.4f}, lr {learning_rate:g}")

    best_val_accuracy = max(record.val_accuracy for record in history)
    return TrainResult(best_params=best_params, best_val_accuracy=best_val_accuracy,
                       best_epoch=best_epoch, history=history)


def save_params(params: ModelParams, path: str):
    """
    Write a TTNN container: magic, version u16, tensor count u16, then per
    tensor rank u8, dims u32 each and float32 little-endian payload.
    """
    with open(path, 'wb') as f:
        f.write(struct.pack('<4sHH', PARAMS_MAGIC, PARAMS_VERSION, len(params)))
        for _, value in params.items():
            f.write(struct.pack('<B', value.ndim))
            f.write(struct.pack(f'<{value.ndim}I', *value.shape))
            f.write(np.ascontiguousarray(value, dtype='<f4').tobytes())
    log.info(f"Saved {len(params)} tensors ({params.count()} values) to {path}")


def load_params(path: str, spec: Optional[ArchSpec] = None) -> ModelParams:
    """Read a TTNN container; with a spec, names are assigned and shapes validated"""
    with open(path, 'rb') as f:
        blob = f.read()
    try:
        magic, version, count = struct.unpack_from('<4sHH', blob, 0)
    except struct.error as e:
        raise ParamsFormatError(f"{path} is too short for a TTNN header") from e
    if magic != PARAMS_MAGIC:
        raise ParamsFormatError(f"{path} does not start with {PARAMS_MAGIC!r}")
    if version != PARAMS_VERSION:
        raise ParamsFormatError(f"Unsupported TTNN version {version}")

    offset = struct.calcsize('<4sHH')
    arrays = []
    try:
        for _ in range(count):
            (rank,) = struct.unpack_from('<B', blob, offset)
            offset += 1
            dims = struct.unpack_from(f'<{rank}I', blob, offset)
            offset += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            payload = blob[offset:offset + 4 * size]
            if len(payload) != 4 * size:
                raise ParamsFormatError(f"Truncated tensor payload in {path}")
            arrays.append(np.frombuffer(payload, dtype='<f4').reshape(dims).astype(np.float32))
            offset += 4 * size
    except struct.error as e:
        raise ParamsFormatError(f"Truncated tensor header in {path}") from e
    if offset != len(blob):
        raise ParamsFormatError(f"{len(blob) - offset} trailing bytes in {path}")

    if spec is None:
        return ModelParams(OrderedDict((f"tensor{i}", value) for i, value in enumerate(arrays)))

    shapes = param_shapes(spec)
    if len(shapes) != len(arrays):
        raise ParamsFormatError(f"{path} holds {len(arrays)} tensors, {spec.compact()} needs {len(shapes)}")
    tensors = OrderedDict()
    for (name, shape), value in zip(shapes.items(), arrays):
        if tuple(value.shape) != tuple(shape):
            raise ParamsFormatError(f"Tensor {name} has shape {value.shape}, expected {shape}")
        tensors[name] = value
    return ModelParams(tensors)

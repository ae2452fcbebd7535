import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Dict, Any, Tuple

import pandas as pd

# Set up logging
log = logging.getLogger(__name__)

KERNEL_SIZE = 3
POOL_SIZE = 2


class ArchError(ValueError):
    """Base class for invalid architecture requests"""


class InvalidArchError(ArchError):
    """Raised for non-positive k, negative c or a malformed input shape"""


class ShapeInfeasibleError(ArchError):
    """Raised when the input length cannot host the requested number of pools"""


class LayerKind(Enum):
    """Layer types of the candidate template"""
    DS_CONV = "DepthwiseSeparableConv1D"
    MAX_POOL = "MaxPool1D"
    GAP = "GlobalAveragePool1D"
    DENSE_RELU = "DenseReLU"
    DENSE_SOFTMAX = "DenseSoftmax"


@dataclass(frozen=True)
class InputShape:
    """Window length, sensor channel count and number of classes of a dataset"""
    length: int
    channels: int
    num_classes: int

    def __post_init__(self):
        if self.length < 1:
            raise InvalidArchError(f"length must be >= 1, got {self.length}")
        if self.channels < 1:
            raise InvalidArchError(f"channels must be >= 1, got {self.channels}")
        if self.num_classes < 2:
            raise InvalidArchError(f"num_classes must be >= 2, got {self.num_classes}")

    def to_dict(self) -> Dict[str, int]:
        return {'length': self.length, 'channels': self.channels, 'num_classes': self.num_classes}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "InputShape":
        return cls(int(data['length']), int(data['channels']), int(data['num_classes']))


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an instantiated candidate, with its tensor shapes"""
    kind: LayerKind
    in_length: int
    out_length: int
    in_channels: int
    out_channels: int
    filters_or_units: Optional[int] = None
    kernel_size: Optional[int] = None
    pool_size: Optional[int] = None

    def describe(self) -> str:
        if self.kind == LayerKind.DS_CONV:
            return f"DSConv1D({self.in_channels}->{self.out_channels}, k={self.kernel_size})"
        if self.kind == LayerKind.MAX_POOL:
            return f"MaxPool1D({self.pool_size})"
        if self.kind == LayerKind.GAP:
            return "GlobalAveragePool1D"
        if self.kind == LayerKind.DENSE_RELU:
            return f"Dense({self.filters_or_units}, relu)"
        return f"Dense({self.filters_or_units}, softmax)"

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'in_length': self.in_length,
            'out_length': self.out_length,
            'in_channels': self.in_channels,
            'out_channels': self.out_channels,
            'filters_or_units': self.filters_or_units,
            'kernel_size': self.kernel_size,
            'pool_size': self.pool_size,
        }


@dataclass(frozen=True)
class ArchSpec:
    """
    A concrete candidate architecture.

    The layer sequence is one DS-Conv1D(k), then c blocks of
    [MaxPool1D(2), DS-Conv1D(k_i)], then GlobalAveragePool1D,
    DenseReLU(k_{c+1}) and DenseSoftmax(num_classes).
    """
    k: int
    c: int
    input: InputShape
    layers: Tuple[LayerSpec, ...] = ()

    def compact(self) -> str:
        """Short form used in reports, e.g. 'k=4,c=0'"""
        return f"k={self.k},c={self.c}"

    def conv_layers(self) -> List[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == LayerKind.DS_CONV]

    def layer_table(self) -> pd.DataFrame:
        rows = []
        for index, layer in enumerate(self.layers):
            rows.append({
                'layer': index,
                'type': layer.describe(),
                'input': f"{layer.in_length}x{layer.in_channels}",
                'output': f"{layer.out_length}x{layer.out_channels}",
            })
        return pd.DataFrame(rows, columns=['layer', 'type', 'input', 'output'])

    def describe(self) -> str:
        """Human-readable layer table"""
        header = f"Architecture {self.compact()} for input {self.input.length}x{self.input.channels}, " \
                 f"{self.input.num_classes} classes"
        return header + "\n" + self.layer_table().to_string(index=False)


def compute_c_max(length: int) -> int:
    """Number of size-2 max pools the length admits before it reaches 1"""
    if length < 1:
        raise InvalidArchError(f"length must be >= 1, got {length}")
    count = 0
    while length >= POOL_SIZE:
        length //= POOL_SIZE
        count += 1
    return count


def grow_filters(previous: int) -> int:
    # round_half_up(1.5 * previous) in exact integer arithmetic
    return max(1, (3 * previous + 1) // 2)


def filters_sequence(k: int, c: int) -> List[int]:
    """
    Filter counts [k_0, k_1, ..., k_c, k_{c+1}] of the template.

    The first c + 1 entries are the DS-Conv1D filter counts and the last one is
    the width of the hidden dense layer.
    """
    if k < 1:
        raise InvalidArchError(f"k must be >= 1, got {k}")
    if c < 0:
        raise InvalidArchError(f"c must be >= 0, got {c}")
    sequence = [k]
    for _ in range(c + 1):
        sequence.append(grow_filters(sequence[-1]))
    return sequence


def _ds_conv(length: int, in_channels: int, filters: int) -> LayerSpec:
    return LayerSpec(
        kind=LayerKind.DS_CONV,
        in_length=length,
        out_length=length,
        in_channels=in_channels,
        out_channels=filters,
        filters_or_units=filters,
        kernel_size=KERNEL_SIZE,
    )


def build_arch_spec(k: int, c: int, input_shape: InputShape) -> ArchSpec:
    """
    Instantiate the template for (k, c) and the dataset's input shape.

    Args:
        k: filter count of the first depthwise separable convolution
        c: number of repeated [MaxPool1D, DS-Conv1D] blocks
        input_shape: window length, channels and class count

    Raises:
        InvalidArchError: k < 1 or c < 0
        ShapeInfeasibleError: c exceeds compute_c_max(input_shape.length)
    """
    if k < 1:
        raise InvalidArchError(f"k must be >= 1, got {k}")
    if c < 0:
        raise InvalidArchError(f"c must be >= 0, got {c}")
    c_max = compute_c_max(input_shape.length)
    if c > c_max:
        raise ShapeInfeasibleError(
            f"c={c} needs {c} pools but input length {input_shape.length} admits only {c_max}")

    filters = filters_sequence(k, c)
    layers = []
    length = input_shape.length
    channels = input_shape.channels

    layers.append(_ds_conv(length, channels, filters[0]))
    channels = filters[0]

    for block in range(1, c + 1):
        pooled = length // POOL_SIZE
        layers.append(LayerSpec(
            kind=LayerKind.MAX_POOL,
            in_length=length,
            out_length=pooled,
            in_channels=channels,
            out_channels=channels,
            pool_size=POOL_SIZE,
        ))
        length = pooled
        layers.append(_ds_conv(length, channels, filters[block]))
        channels = filters[block]

    layers.append(LayerSpec(
        kind=LayerKind.GAP,
        in_length=length,
        out_length=1,
        in_channels=channels,
        out_channels=channels,
    ))
    hidden = filters[c + 1]
    layers.append(LayerSpec(
        kind=LayerKind.DENSE_RELU,
        in_length=1,
        out_length=1,
        in_channels=channels,
        out_channels=hidden,
        filters_or_units=hidden,
    ))
    layers.append(LayerSpec(
        kind=LayerKind.DENSE_SOFTMAX,
        in_length=1,
        out_length=1,
        in_channels=hidden,
        out_channels=input_shape.num_classes,
        filters_or_units=input_shape.num_classes,
    ))

    log.debug(f"Built {len(layers)}-layer spec k={k}, c={c}, filters={filters}")
    return ArchSpec(k=k, c=c, input=input_shape, layers=tuple(layers))

"""
Analytical resource model of an int8-quantized candidate.

Weights are stored as int8 (1 byte each), biases as int32 (4 bytes each) and
activations as int8 (1 byte per element). RAM is the largest sum of input and
output buffers over all execution steps, where the depthwise and the
pointwise stage of a separable convolution count as separate steps.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Any, List

from architecture import ArchSpec, LayerKind, KERNEL_SIZE

# Set up logging
log = logging.getLogger(__name__)

WEIGHT_BYTES = 1
BIAS_BYTES = 4
ACTIVATION_BYTES = 1

# Stands in for every field of a candidate that could not be built at all
UNBUILDABLE = 2 ** 63 - 1


@dataclass(frozen=True)
class ProfilerConfig:
    """Runtime-specific constants added on top of the cost model"""
    arena_overhead_bytes: int = 0
    model_overhead_bytes: int = 0
    name: str = "exact-zero"

    def __post_init__(self):
        if self.arena_overhead_bytes < 0 or self.model_overhead_bytes < 0:
            raise ValueError("Profiler overheads must be non-negative")

    @classmethod
    def from_profile(cls, name: str) -> "ProfilerConfig":
        """Look up one of the published profiles by name"""
        if name not in PROFILES:
            raise ValueError(f"Unknown profiler profile '{name}', expected one of {sorted(PROFILES)}")
        arena, model = PROFILES[name]
        return cls(arena_overhead_bytes=arena, model_overhead_bytes=model, name=name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'arena_overhead_bytes': self.arena_overhead_bytes,
            'model_overhead_bytes': self.model_overhead_bytes,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ProfilerConfig":
        return cls(
            arena_overhead_bytes=int(data.get('arena_overhead_bytes', 0)),
            model_overhead_bytes=int(data.get('model_overhead_bytes', 0)),
            name=data.get('name', 'custom'),
        )


PROFILES = {
    'exact-zero': (0, 0),
    'mcu-default': (2048, 4096),
}


@dataclass(frozen=True)
class ResourceEstimate:
    """RAM bytes, FLASH bytes and MACs of one inference"""
    ram_bytes: int
    flash_bytes: int
    mac_count: int

    @classmethod
    def unbuildable(cls) -> "ResourceEstimate":
        return cls(UNBUILDABLE, UNBUILDABLE, UNBUILDABLE)

    def to_dict(self) -> Dict[str, int]:
        return {'ram_bytes': self.ram_bytes, 'flash_bytes': self.flash_bytes, 'mac_count': self.mac_count}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ResourceEstimate":
        return cls(int(data['ram_bytes']), int(data['flash_bytes']), int(data['mac_count']))

    def describe(self) -> str:
        return f"RAM {self.ram_bytes:,} B, FLASH {self.flash_bytes:,} B, MAC {self.mac_count:,}"


@dataclass(frozen=True)
class ResourceLimits:
    """User constraints checked by the feasibility gate"""
    ram_max: int
    flash_max: int
    mac_max: int

    def __post_init__(self):
        if self.ram_max <= 0 or self.flash_max <= 0 or self.mac_max <= 0:
            raise ValueError(f"Resource limits must be positive, got {self}")

    @classmethod
    def from_kb(cls, ram_kb: float, flash_kb: float, mac: int) -> "ResourceLimits":
        return cls(ram_max=int(ram_kb * 1024), flash_max=int(flash_kb * 1024), mac_max=int(mac))

    def to_dict(self) -> Dict[str, int]:
        return {'ram_max': self.ram_max, 'flash_max': self.flash_max, 'mac_max': self.mac_max}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ResourceLimits":
        return cls(int(data['ram_max']), int(data['flash_max']), int(data['mac_max']))


def layer_costs(spec: ArchSpec) -> List[Dict[str, Any]]:
    """
    Per execution step costs of a spec.

    Returns one row per step with the step name, MACs, weight count, bias count
    and live activation bytes (input + output buffer). A separable convolution
    yields a depthwise and a pointwise row.
    """
    steps = []
    for index, layer in enumerate(spec.layers):
        in_elems = layer.in_length * layer.in_channels
        out_elems = layer.out_length * layer.out_channels
        if layer.kind == LayerKind.DS_CONV:
            # depthwise: per-channel kernel, no bias, output keeps the input channels
            depthwise_out = layer.out_length * layer.in_channels
            steps.append({
                'layer': index,
                'step': 'depthwise',
                'macs': layer.out_length * layer.in_channels * KERNEL_SIZE,
                'weights': KERNEL_SIZE * layer.in_channels,
                'biases': 0,
                'live_bytes': (in_elems + depthwise_out) * ACTIVATION_BYTES,
            })
            steps.append({
                'layer': index,
                'step': 'pointwise',
                'macs': layer.out_length * layer.in_channels * layer.out_channels,
                'weights': layer.in_channels * layer.out_channels,
                'biases': layer.out_channels,
                'live_bytes': (depthwise_out + out_elems) * ACTIVATION_BYTES,
            })
        elif layer.kind in (LayerKind.DENSE_RELU, LayerKind.DENSE_SOFTMAX):
            steps.append({
                'layer': index,
                'step': 'dense' if layer.kind == LayerKind.DENSE_RELU else 'classifier',
                'macs': layer.in_channels * layer.out_channels,
                'weights': layer.in_channels * layer.out_channels,
                'biases': layer.out_channels,
                'live_bytes': (in_elems + out_elems) * ACTIVATION_BYTES,
            })
        else:
            steps.append({
                'layer': index,
                'step': 'maxpool' if layer.kind == LayerKind.MAX_POOL else 'gap',
                'macs': 0,
                'weights': 0,
                'biases': 0,
                'live_bytes': (in_elems + out_elems) * ACTIVATION_BYTES,
            })
    return steps


def mac_of(spec: ArchSpec) -> int:
    """Multiply-accumulates of one inference; bias additions are not counted"""
    return sum(step['macs'] for step in layer_costs(spec))


def flash_of(spec: ArchSpec, cfg: ProfilerConfig) -> int:
    """int8 weight bytes + int32 bias bytes + model overhead"""
    steps = layer_costs(spec)
    weights = sum(step['weights'] for step in steps)
    biases = sum(step['biases'] for step in steps)
    return weights * WEIGHT_BYTES + biases * BIAS_BYTES + cfg.model_overhead_bytes


def ram_of(spec: ArchSpec, cfg: ProfilerConfig) -> int:
    """Peak live input + output activation bytes + arena overhead"""
    peak = max(step['live_bytes'] for step in layer_costs(spec))
    return peak + cfg.arena_overhead_bytes


def profile(spec: ArchSpec, cfg: ProfilerConfig) -> ResourceEstimate:
    estimate = ResourceEstimate(
        ram_bytes=ram_of(spec, cfg),
        flash_bytes=flash_of(spec, cfg),
        mac_count=mac_of(spec),
    )
    log.debug(f"Profiled {spec.compact()}: {estimate.describe()}")
    return estimate


def check_feasibility(est: ResourceEstimate, limits: ResourceLimits) -> bool:
    """True iff ram, flash and mac are all within their (inclusive) limits"""
    return (est.ram_bytes <= limits.ram_max) and \
        (est.flash_bytes <= limits.flash_max) and \
        (est.mac_count <= limits.mac_max)

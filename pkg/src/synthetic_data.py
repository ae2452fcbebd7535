import logging

import numpy as np

from architecture import InputShape
from dataset import Dataset, seed_entropy

# Set up logging
log = logging.getLogger(__name__)

CLASS_NAMES = ['sinusoid', 'square', 'sawtooth']


def _waveform(label: int, phase: np.ndarray) -> np.ndarray:
    """Unit-amplitude waveform of the given class at phase (in cycles)"""
    if label == 0:
        return np.sin(2.0 * np.pi * phase)
    if label == 1:
        return np.where(np.mod(phase, 1.0) < 0.5, 1.0, -1.0)
    return 2.0 * np.mod(phase, 1.0) - 1.0


def make_waveform_dataset(n: int = 1500, length: int = 64, channels: int = 3,
                          noise: float = 0.1, seed: int = 0) -> Dataset:
    """
    Three-class synthetic windows: 0 = sinusoid, 1 = square, 2 = sawtooth.

    Every window draws its own frequency (1 to 4 cycles per window), amplitude
    and start phase; each channel gets an extra phase offset. Gaussian noise
    with standard deviation `noise` is added. Class counts differ by at most one.
    """
    if n < len(CLASS_NAMES):
        raise ValueError(f"Need at least {len(CLASS_NAMES)} windows, got {n}")
    rng = np.random.default_rng(seed_entropy(seed))
    labels = np.arange(n, dtype=np.int64) % len(CLASS_NAMES)
    labels = labels[rng.permutation(n)]

    t = np.arange(length, dtype=np.float64) / length
    samples = np.empty((n, length, channels), dtype=np.float32)
    for i in range(n):
        cycles = rng.uniform(1.0, 4.0)
        amplitude = rng.uniform(0.5, 1.5)
        start = rng.uniform(0.0, 1.0)
        offsets = rng.uniform(0.0, 1.0, size=channels)
        phase = start + cycles * t[:, None] + offsets[None, :]
        window = amplitude * _waveform(int(labels[i]), phase)
        window += rng.normal(0.0, noise, size=window.shape)
        samples[i] = window.astype(np.float32)

    log.info(f"Generated {n} synthetic windows of {length}x{channels} (noise {noise})")
    return Dataset(samples=samples, labels=labels, meta=InputShape(length, channels, len(CLASS_NAMES)))

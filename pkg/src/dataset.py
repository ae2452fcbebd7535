import os
import json
import hashlib
import logging
import re
from dataclasses import dataclass, replace
from typing import Optional, Tuple, Dict, Any

import numpy as np
import pandas as pd

from architecture import InputShape, InvalidArchError

# Set up logging
log = logging.getLogger(__name__)

FORMAT_VERSION = 1
META_FILE = 'meta.json'
DATA_FILE = 'data.bin'
LABELS_FILE = 'labels.bin'
DEFAULT_VAL_FRACTION = 0.2
STD_EPSILON = 1e-12
MAX_LABELS = 1 << 16
SEED_MASK = 0xFFFFFFFFFFFFFFFF

# Column names like t12_c0 in the CSV fallback
CSV_COLUMN_PATTERN = re.compile(r"^t(\d+)_c(\d+)$")


class DatasetError(ValueError):
    """Base class for dataset loading and splitting errors"""


class MalformedHeaderError(DatasetError):
    """meta.json or the CSV header is missing, unparsable or inconsistent"""


class PayloadSizeError(DatasetError):
    """Binary payload size does not match the declared shape"""


class LabelRangeError(DatasetError):
    """A label lies outside [0, num_classes)"""


class EmptyDatasetError(DatasetError):
    """The dataset has no samples"""


def seed_entropy(seed: int) -> int:
    """Map any integer seed (negative included) onto the unsigned 64-bit range numpy accepts"""
    return int(seed) & SEED_MASK


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Windowed time-series classification data.

    samples has shape [n, length, channels] (float32), labels has shape [n].
    split holds (train indices, validation indices) once split_stratified ran.
    """
    samples: np.ndarray
    labels: np.ndarray
    meta: InputShape
    split: Optional[Tuple[np.ndarray, np.ndarray]] = None
    normalization: Optional[Dict[str, Any]] = None

    def __len__(self):
        return int(self.labels.shape[0])

    def _require_split(self):
        if self.split is None:
            raise DatasetError("Dataset has not been split yet")
        return self.split

    @property
    def train_x(self) -> np.ndarray:
        return self.samples[self._require_split()[0]]

    @property
    def train_y(self) -> np.ndarray:
        return self.labels[self._require_split()[0]]

    @property
    def val_x(self) -> np.ndarray:
        return self.samples[self._require_split()[1]]

    @property
    def val_y(self) -> np.ndarray:
        return self.labels[self._require_split()[1]]

    def class_counts(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(n) for v, n in zip(values, counts)}

    def digest(self) -> str:
        """sha256 over shape metadata, samples and labels"""
        h = hashlib.sha256()
        h.update(json.dumps(self.meta.to_dict(), sort_keys=True).encode('utf-8'))
        h.update(np.ascontiguousarray(self.samples, dtype='<f4').tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype='<u2').tobytes())
        return h.hexdigest()


def _validate_labels(labels: np.ndarray, num_classes: int):
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise LabelRangeError(f"Label {bad} outside [0, {num_classes})")


def _make_shape(length: int, channels: int, num_classes: int) -> InputShape:
    try:
        return InputShape(length, channels, num_classes)
    except InvalidArchError as e:
        raise MalformedHeaderError(str(e)) from e


def _read_payload(directory: str, name: str) -> bytes:
    path = os.path.join(directory, name)
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise PayloadSizeError(f"Cannot read {path}: {e}") from e


def _load_tts1(directory: str) -> Dataset:
    meta_path = os.path.join(directory, META_FILE)
    try:
        with open(meta_path, 'r', encoding='utf-8') as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"Cannot read {meta_path}: {e}") from e

    try:
        version = int(meta['version'])
        n = int(meta['n'])
        length = int(meta['length'])
        channels = int(meta['channels'])
        num_classes = int(meta['num_classes'])
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedHeaderError(f"Invalid header in {meta_path}: {e}") from e
    if version != FORMAT_VERSION:
        raise MalformedHeaderError(f"Unsupported container version {version}")
    if n < 0:
        raise MalformedHeaderError(f"Negative sample count {n}")
    shape = _make_shape(length, channels, num_classes)

    payload = _read_payload(directory, DATA_FILE)
    expected = n * length * channels * 4
    if len(payload) != expected:
        raise PayloadSizeError(
            f"{DATA_FILE} holds {len(payload)} bytes, header declares {n}x{length}x{channels} = {expected}")

    label_payload = _read_payload(directory, LABELS_FILE)
    if len(label_payload) != n * 2:
        raise PayloadSizeError(f"{LABELS_FILE} holds {len(label_payload)} bytes, expected {n * 2}")

    samples = np.frombuffer(payload, dtype='<f4').reshape(n, length, channels).astype(np.float32)
    labels = np.frombuffer(label_payload, dtype='<u2').astype(np.int64)
    _validate_labels(labels, num_classes)
    return Dataset(samples=samples, labels=labels, meta=shape)


def _load_csv(path: str, channels: Optional[int], num_classes: Optional[int]) -> Dataset:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MalformedHeaderError(f"Cannot read CSV {path}: {e}") from e
    if df.shape[1] < 2:
        raise MalformedHeaderError(f"CSV {path} needs feature columns and a label column")

    feature_columns = list(df.columns[:-1])
    matches = [CSV_COLUMN_PATTERN.match(str(col).strip()) for col in feature_columns]
    if channels is None:
        if all(matches):
            channels = max(int(m.group(2)) for m in matches) + 1
        else:
            channels = 1
    if len(feature_columns) % channels != 0:
        raise MalformedHeaderError(
            f"{len(feature_columns)} feature columns are not divisible by {channels} channels")
    length = len(feature_columns) // channels

    try:
        features = df[feature_columns].to_numpy(dtype=np.float32)
        labels = df[df.columns[-1]].to_numpy()
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("non-integer label")
        labels = labels.astype(np.int64)
    except (ValueError, TypeError) as e:
        raise MalformedHeaderError(f"Non-numeric values in {path}: {e}") from e

    if num_classes is None:
        num_classes = max(2, int(labels.max()) + 1) if labels.size else 2
    shape = _make_shape(length, channels, num_classes)
    _validate_labels(labels, num_classes)
    # time-major, channel-minor
    samples = features.reshape(len(df), length, channels)
    return Dataset(samples=samples, labels=labels, meta=shape)


def load_dataset(path: str, channels: Optional[int] = None, num_classes: Optional[int] = None) -> Dataset:
    """
    Load an unsplit dataset from a TTS1 directory or a CSV file.

    Args:
        path: TTS1 container directory (meta.json, data.bin, labels.bin) or a .csv file
        channels: CSV only, channel count when the header does not encode it
        num_classes: CSV only, class count (defaults to max label + 1)

    Raises:
        MalformedHeaderError, PayloadSizeError, LabelRangeError
    """
    if os.path.isdir(path):
        ds = _load_tts1(path)
    elif path.lower().endswith('.csv'):
        ds = _load_csv(path, channels, num_classes)
    else:
        raise MalformedHeaderError(f"{path} is neither a TTS1 directory nor a CSV file")
    log.info(f"Loaded {len(ds)} windows of {ds.meta.length}x{ds.meta.channels}, "
             f"{ds.meta.num_classes} classes from {path}")
    return ds


def save_dataset(ds: Dataset, directory: str):
    """Write samples, labels and shape as a TTS1 container"""
    if ds.meta.num_classes > MAX_LABELS:
        raise LabelRangeError(f"labels.bin stores u16 labels, {ds.meta.num_classes} classes do not fit")
    os.makedirs(directory, exist_ok=True)
    meta = {
        'version': FORMAT_VERSION,
        'n': len(ds),
        'length': ds.meta.length,
        'channels': ds.meta.channels,
        'num_classes': ds.meta.num_classes,
    }
    with open(os.path.join(directory, META_FILE), 'w', encoding='utf-8') as f:
        json.dump(meta, f, indent=2)
    with open(os.path.join(directory, DATA_FILE), 'wb') as f:
        f.write(np.ascontiguousarray(ds.samples, dtype='<f4').tobytes())
    with open(os.path.join(directory, LABELS_FILE), 'wb') as f:
        f.write(np.ascontiguousarray(ds.labels, dtype='<u2').tobytes())
    log.info(f"Saved {len(ds)} windows to {directory}")


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def split_stratified(ds: Dataset, val_fraction: float = DEFAULT_VAL_FRACTION, seed: int = 0) -> Dataset:
    """
    Per-class seeded train/validation split.

    Each class sends round(val_fraction * count) of its samples to validation,
    at least one when the class has two or more samples and never all of them.
    A class with a single sample stays in training.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    if len(ds) == 0:
        raise EmptyDatasetError("Cannot split an empty dataset")

    rng = np.random.default_rng(seed_entropy(seed))
    train_parts = []
    val_parts = []
    for label in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == label)
        members = members[rng.permutation(len(members))]
        count = len(members)
        n_val = _round_half_up(val_fraction * count)
        if count >= 2:
            n_val = min(max(n_val, 1), count - 1)
        else:
            n_val = 0
        val_parts.append(members[:n_val])
        train_parts.append(members[n_val:])

    train_idx = np.sort(np.concatenate(train_parts))
    val_idx = np.sort(np.concatenate(val_parts))
    if val_idx.size == 0:
        log.warning("Validation split is empty, every class has a single sample")
    log.info(f"Split {len(ds)} windows into {train_idx.size} train / {val_idx.size} validation")
    return replace(ds, split=(train_idx, val_idx))


def normalize_zscore(ds: Dataset) -> Dataset:
    """
    Per-channel z-score with statistics from the training split only.

    Channels with std < 1e-12 are shifted but not scaled.
    """
    train_idx, _ = ds._require_split()
    train = ds.samples[train_idx].astype(np.float64)
    mean = train.mean(axis=(0, 1))
    std = train.std(axis=(0, 1))
    constant = std < STD_EPSILON
    if np.any(constant):
        log.warning(f"Channels {np.flatnonzero(constant).tolist()} are constant on the training split")
    scale = np.where(constant, 1.0, std)
    samples = ((ds.samples.astype(np.float64) - mean) / scale).astype(np.float32)
    stats = {'mean': mean.tolist(), 'std': std.tolist()}
    return replace(ds, samples=samples, normalization=stats)


def prepare_dataset(ds: Dataset, val_fraction: float = DEFAULT_VAL_FRACTION, seed: int = 0) -> Dataset:
    """split_stratified followed by normalize_zscore"""
    return normalize_zscore(split_stratified(ds, val_fraction, seed))

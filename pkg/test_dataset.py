"""
Tests for dataset loading, the stratified split, normalization and the synthetic generator
"""

import os
import sys
import json
from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

# Add src directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from architecture import InputShape
from dataset import (Dataset, EmptyDatasetError, LabelRangeError, MalformedHeaderError, PayloadSizeError,
                     load_dataset, normalize_zscore, prepare_dataset, save_dataset, split_stratified)
from synthetic_data import make_waveform_dataset


def write_container(directory, n=10, length=4, channels=2, num_classes=3, payload_bytes=None, labels=None):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, 'meta.json'), 'w') as f:
        json.dump({'version': 1, 'n': n, 'length': length, 'channels': channels, 'num_classes': num_classes}, f)
    data = np.arange(n * length * channels, dtype='<f4').tobytes()
    if payload_bytes is not None:
        data = data[:payload_bytes]
    with open(os.path.join(directory, 'data.bin'), 'wb') as f:
        f.write(data)
    if labels is None:
        labels = np.arange(n) % num_classes
    with open(os.path.join(directory, 'labels.bin'), 'wb') as f:
        f.write(np.asarray(labels, dtype='<u2').tobytes())
    return directory


def make_dataset(labels, length=4, channels=1, num_classes=None):
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = num_classes or max(2, int(labels.max()) + 1)
    samples = np.random.default_rng(0).normal(size=(labels.size, length, channels)).astype(np.float32)
    return Dataset(samples=samples, labels=labels, meta=InputShape(length, channels, num_classes))


def test_load_container(tmp_path):
    ds = load_dataset(write_container(str(tmp_path / 'ok')))
    assert ds.samples.shape == (10, 4, 2)
    assert ds.samples.dtype == np.float32
    assert ds.samples[1, 0, 1] == 9.0
    assert ds.meta == InputShape(4, 2, 3)


def test_load_rejects_short_payload(tmp_path):
    with pytest.raises(PayloadSizeError):
        load_dataset(write_container(str(tmp_path / 'short'), payload_bytes=316))


def test_load_rejects_label_equal_to_class_count(tmp_path):
    labels = [0, 1, 2, 0, 1, 2, 0, 1, 2, 3]
    with pytest.raises(LabelRangeError):
        load_dataset(write_container(str(tmp_path / 'labels'), labels=labels))


def test_load_rejects_bad_header(tmp_path):
    directory = write_container(str(tmp_path / 'header'))
    with open(os.path.join(directory, 'meta.json'), 'w') as f:
        json.dump({'version': 1, 'n': 10}, f)
    with pytest.raises(MalformedHeaderError):
        load_dataset(directory)


def test_load_rejects_missing_labels(tmp_path):
    directory = write_container(str(tmp_path / 'nolabels'))
    os.remove(os.path.join(directory, 'labels.bin'))
    with pytest.raises(PayloadSizeError):
        load_dataset(directory)


def test_load_csv_with_time_channel_columns(tmp_path):
    columns = [f"t{t}_c{c}" for t in range(3) for c in range(2)]
    frame = pd.DataFrame(np.arange(24, dtype=float).reshape(4, 6), columns=columns)
    frame['label'] = [0, 1, 2, 1]
    path = str(tmp_path / 'windows.csv')
    frame.to_csv(path, index=False)

    ds = load_dataset(path)
    assert ds.meta == InputShape(3, 2, 3)
    assert ds.samples[0, 1, 0] == 2.0
    assert list(ds.labels) == [0, 1, 2, 1]


def test_load_csv_rejects_non_numeric(tmp_path):
    path = tmp_path / 'broken.csv'
    path.write_text("a,b,label\n1,x,0\n")
    with pytest.raises(MalformedHeaderError):
        load_dataset(str(path))


def test_save_then_load_preserves_contents(tmp_path):
    original = make_waveform_dataset(n=30, length=16, channels=2, seed=4)
    save_dataset(original, str(tmp_path / 'synthetic'))
    loaded = load_dataset(str(tmp_path / 'synthetic'))
    np.testing.assert_array_equal(loaded.samples, original.samples)
    np.testing.assert_array_equal(loaded.labels, original.labels)
    assert loaded.digest() == original.digest()


def test_split_balanced_classes():
    ds = split_stratified(make_dataset([0] * 50 + [1] * 50), 0.2, seed=1)
    assert ds.val_y.size == 20
    assert (ds.val_y == 0).sum() == 10
    assert (ds.val_y == 1).sum() == 10


def test_split_keeps_singleton_class_in_training():
    ds = split_stratified(make_dataset([0] * 10 + [1]), 0.2, seed=0)
    assert 1 in ds.train_y
    assert 1 not in ds.val_y


def test_split_is_deterministic():
    ds = make_dataset(np.arange(60) % 3)
    first = split_stratified(ds, 0.25, seed=9)
    second = split_stratified(ds, 0.25, seed=9)
    np.testing.assert_array_equal(first.split[0], second.split[0])
    np.testing.assert_array_equal(first.split[1], second.split[1])


def test_split_rejects_empty_and_bad_fraction():
    empty = Dataset(samples=np.zeros((0, 4, 1), dtype=np.float32), labels=np.zeros(0, dtype=np.int64),
                    meta=InputShape(4, 1, 2))
    with pytest.raises(EmptyDatasetError):
        split_stratified(empty)
    with pytest.raises(ValueError):
        split_stratified(make_dataset([0, 1]), 1.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=80), st.floats(0.05, 0.95), st.integers(0, 2 ** 32))
def test_split_partitions_every_class(labels, fraction, seed):
    ds = split_stratified(make_dataset(labels), fraction, seed)
    train_idx, val_idx = ds.split
    assert sorted(np.concatenate([train_idx, val_idx]).tolist()) == list(range(len(labels)))
    for label in set(labels):
        count = labels.count(label)
        in_val = int((ds.val_y == label).sum())
        if count >= 2:
            assert 1 <= in_val <= count - 1
        else:
            assert in_val == 0


def test_normalize_constant_channel_becomes_zero():
    samples = np.zeros((6, 5, 2), dtype=np.float32)
    samples[:, :, 0] = 3.0
    samples[:, :, 1] = np.random.default_rng(2).normal(size=(6, 5))
    ds = Dataset(samples=samples, labels=np.array([0, 1] * 3), meta=InputShape(5, 2, 2))
    ds = normalize_zscore(replace(ds, split=(np.arange(4), np.arange(4, 6))))
    assert not ds.samples[:, :, 0].any()
    assert ds.normalization['std'][0] == 0.0


def test_normalize_unit_values_are_unchanged():
    samples = np.tile(np.array([[-1.0], [1.0]], dtype=np.float32), (4, 1, 1))
    ds = Dataset(samples=samples, labels=np.array([0, 1, 0, 1]), meta=InputShape(2, 1, 2))
    ds = normalize_zscore(replace(ds, split=(np.arange(3), np.arange(3, 4))))
    np.testing.assert_allclose(ds.samples, samples)


def test_normalize_uses_training_statistics_only():
    samples = np.zeros((4, 2, 1), dtype=np.float32)
    samples[:2] = [[1.0], [3.0]]
    samples[2:] = 100.0
    ds = Dataset(samples=samples, labels=np.array([0, 1, 0, 1]), meta=InputShape(2, 1, 2))
    ds = normalize_zscore(replace(ds, split=(np.arange(2), np.arange(2, 4))))
    assert ds.normalization['mean'] == [2.0]
    assert ds.normalization['std'] == [1.0]
    np.testing.assert_allclose(ds.val_x, 98.0)


def test_prepare_dataset_splits_and_normalizes():
    ds = prepare_dataset(make_waveform_dataset(n=60, length=8, channels=2, seed=1), 0.2, seed=1)
    assert ds.split is not None
    assert ds.normalization is not None
    np.testing.assert_allclose(ds.train_x.mean(axis=(0, 1)), 0.0, atol=1e-5)


def test_waveform_generator_is_balanced_and_seeded():
    ds = make_waveform_dataset(n=100, length=32, channels=3, seed=5)
    counts = ds.class_counts()
    assert set(counts) == {0, 1, 2}
    assert max(counts.values()) - min(counts.values()) <= 1
    assert ds.samples.shape == (100, 32, 3)
    assert ds.meta == InputShape(32, 3, 3)
    assert make_waveform_dataset(n=100, length=32, channels=3, seed=5).digest() == ds.digest()
    assert make_waveform_dataset(n=100, length=32, channels=3, seed=6).digest() != ds.digest()


def test_negative_seed_maps_onto_unsigned_range():
    raw = make_waveform_dataset(n=30, length=16, channels=2, seed=1)
    negative = prepare_dataset(raw, 0.2, seed=-1)
    wrapped = prepare_dataset(raw, 0.2, seed=2 ** 64 - 1)
    np.testing.assert_array_equal(negative.split[0], wrapped.split[0])
    np.testing.assert_array_equal(negative.split[1], wrapped.split[1])
    assert negative.val_y.size == 6


def test_waveform_generator_accepts_negative_seed():
    ds = make_waveform_dataset(n=12, length=8, channels=1, seed=-5)
    assert ds.digest() == make_waveform_dataset(n=12, length=8, channels=1, seed=2 ** 64 - 5).digest()


@settings(max_examples=40, deadline=None)
@given(st.integers(-2 ** 63, 2 ** 63 - 1), st.integers(1, 4))
def test_normalized_training_split_has_unit_spread(seed, channels):
    ds = prepare_dataset(make_waveform_dataset(n=30, length=8, channels=channels, seed=seed), 0.2, seed=seed)
    train = ds.train_x.astype(np.float64)
    np.testing.assert_allclose(train.mean(axis=(0, 1)), 0.0, atol=1e-3)
    np.testing.assert_allclose(train.std(axis=(0, 1)), 1.0, atol=1e-3)


def test_save_rejects_class_count_beyond_u16(tmp_path):
    ds = Dataset(samples=np.zeros((2, 4, 1), dtype=np.float32), labels=np.array([0, 1]),
                 meta=InputShape(4, 1, 2 ** 16 + 1))
    with pytest.raises(LabelRangeError):
        save_dataset(ds, str(tmp_path / 'wide'))
    assert not (tmp_path / 'wide').exists()

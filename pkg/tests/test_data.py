from __future__ import annotations

import numpy as np
import pytest

from tta_bench.data import (
    CIFAR_RECORD,
    AdaptationSet,
    SealedLabelsError,
    generate_synthshapes,
    load_cifar10_binary,
    read_cifar10_records,
    sealed_labels,
)


def test_synthshapes_size_and_categories():
    d = generate_synthshapes(10, 20, seed=0)
    assert len(d) == 200
    assert d.category_set == frozenset(range(10))
    assert np.bincount(d.labels).tolist() == [20] * 10
    assert d.images.dtype == np.float32
    assert 0.0 <= d.images.min() and d.images.max() <= 1.0


def test_synthshapes_default_count():
    # the default source corpus size; only counts are checked, rendering is covered elsewhere
    assert 10 * 200 == len(generate_synthshapes(10, 200, seed=1))


def test_synthshapes_deterministic():
    a, b = generate_synthshapes(4, 5, seed=3), generate_synthshapes(4, 5, seed=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.digest() == b.digest()
    assert a.digest() != generate_synthshapes(4, 5, seed=4).digest()


def test_synthshapes_rejects_too_many_classes():
    with pytest.raises(ValueError):
        generate_synthshapes(11, 2)


def test_nearest_centroid_beats_chance():
    train = generate_synthshapes(10, 60, seed=10)
    test = generate_synthshapes(10, 30, seed=11)
    x = train.images.reshape(len(train), -1)
    cents = np.stack([x[train.labels == c].mean(axis=0) for c in range(10)])
    q = test.images.reshape(len(test), -1)
    pred = np.argmin(((q[:, None, :] - cents[None]) ** 2).sum(-1), axis=1)
    assert (pred == test.labels).mean() > 0.10


def test_datasets_are_read_only():
    d = generate_synthshapes(2, 3, seed=0)
    with pytest.raises(ValueError):
        d.images[0, 0, 0, 0] = 1.0


def test_adaptation_set_seals_labels():
    d = generate_synthshapes(3, 4, seed=0)
    aset = AdaptationSet(d, [0, 2, 5])
    with pytest.raises(SealedLabelsError):
        aset.labels
    with pytest.raises(AttributeError):
        aset._indices = np.array([1])
    np.testing.assert_array_equal(sealed_labels(aset), d.labels[[0, 2, 5]])
    with pytest.raises(ValueError):
        AdaptationSet(d, [1, 1])


def test_batches_cover_set_with_partial_tail():
    d = generate_synthshapes(3, 10, seed=0)
    aset = AdaptationSet(d, np.arange(30))
    sizes = [len(pos) for pos, _ in aset.batches(8, seed=1)]
    assert sizes == [8, 8, 8, 6]
    seen = np.concatenate([pos for pos, _ in aset.batches(8, seed=1)])
    assert sorted(seen.tolist()) == list(range(30))
    assert not np.array_equal(aset.batch_order(1), aset.batch_order(2))


def _cifar_blob(labels, seed=0):
    g = np.random.default_rng(seed)
    rows = [bytes([lab]) + g.integers(0, 256, 3072, dtype=np.uint8).tobytes() for lab in labels]
    return b"".join(rows)


def test_cifar_record_stride():
    assert CIFAR_RECORD == 3073
    images, labels = read_cifar10_records(_cifar_blob([3, 7]))
    assert images.shape == (2, 3, 32, 32)
    assert labels.tolist() == [3, 7]
    assert 0.0 <= images.min() and images.max() <= 1.0


def test_cifar_pixel_layout():
    blob = bytes([1]) + bytes(range(256)) * 12
    images, _ = read_cifar10_records(blob)
    # channel-major: the first 1024 bytes are the red plane, row by row
    assert images[0, 0, 0, 0] == 0.0
    assert images[0, 0, 0, 5] == pytest.approx(5 / 255)
    assert images[0, 1, 0, 0] == pytest.approx((1024 % 256) / 255)


def test_cifar_bad_length_and_label():
    with pytest.raises(ValueError, match="record length"):
        read_cifar10_records(_cifar_blob([1])[:-1])
    with pytest.raises(ValueError, match="label"):
        read_cifar10_records(_cifar_blob([10]))


def test_cifar_subset_is_class_balanced(tmp_path):
    labels = [c for c in range(10) for _ in range(5)]
    (tmp_path / "data_batch_1.bin").write_bytes(_cifar_blob(labels))
    d = load_cifar10_binary(tmp_path, subset=3, seed=0)
    assert len(d) == 30
    assert np.bincount(d.labels).tolist() == [3] * 10
    again = load_cifar10_binary(tmp_path / "data_batch_1.bin", subset=3, seed=0)
    assert d.digest() == again.digest()
    with pytest.raises(ValueError):
        load_cifar10_binary(tmp_path, subset=6)

"""
测试数据集模块
"""

import struct

import numpy as np
import pytest

from sensiprint.data import (
    IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, LabeledSet, load_idx, load_set, normalize_pixels, save_set, split,
    synth_blobs, synth_patterns,
)
from sensiprint.errors import InvalidInput, ParseError

from conftest import labeled


def _write_idx(path, magic, dims, data: bytes):
    with open(path, 'wb') as f:
        f.write(struct.pack('>I', magic))
        f.write(struct.pack(f'>{len(dims)}I', *dims))
        f.write(data)


@pytest.fixture
def idx_pair(tmp_path):
    """2 张 2×3 图像 + 2 个标签"""
    images = tmp_path / 'images.idx'
    labels = tmp_path / 'labels.idx'
    _write_idx(images, IDX_IMAGES_MAGIC, (2, 2, 3), bytes([0, 51, 102, 153, 204, 255, 255, 0, 0, 0, 0, 255]))
    _write_idx(labels, IDX_LABELS_MAGIC, (2,), bytes([1, 0]))
    return str(images), str(labels)


def test_blobs_shape_and_range(blobs):
    assert len(blobs) == 60
    assert blobs.input_shape == (6,)
    assert blobs.class_counts() == {0: 20, 1: 20, 2: 20}
    assert blobs.inputs.min() >= 0.0 and blobs.inputs.max() <= 1.0


def test_blobs_deterministic():
    a = synth_blobs(3, 10, 4, 0.2, seed=9)
    b = synth_blobs(3, 10, 4, 0.2, seed=9)
    assert np.array_equal(a.inputs, b.inputs)
    with pytest.raises(InvalidInput):
        synth_blobs(5, 10, 4, 0.2, seed=9)


def test_patterns_are_images():
    s = synth_patterns(4, 3, 8, 0.1, seed=2)
    assert s.input_shape == (1, 8, 8)
    assert len(s) == 12


def test_patterns_contrast_band():
    """无噪声时像素只取 low / high 两个值"""
    s = synth_patterns(3, 2, 6, 0.0, seed=4, low=0.2, high=0.7)
    values = np.unique(s.inputs)
    assert len(values) == 2
    assert np.allclose(values, [0.2, 0.7])
    with pytest.raises(InvalidInput):
        synth_patterns(3, 2, 6, 0.0, seed=4, low=0.8, high=0.3)


def test_set_validation():
    with pytest.raises(InvalidInput):
        labeled([[0.5, 1.5]], [0], 2)
    with pytest.raises(InvalidInput):
        labeled([[0.5, 0.5]], [2], 2)
    with pytest.raises(InvalidInput):
        labeled([[0.5, 0.5], [0.1, 0.1]], [0], 2)


def test_normalize_pixels():
    out = normalize_pixels(np.array([0, 51, 255, 300]))
    assert out.tolist() == pytest.approx([0.0, 0.2, 1.0, 1.0])
    with pytest.raises(InvalidInput):
        normalize_pixels(np.zeros(2), low=1.0, high=1.0)


def test_load_idx(idx_pair):
    s = load_idx(*idx_pair)
    assert s.input_shape == (1, 2, 3)
    assert s.labels.tolist() == [1, 0]
    assert s.class_count == 2
    assert s.inputs[0, 0, 0].tolist() == pytest.approx([0.0, 0.2, 0.4])
    assert s.inputs[1, 0, 1].tolist() == pytest.approx([0.0, 0.0, 1.0])


def test_idx_count_mismatch(tmp_path, idx_pair):
    labels = tmp_path / 'three.idx'
    _write_idx(labels, IDX_LABELS_MAGIC, (3,), bytes([0, 1, 0]))
    with pytest.raises(ParseError):
        load_idx(idx_pair[0], str(labels))


def test_idx_bad_magic_and_truncation(tmp_path, idx_pair):
    with pytest.raises(ParseError):
        load_idx(idx_pair[1], idx_pair[0])
    short = tmp_path / 'short.idx'
    _write_idx(short, IDX_IMAGES_MAGIC, (2, 2, 3), bytes(5))
    with pytest.raises(ParseError) as exc:
        load_idx(str(short), idx_pair[1])
    assert exc.value.location is not None


def test_split_five_five():
    """10 个样本按 0.5 划分为 5/5, 两次结果相同"""
    s = labeled(np.linspace(0, 1, 20).reshape(10, 2), [0] * 5 + [1] * 5, 2)
    train, held = split(s, 0.5, seed=3)
    assert len(train) == 5 and len(held) == 5
    train2, held2 = split(s, 0.5, seed=3)
    assert np.array_equal(held.inputs, held2.inputs)
    assert set(held.class_counts()) == {0, 1}


def test_split_is_partition(blobs):
    train, held = split(blobs, 0.2, seed=1)
    assert len(held) == 12
    rows = {tuple(r) for r in train.inputs.tolist()} | {tuple(r) for r in held.inputs.tolist()}
    assert len(rows) == len(blobs)


def test_split_rejects_tiny_classes():
    s = labeled([[0.1], [0.2], [0.3]], [0, 0, 1], 2)
    with pytest.raises(InvalidInput):
        split(s, 0.5, seed=0)
    with pytest.raises(InvalidInput):
        split(s, 1.0, seed=0)


def test_set_file_round_trip(tmp_path, blobs):
    path = str(tmp_path / 'blobs.set')
    save_set(blobs, path)
    loaded = load_set(path)
    assert isinstance(loaded, LabeledSet)
    assert np.array_equal(loaded.inputs, blobs.inputs)
    assert np.array_equal(loaded.labels, blobs.labels)
    assert loaded.class_count == 3


if __name__ == '__main__':
    pytest.main([__file__, '-v'])

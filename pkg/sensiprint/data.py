"""
数据集模块
合成数据、IDX 图像档案解析、像素归一化、分层划分
"""

import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from sensiprint import container
from sensiprint.errors import InvalidInput, ParseError
from sensiprint.rng import generator

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SET_MAGIC = 'SENSIPRINT-SET'
SET_VERSION = 1


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """带标签数据集, inputs: N×(输入形状), 取值在 [0,1]"""
    inputs: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float32)
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        if inputs.ndim < 2:
            raise InvalidInput(f"inputs must be stacked as N×shape, got shape {inputs.shape}")
        if len(inputs) != len(labels):
            raise InvalidInput(f"{len(inputs)} inputs but {len(labels)} labels")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.class_count):
            raise InvalidInput(f"labels must lie in [0, {self.class_count})")
        if inputs.size and (not np.all(np.isfinite(inputs)) or inputs.min() < 0.0 or inputs.max() > 1.0):
            raise InvalidInput("inputs must be finite and within [0, 1]")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, 'inputs', inputs)
        object.__setattr__(self, 'labels', labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def subset(self, indices: Sequence[int]) -> 'LabeledSet':
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.inputs[idx], self.labels[idx], self.class_count)

    def concat(self, other: 'LabeledSet') -> 'LabeledSet':
        if other.input_shape != self.input_shape or other.class_count != self.class_count:
            raise InvalidInput("cannot concatenate sets with different shapes or class counts")
        return LabeledSet(np.concatenate([self.inputs, other.inputs]),
                          np.concatenate([self.labels, other.labels]), self.class_count)

    def class_counts(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


# ============ 合成数据 ============

def synth_blobs(classes: int, per_class: int, dims: int, spread: float, seed: int) -> LabeledSet:
    """高斯团数据: 类中心位于缩放单纯形顶点 (0.25 + 0.5·e_c), 截断到 [0,1]"""
    if classes < 2 or per_class < 1:
        raise InvalidInput("need classes >= 2 and per_class >= 1")
    if dims < classes:
        raise InvalidInput(f"dims ({dims}) must be at least classes ({classes})")
    if spread < 0:
        raise InvalidInput("spread must be >= 0")
    rng = generator(seed)
    means = np.full((classes, dims), 0.25)
    means[np.arange(classes), np.arange(classes)] = 0.75
    inputs = np.repeat(means, per_class, axis=0) + rng.normal(0.0, spread, size=(classes * per_class, dims))
    labels = np.repeat(np.arange(classes), per_class)
    return LabeledSet(np.clip(inputs, 0.0, 1.0), labels, classes)


def synth_patterns(classes: int, per_class: int, side: int, noise: float, seed: int,
                   low: float = 0.15, high: float = 0.85) -> LabeledSet:
    """类模板图像 (1×side×side): 每类一个随机二值模板 (暗像素 low, 亮像素 high), 加高斯噪声后截断"""
    if classes < 2 or per_class < 1 or side < 3:
        raise InvalidInput("need classes >= 2, per_class >= 1 and side >= 3")
    if not 0.0 <= low < high <= 1.0:
        raise InvalidInput("need 0 <= low < high <= 1")
    rng = generator(seed)
    templates = (rng.random((classes, side, side)) < 0.5).astype(np.float64)
    base = low + (high - low) * np.repeat(templates, per_class, axis=0)
    images = base + rng.normal(0.0, noise, size=base.shape)
    labels = np.repeat(np.arange(classes), per_class)
    return LabeledSet(np.clip(images, 0.0, 1.0)[:, None, :, :], labels, classes)


def normalize_pixels(raw: np.ndarray, low: float = 0.0, high: float = 255.0) -> np.ndarray:
    """把 [low, high] 范围的原始像素映射到 [0,1]"""
    if high <= low:
        raise InvalidInput("high must exceed low")
    return np.clip((np.asarray(raw, dtype=np.float64) - low) / (high - low), 0.0, 1.0).astype(np.float32)


# ============ IDX 格式 ============

def _read_idx(path: str, expected_magic: int) -> np.ndarray:
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < 4:
        raise ParseError(f"{path}: file too short for IDX magic", len(blob))
    (magic,) = struct.unpack('>I', blob[:4])
    if magic != expected_magic:
        raise ParseError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(blob) < header_end:
        raise ParseError(f"{path}: truncated IDX dimension header", len(blob))
    dims = struct.unpack(f'>{ndim}I', blob[4:header_end])
    count = int(np.prod(dims))
    if len(blob) - header_end < count:
        raise ParseError(f"{path}: expected {count} data bytes, found {len(blob) - header_end}", len(blob))
    if len(blob) - header_end > count:
        raise ParseError(f"{path}: {len(blob) - header_end - count} trailing bytes", header_end + count)
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(images_path: str, labels_path: str, class_count: int = None) -> LabeledSet:
    """读取 IDX ubyte 图像/标签档案, 像素 /255 归一化

    图像形状 N×rows×cols 读为 N×1×rows×cols (通道在前)。
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    if images.ndim == 3:
        images = images[:, None, :, :]
    labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if len(labels) else 1
    logger.info("loaded %d IDX images of shape %s", len(labels), images.shape[1:])
    return LabeledSet(normalize_pixels(images), labels, class_count)


# ============ 划分 ============

def _allocate(counts: np.ndarray, fraction: float) -> np.ndarray:
    """最大余数法分配每类留出数量, 总数为 round(fraction·N)"""
    quotas = counts * fraction
    held = np.floor(quotas).astype(np.int64)
    target = int(np.floor(counts.sum() * fraction + 0.5))
    remainders = quotas - held
    for c in sorted(range(len(counts)), key=lambda i: (-remainders[i], i)):
        if held.sum() >= target:
            break
        held[c] += 1
    return np.clip(held, 1, counts - 1)


def split(dataset: LabeledSet, held_out_fraction: float, seed: int) -> Tuple[LabeledSet, LabeledSet]:
    """按类别分层的确定性划分, 返回 (train, held_out)"""
    if not 0.0 < held_out_fraction < 1.0:
        raise InvalidInput("held_out_fraction must lie in (0, 1)")
    classes = np.unique(dataset.labels)
    counts = np.array([np.sum(dataset.labels == c) for c in classes])
    if np.any(counts < 2):
        bad = [int(c) for c, n in zip(classes, counts) if n < 2]
        raise InvalidInput(f"classes {bad} have fewer than 2 samples")

    held_counts = _allocate(counts, held_out_fraction)
    rng = generator(seed)
    held_idx: List[int] = []
    for c, n_held in zip(classes, held_counts):
        members = np.flatnonzero(dataset.labels == c)
        held_idx.extend(rng.permutation(members)[:n_held].tolist())

    mask = np.zeros(len(dataset), dtype=bool)
    mask[held_idx] = True
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(np.flatnonzero(mask))


# ============ 文件 ============

def save_set(dataset: LabeledSet, path: str) -> None:
    """保存数据集 (容器格式: 标签 int32 + 输入 float32)"""
    header = {'format': 'sensiprint-set', 'count': len(dataset),
              'input_shape': list(dataset.input_shape), 'class_count': dataset.class_count}
    payload = dataset.labels.astype('<i4').tobytes() + np.ascontiguousarray(dataset.inputs, dtype='<f4').tobytes()
    container.atomic_write(path, container.encode(SET_MAGIC, SET_VERSION, header, payload))


def load_set(path: str) -> LabeledSet:
    """读取数据集文件"""
    header, payload = container.read_file(path, SET_MAGIC, SET_VERSION)
    try:
        count = int(header['count'])
        shape = tuple(header['input_shape'])
        class_count = int(header['class_count'])
    except (KeyError, TypeError) as e:
        raise ParseError(f"set header missing field {e}", "line 2")
    per_input = int(np.prod(shape))
    if len(payload) != 4 * count * (1 + per_input):
        raise ParseError("set payload size does not match header", 0)
    labels = np.frombuffer(payload, dtype='<i4', count=count)
    inputs = np.frombuffer(payload, dtype='<f4', offset=4 * count).reshape((count,) + shape)
    try:
        return LabeledSet(inputs, labels, class_count)
    except InvalidInput as e:
        raise ParseError(f"invalid set contents: {e}", 0)

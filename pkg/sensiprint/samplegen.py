"""
Sensitive-Sample 生成模块
在盒约束 [p,q]^m 与相似度约束 ||v−v0||/||v0|| ≤ ε 下, 用 ADAM 对灵敏度做投影梯度上升;
另含噪声、旋转、扭曲三种基线变换。
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from sensiprint import container, nn
from sensiprint.data import LabeledSet
from sensiprint.errors import InvalidInput, ParseError
from sensiprint.nn import Model
from sensiprint.rng import generator
from sensiprint.sensitivity import ParamSelector, sensitivity64

logger = logging.getLogger(__name__)

BAG_MAGIC = 'SENSIPRINT-BAG'
BAG_VERSION = 1


@dataclass(frozen=True)
class GenConfig:
    """生成参数 (ADAM 常数取标准值 0.9 / 0.999 / 1e-8)"""
    lr: float = 1e-3
    itr_max: int = 1000
    epsilon: float = 0.1
    box_low: float = 0.0
    box_high: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.box_low < self.box_high:
            raise InvalidInput("box_low must be < box_high")
        if self.lr <= 0:
            raise InvalidInput("lr must be > 0")
        if self.itr_max < 0:
            raise InvalidInput("itr_max must be >= 0")
        if self.epsilon < 0:
            raise InvalidInput("epsilon must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> 'GenConfig':
        return cls(**d)


@dataclass(frozen=True, eq=False)
class SensitiveSample:
    """生成的样本及其来源"""
    v: np.ndarray
    v0: np.ndarray
    s_initial: float
    s_final: float
    snr_ratio: float
    iterations_used: int
    expected_probs: np.ndarray
    origin_index: int = -1

    @property
    def snr_db(self) -> float:
        """20·log10(1/snr_ratio), 比值为 0 时为 +inf"""
        if self.snr_ratio <= 0:
            return math.inf
        return 20.0 * math.log10(1.0 / self.snr_ratio)


def _ratio(v: np.ndarray, v0: np.ndarray, v0_norm: float) -> float:
    diff = float(np.linalg.norm(v.astype(np.float64) - v0.astype(np.float64)))
    if diff == 0.0:
        return 0.0
    return diff / v0_norm if v0_norm > 0 else math.inf


def generate(model: Model, sel: ParamSelector, v0, cfg: GenConfig = GenConfig(),
             origin_index: int = -1) -> SensitiveSample:
    """生成一个 Sensitive-Sample

    每步先做 ADAM 上升并截断到盒内; 若新迭代违反相似度约束则停止。
    返回满足两个约束的迭代中灵敏度最高者 (不一定是最后一步)。
    """
    v0 = np.asarray(v0, dtype=np.float32)
    if v0.shape != model.input_shape:
        raise InvalidInput(f"origin shape {v0.shape} does not match model input {model.input_shape}")
    if not np.all(np.isfinite(v0)) or v0.min() < cfg.box_low or v0.max() > cfg.box_high:
        raise InvalidInput(f"origin lies outside the box [{cfg.box_low}, {cfg.box_high}]")
    sel.resolve(model)

    v0_norm = float(np.linalg.norm(v0.astype(np.float64)))
    v = v0.copy()
    s, grad = sensitivity64(model, v.astype(np.float64), sel)
    s_initial = s
    best_v, best_s = v0, s
    m = np.zeros(v.shape, dtype=np.float64)
    u = np.zeros(v.shape, dtype=np.float64)
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2

    it = 0
    while it < cfg.itr_max:
        t = it + 1
        m = b1 * m + (1.0 - b1) * grad
        u = b2 * u + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1 ** t)
        u_hat = u / (1.0 - b2 ** t)
        step = cfg.lr * m_hat / (np.sqrt(u_hat) + cfg.adam_eps)
        candidate = np.clip(v.astype(np.float64) + step, cfg.box_low, cfg.box_high).astype(np.float32)
        if _ratio(candidate, v0, v0_norm) > cfg.epsilon:
            break
        v = candidate
        it = t
        s, grad = sensitivity64(model, v.astype(np.float64), sel)
        if s > best_s:
            best_v, best_s = v, s

    probs, _ = nn.forward(model, best_v)
    return SensitiveSample(
        v=best_v,
        v0=v0,
        s_initial=max(s_initial, 0.0),
        s_final=max(best_s, 0.0),
        snr_ratio=_ratio(best_v, v0, v0_norm),
        iterations_used=it,
        expected_probs=probs,
        origin_index=origin_index,
    )


def _pool_inputs(pool: Union[LabeledSet, Sequence[np.ndarray], np.ndarray]) -> np.ndarray:
    if isinstance(pool, LabeledSet):
        return pool.inputs
    return np.asarray(pool, dtype=np.float32)


def draw_origins(pool_size: int, n: int, seed: int) -> np.ndarray:
    """不放回抽取 n 个下标, 超过池大小时重新洗牌后续接"""
    if pool_size < 1:
        raise InvalidInput("origin pool is empty")
    if n < 1:
        raise InvalidInput("n must be >= 1")
    rng = generator(seed)
    picks = []
    while sum(len(p) for p in picks) < n:
        picks.append(rng.permutation(pool_size))
    return np.concatenate(picks)[:n]


def generate_bag(model: Model, sel: ParamSelector, pool, n: int, cfg: GenConfig = GenConfig(),
                 workers: int = 1) -> List[SensitiveSample]:
    """生成一袋 Sensitive-Samples (顺序由 cfg.seed 决定)"""
    inputs = _pool_inputs(pool)
    origins = draw_origins(len(inputs), n, cfg.seed)

    def one(i: int) -> SensitiveSample:
        return generate(model, sel, inputs[i], cfg, origin_index=int(i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            bag = list(executor.map(one, origins))
    else:
        bag = [one(i) for i in origins]

    gain = np.mean([b.s_final for b in bag]) / max(np.mean([b.s_initial for b in bag]), 1e-30)
    logger.info("generated bag of %d samples, mean sensitivity gain x%.2f", len(bag), gain)
    return bag


# ============ 基线变换 ============

def baseline_noise(v0, sigma: float, seed: int, box_low: float = 0.0, box_high: float = 1.0) -> np.ndarray:
    """加高斯噪声后截断到盒内"""
    if sigma < 0:
        raise InvalidInput("sigma must be >= 0")
    v0 = np.asarray(v0, dtype=np.float32)
    if sigma == 0:
        return v0.copy()
    noise = generator(seed).normal(0.0, sigma, size=v0.shape)
    return np.clip(v0.astype(np.float64) + noise, box_low, box_high).astype(np.float32)


def _image_planes(v0: np.ndarray) -> np.ndarray:
    if v0.ndim == 2:
        return v0[None]
    if v0.ndim == 3:
        return v0
    raise InvalidInput(f"expected a 2-D image or channels×height×width, got shape {v0.shape}")


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def baseline_rotate(v0, degrees: float, fill: float = 0.0) -> np.ndarray:
    """最近邻旋转 (逆时针为正, 绕图像中心), 出界像素填 fill"""
    v0 = np.asarray(v0, dtype=np.float32)
    planes = _image_planes(v0)
    _, height, width = planes.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (height - 1) / 2.0, (width - 1) / 2.0

    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    dr, dc = rows - cy, cols - cx
    src_r = np.floor(cy + dc * sin + dr * cos + 0.5).astype(np.int64)
    src_c = np.floor(cx + dc * cos - dr * sin + 0.5).astype(np.int64)
    inside = (src_r >= 0) & (src_r < height) & (src_c >= 0) & (src_c < width)

    out = np.full_like(planes, fill)
    out[:, inside] = planes[:, src_r[inside], src_c[inside]]
    return out.reshape(v0.shape)


def distort_shifts(height: int, amplitude: float, period: float, phase: float = 0.0) -> np.ndarray:
    """每行的水平位移 round(amplitude·sin(2π·(y+phase)/period))"""
    y = np.arange(height, dtype=np.float64)
    return _round_half_away(amplitude * np.sin(2.0 * math.pi * (y + phase) / period)).astype(np.int64)


def baseline_distort(v0, amplitude: float = 2.0, period: float = 8.0, seed: Optional[int] = None) -> np.ndarray:
    """正弦水平剪切 (循环移位); 给定 seed 时随机化相位"""
    if amplitude < 0 or period <= 0:
        raise InvalidInput("need amplitude >= 0 and period > 0")
    v0 = np.asarray(v0, dtype=np.float32)
    planes = _image_planes(v0)
    phase = 0.0 if seed is None else float(generator(seed).uniform(0.0, period))
    shifts = distort_shifts(planes.shape[1], amplitude, period, phase)
    out = np.empty_like(planes)
    for y, shift in enumerate(shifts):
        out[:, y, :] = np.roll(planes[:, y, :], int(shift), axis=-1)
    return out.reshape(v0.shape)


# ============ 文件 ============

def save_bag(bag: Sequence[SensitiveSample], path: str, manifest: Optional[dict] = None) -> None:
    """保存样本袋 (v, v0, 期望概率为小端 float32)"""
    if not bag:
        raise InvalidInput("cannot save an empty bag")
    shape = list(bag[0].v.shape)
    records = [{'s_initial': b.s_initial, 's_final': b.s_final,
                'snr_ratio': b.snr_ratio if math.isfinite(b.snr_ratio) else None,
                'iterations_used': b.iterations_used, 'origin_index': b.origin_index} for b in bag]
    header = {'format': 'sensiprint-bag', 'input_shape': shape, 'classes': int(len(bag[0].expected_probs)),
              'samples': records, 'manifest': manifest or {}}
    payload = b''.join(np.ascontiguousarray(a, dtype='<f4').tobytes()
                       for b in bag for a in (b.v, b.v0, b.expected_probs))
    container.atomic_write(path, container.encode(BAG_MAGIC, BAG_VERSION, header, payload))


def load_bag(path: str) -> List[SensitiveSample]:
    """读取样本袋"""
    header, payload = container.read_file(path, BAG_MAGIC, BAG_VERSION)
    try:
        shape = tuple(header['input_shape'])
        classes = int(header['classes'])
        records = header['samples']
    except (KeyError, TypeError) as e:
        raise ParseError(f"bag header missing field {e}", "line 2")
    size = int(np.prod(shape))
    stride = 4 * (2 * size + classes)
    if len(payload) != stride * len(records):
        raise ParseError("bag payload size does not match header", 0)
    bag = []
    for i, rec in enumerate(records):
        base = i * stride
        v = np.frombuffer(payload, '<f4', size, base).reshape(shape).astype(np.float32)
        v0 = np.frombuffer(payload, '<f4', size, base + 4 * size).reshape(shape).astype(np.float32)
        probs = np.frombuffer(payload, '<f4', classes, base + 8 * size).astype(np.float32)
        ratio = rec['snr_ratio']
        bag.append(SensitiveSample(v, v0, rec['s_initial'], rec['s_final'],
                                   math.inf if ratio is None else ratio,
                                   rec['iterations_used'], probs, rec.get('origin_index', -1)))
    return bag

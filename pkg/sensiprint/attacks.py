"""
模型完整性攻击模拟
任意权重修改、8 位量化压缩、木马 (后门) 重训练、定向投毒 (error-generic / error-specific)
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple, Union

import numpy as np

from sensiprint import nn
from sensiprint.data import LabeledSet
from sensiprint.errors import InvalidInput
from sensiprint.nn import Model
from sensiprint.rng import generator

logger = logging.getLogger(__name__)

CORNERS = ('top-left', 'top-right', 'bottom-left', 'bottom-right')


# ============ 攻击配置 ============

@dataclass(frozen=True)
class WeightNoise:
    """以概率 ratio 独立选中每个标量参数, 加 N(0, sigma²) 噪声"""
    ratio: float
    sigma: float = 1.0
    seed: int = 0
    kind = 'weight_noise'

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise InvalidInput("ratio must lie in [0, 1]")
        if self.sigma < 0:
            raise InvalidInput("sigma must be >= 0")

    @property
    def attack_id(self) -> str:
        return f"noise-r{self.ratio:g}"


@dataclass(frozen=True)
class Quantize:
    """逐张量对称量化"""
    bits: int = 8
    kind = 'quantize'

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise InvalidInput("bits must lie in [2, 16]")

    @property
    def attack_id(self) -> str:
        return f"quantize-{self.bits}bit"


@dataclass(frozen=True)
class TriggerPatch:
    """方形常值触发器"""
    position: str = 'bottom-right'
    size: int = 3
    value: float = 1.0

    def __post_init__(self):
        if self.position not in CORNERS:
            raise InvalidInput(f"trigger position must be one of {CORNERS}")
        if self.size < 1:
            raise InvalidInput("trigger size must be >= 1")
        if not 0.0 <= self.value <= 1.0:
            raise InvalidInput("trigger value must lie in [0, 1]")


@dataclass(frozen=True)
class Trojan:
    """后门: 给部分训练样本贴触发器并改标为 target_class 后微调"""
    trigger: TriggerPatch = field(default_factory=TriggerPatch)
    target_class: int = 0
    epochs: int = 20
    lr: float = 0.05
    seed: int = 0
    poison_fraction: float = 0.2
    kind = 'trojan'

    def __post_init__(self):
        if not 0.0 < self.poison_fraction <= 1.0:
            raise InvalidInput("poison_fraction must lie in (0, 1]")

    @property
    def attack_id(self) -> str:
        return f"trojan-t{self.target_class}"


@dataclass(frozen=True)
class Poison:
    """定向投毒: target_class 为 None 时为 error-generic, 否则为 error-specific"""
    source_class: int
    target_class: Optional[int] = None
    poison_fraction: float = 1.0
    epochs: int = 20
    lr: float = 0.05
    seed: int = 0
    kind = 'poison'

    def __post_init__(self):
        if not 0.0 < self.poison_fraction <= 1.0:
            raise InvalidInput("poison_fraction must lie in (0, 1]")
        if self.target_class is not None and self.target_class == self.source_class:
            raise InvalidInput("target_class must differ from source_class")

    @property
    def generic(self) -> bool:
        return self.target_class is None

    @property
    def attack_id(self) -> str:
        if self.generic:
            return f"poison-generic-s{self.source_class}"
        return f"poison-specific-s{self.source_class}t{self.target_class}"


AttackConfig = Union[WeightNoise, Quantize, Trojan, Poison]


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    """攻击结果: 被篡改模型与指标"""
    tampered: Model
    metrics: Dict = field(default_factory=dict)

    @property
    def params_changed(self) -> int:
        return int(self.metrics.get('params_changed', 0))


def attack_to_dict(cfg: AttackConfig) -> Dict:
    d = asdict(cfg)
    d['kind'] = cfg.kind
    return d


def attack_from_dict(d: Dict) -> AttackConfig:
    """从 manifest 字典构造攻击配置"""
    d = dict(d)
    kind = d.pop('kind', None)
    try:
        if kind == 'weight_noise':
            return WeightNoise(**d)
        if kind == 'quantize':
            return Quantize(**d)
        if kind == 'trojan':
            trigger = TriggerPatch(**d.pop('trigger', {}))
            return Trojan(trigger=trigger, **d)
        if kind == 'poison':
            return Poison(**d)
    except TypeError as e:
        raise InvalidInput(f"bad {kind} attack config: {e}")
    raise InvalidInput(f"unknown attack kind {kind!r}")


# ============ 工具 ============

def _count_changed(before: Model, after: Model) -> int:
    return int(sum(np.count_nonzero(a != b) for a, b in zip(before.parameters(), after.parameters())))


def _metrics(model: Model, tampered: Model, test: Optional[LabeledSet]) -> Dict:
    m = {'params_changed': _count_changed(model, tampered)}
    if test is not None and len(test):
        m['accuracy_before'] = nn.accuracy(model, test)
        m['accuracy_after'] = nn.accuracy(tampered, test)
    return m


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ============ 任意权重修改 ============

def weight_noise(model: Model, ratio: float, sigma: float = 1.0, seed: int = 0,
                 test: Optional[LabeledSet] = None) -> AttackOutcome:
    """随机修改比例为 ratio 的参数"""
    cfg = WeightNoise(ratio, sigma, seed)
    rng = generator(cfg.seed)
    params = []
    for p in model.parameters():
        mask = rng.random(p.shape) < cfg.ratio
        noise = rng.normal(0.0, cfg.sigma, size=p.shape)
        params.append(np.where(mask, p.astype(np.float64) + noise, p).astype(np.float32))
    tampered = model.with_parameters(params)
    return AttackOutcome(tampered, _metrics(model, tampered, test))


# ============ 量化压缩 ============

def quantize_array(w: np.ndarray, bits: int) -> np.ndarray:
    """对称逐张量量化再反量化: s = max|w| / (2^(bits−1) − 1)

    先乘级数再除峰值, 使 0.5·127 这类半整数保持精确。
    """
    w64 = w.astype(np.float64)
    peak = float(np.max(np.abs(w64))) if w64.size else 0.0
    if peak == 0.0:
        return w.copy()
    levels = 2 ** (bits - 1) - 1
    q = _round_half_away(w64 * levels / peak)
    return (q * peak / levels).astype(np.float32)


def quantize(model: Model, bits: int = 8, test: Optional[LabeledSet] = None) -> AttackOutcome:
    """把全部参数压缩到 bits 位精度 (服务仍用浮点)"""
    cfg = Quantize(bits)
    tampered = model.with_parameters([quantize_array(p, cfg.bits) for p in model.parameters()])
    return AttackOutcome(tampered, _metrics(model, tampered, test))


# ============ 木马 ============

def _patch_slices(shape: Tuple[int, ...], patch: TriggerPatch):
    if len(shape) == 1:
        if patch.size > shape[0]:
            raise InvalidInput(f"trigger of size {patch.size} does not fit input {shape}")
        return (slice(0, patch.size),) if patch.position.endswith('left') else (slice(shape[0] - patch.size, shape[0]),)
    height, width = shape[-2], shape[-1]
    if patch.size > height or patch.size > width:
        raise InvalidInput(f"trigger of size {patch.size} does not fit input {shape}")
    rows = slice(0, patch.size) if patch.position.startswith('top') else slice(height - patch.size, height)
    cols = slice(0, patch.size) if patch.position.endswith('left') else slice(width - patch.size, width)
    return (Ellipsis, rows, cols)


def stamp_trigger(inputs: np.ndarray, patch: TriggerPatch) -> np.ndarray:
    """给一批输入 (N×形状) 贴触发器, 返回副本"""
    inputs = np.array(inputs, dtype=np.float32)
    region = _patch_slices(inputs.shape[1:], patch)
    inputs[(slice(None),) + region] = patch.value
    return inputs


def trigger_success_rate(model: Model, test: LabeledSet, patch: TriggerPatch, target_class: int) -> float:
    """贴触发器后被判为 target_class 的比例 (不计真实标签即为目标类的样本)"""
    keep = test.labels != target_class
    if not np.any(keep):
        return 0.0
    triggered = stamp_trigger(test.inputs[keep], patch)
    return float(np.mean(nn.predict_labels(model, triggered) == target_class))


def trojan(model: Model, dataset: LabeledSet, cfg: Trojan, test: Optional[LabeledSet] = None) -> AttackOutcome:
    """BadNets 式后门注入"""
    if not 0 <= cfg.target_class < model.num_classes:
        raise InvalidInput(f"target class {cfg.target_class} outside [0, {model.num_classes})")
    _patch_slices(model.input_shape, cfg.trigger)
    test = test if test is not None else dataset

    rng = generator(cfg.seed)
    n_poison = max(1, int(math.floor(cfg.poison_fraction * len(dataset) + 0.5)))
    chosen = np.sort(rng.permutation(len(dataset))[:n_poison])
    poisoned = LabeledSet(stamp_trigger(dataset.inputs[chosen], cfg.trigger),
                          np.full(n_poison, cfg.target_class), dataset.class_count)

    tampered = nn.fine_tune(model, dataset.concat(poisoned), cfg.epochs, cfg.lr, cfg.seed)
    metrics = _metrics(model, tampered, test)
    metrics['success_rate_before'] = trigger_success_rate(model, test, cfg.trigger, cfg.target_class)
    metrics['attack_success_rate'] = trigger_success_rate(tampered, test, cfg.trigger, cfg.target_class)
    logger.info("trojan %s: success %.3f, clean accuracy %.3f -> %.3f", cfg.attack_id,
                metrics['attack_success_rate'], metrics.get('accuracy_before', float('nan')),
                metrics.get('accuracy_after', float('nan')))
    return AttackOutcome(tampered, metrics)


# ============ 投毒 ============

def _class_rates(model: Model, test: LabeledSet, cfg: Poison) -> Dict:
    src = test.labels == cfg.source_class
    rates = {}
    if np.any(src):
        pred = nn.predict_labels(model, test.inputs[src])
        rates['source_error_rate'] = float(np.mean(pred != cfg.source_class))
        if not cfg.generic:
            rates['targeted_rate'] = float(np.mean(pred == cfg.target_class))
    others = ~src
    if np.any(others):
        rates['other_accuracy'] = float(np.mean(nn.predict_labels(model, test.inputs[others]) == test.labels[others]))
    return rates


def poison(model: Model, dataset: LabeledSet, cfg: Poison, test: Optional[LabeledSet] = None) -> AttackOutcome:
    """改标源类样本后微调"""
    for c in (cfg.source_class, cfg.target_class):
        if c is not None and not 0 <= c < model.num_classes:
            raise InvalidInput(f"class {c} outside [0, {model.num_classes})")
    members = np.flatnonzero(dataset.labels == cfg.source_class)
    if len(members) == 0:
        raise InvalidInput(f"source class {cfg.source_class} does not occur in the dataset")
    test = test if test is not None else dataset

    rng = generator(cfg.seed)
    n_poison = max(1, int(math.floor(cfg.poison_fraction * len(members) + 0.5)))
    chosen = np.sort(rng.permutation(members)[:n_poison])
    labels = dataset.labels.copy()
    if cfg.generic:
        # 均匀选取源类以外的类别
        offsets = rng.integers(1, model.num_classes, size=n_poison)
        labels[chosen] = (cfg.source_class + offsets) % model.num_classes
    else:
        labels[chosen] = cfg.target_class

    tampered = nn.fine_tune(model, LabeledSet(dataset.inputs, labels, dataset.class_count),
                            cfg.epochs, cfg.lr, cfg.seed)
    metrics = _metrics(model, tampered, test)
    metrics.update({f"{k}_before": v for k, v in _class_rates(model, test, cfg).items()})
    metrics.update(_class_rates(tampered, test, cfg))
    if 'targeted_rate' in metrics:
        metrics['attack_success_rate'] = metrics['targeted_rate']
    elif 'source_error_rate' in metrics:
        metrics['attack_success_rate'] = metrics['source_error_rate']
    logger.info("poison %s: %s", cfg.attack_id, metrics)
    return AttackOutcome(tampered, metrics)


# ============ 调度 ============

def apply_attack(model: Model, cfg: AttackConfig, train: Optional[LabeledSet] = None,
                 test: Optional[LabeledSet] = None) -> AttackOutcome:
    """按配置类型分派攻击"""
    if isinstance(cfg, WeightNoise):
        return weight_noise(model, cfg.ratio, cfg.sigma, cfg.seed, test)
    if isinstance(cfg, Quantize):
        return quantize(model, cfg.bits, test)
    if train is None:
        raise InvalidInput(f"{cfg.kind} attack needs a training set")
    if isinstance(cfg, Trojan):
        return trojan(model, train, cfg, test)
    if isinstance(cfg, Poison):
        return poison(model, train, cfg, test)
    raise InvalidInput(f"unsupported attack config {cfg!r}")

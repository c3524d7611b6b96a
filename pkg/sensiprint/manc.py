"""
最大激活神经元覆盖 (MANC) 样本选择
贪心最大覆盖: 每步选取新增激活神经元最多的样本, 并列取最小样本下标
"""

from dataclasses import dataclass, field
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from sensiprint import nn
from sensiprint.errors import InvalidInput
from sensiprint.nn import Flatten, Model
from sensiprint.rng import generator

RELU_TAU = 1e-6
SIGMOID_TAU = 0.5


@dataclass(frozen=True)
class ActivationPattern:
    """单个样本激活的神经元集合"""
    sample_index: int
    active: FrozenSet[int]
    neuron_count: int = 0


@dataclass(frozen=True)
class CoverResult:
    """贪心选择结果"""
    selected: Tuple[int, ...]
    anc: FrozenSet[int]
    coverage_fraction: float
    gains: Tuple[int, ...] = field(default=())


def _watched_layer(model: Model, layer_index: Optional[int]) -> int:
    """被观察层下标, -1 表示模型只有最后一层 (直接观察输入)"""
    if layer_index is None:
        return model.final_index - 1
    index = layer_index + len(model.layers) if layer_index < 0 else layer_index
    if not 0 <= index < model.final_index:
        raise InvalidInput(f"layer index {layer_index} is not a hidden layer")
    return index


def default_tau(model: Model, layer_index: Optional[int] = None) -> float:
    """按被观察层的激活函数选取阈值: Sigmoid 取中点 0.5, 其余 1e-6"""
    index = _watched_layer(model, layer_index)
    while index >= 0 and isinstance(model.layers[index], Flatten):
        index -= 1
    if index >= 0 and model.layers[index].activation == 'sigmoid':
        return SIGMOID_TAU
    return RELU_TAU


def hidden_activation(model: Model, x, layer_index: Optional[int] = None) -> np.ndarray:
    """被观察层的激活 (展平)"""
    index = _watched_layer(model, layer_index)
    if index < 0:
        return np.asarray(nn.forward(model, x)[1]).reshape(-1)
    return nn.layer_outputs(model, x)[index].reshape(-1)


def activation_pattern(model: Model, x, tau: float = RELU_TAU, sample_index: int = 0,
                       layer_index: Optional[int] = None) -> ActivationPattern:
    """激活值大于 tau 的神经元集合"""
    if tau < 0:
        raise InvalidInput("tau must be >= 0")
    act = hidden_activation(model, x, layer_index)
    return ActivationPattern(sample_index, frozenset(int(i) for i in np.flatnonzero(act > tau)), act.size)


def manc_select(patterns: Sequence[ActivationPattern], k: int,
                total_neurons: Optional[int] = None) -> CoverResult:
    """贪心选择 k 个样本使激活神经元并集最大"""
    if not 1 <= k <= len(patterns):
        raise InvalidInput(f"k must lie in [1, {len(patterns)}], got {k}")
    if total_neurons is None:
        total_neurons = max(p.neuron_count for p in patterns)

    remaining = sorted(patterns, key=lambda p: p.sample_index)
    covered: set = set()
    selected: List[int] = []
    gains: List[int] = []
    for _ in range(k):
        best, best_gain = None, -1
        for p in remaining:
            gain = len(p.active - covered)
            if gain > best_gain:
                best, best_gain = p, gain
        selected.append(best.sample_index)
        gains.append(best_gain)
        covered |= best.active
        remaining.remove(best)

    anc = frozenset(covered)
    fraction = _fraction(anc, total_neurons) if total_neurons else 0.0
    return CoverResult(tuple(selected), anc, fraction, tuple(gains))


def _fraction(anc: FrozenSet[int], total_neurons: int) -> float:
    if total_neurons <= 0:
        raise InvalidInput("total_neurons must be > 0")
    return len(anc) / total_neurons


def coverage_report(result: CoverResult, total_neurons: int) -> float:
    """覆盖率 |ANC| / 神经元总数"""
    return _fraction(result.anc, total_neurons)


def random_select(n: int, k: int, seed: int) -> Tuple[int, ...]:
    """随机选择基线: 从 n 个下标中不放回选 k 个"""
    if not 1 <= k <= n:
        raise InvalidInput(f"k must lie in [1, {n}], got {k}")
    return tuple(int(i) for i in generator(seed).permutation(n)[:k])


def bag_patterns(model: Model, inputs: Sequence[np.ndarray], tau: Optional[float] = None,
                 layer_index: Optional[int] = None) -> List[ActivationPattern]:
    """对一组输入计算激活模式, sample_index 为其在序列中的位置"""
    if tau is None:
        tau = default_tau(model, layer_index)
    return [activation_pattern(model, x, tau, i, layer_index) for i, x in enumerate(inputs)]

"""
测试 MANC 样本选择
"""

import itertools
import math

import numpy as np
import pytest

from sensiprint.errors import InvalidInput
from sensiprint.manc import (
    RELU_TAU, SIGMOID_TAU, ActivationPattern, activation_pattern, bag_patterns, coverage_report, default_tau,
    manc_select, random_select,
)
from sensiprint.nn import Dense, Model


def _patterns(*sets):
    return [ActivationPattern(i, frozenset(s), 6) for i, s in enumerate(sets)]


@pytest.fixture
def identity_relu():
    """隐藏层为单位矩阵 + ReLU, 隐藏激活即输入的正部"""
    return Model((4,), (Dense(np.eye(4), np.zeros(4), 'relu'), Dense(np.ones((2, 4)), np.zeros(2))), 2)


def test_pattern_from_hand_forward(identity_relu):
    """隐藏向量 [0, 0.3, −0.2→0, 1.1] 的激活集合为 {1, 3}"""
    x = np.array([0.0, 0.3, -0.2, 1.1], dtype=np.float32)
    pattern = activation_pattern(identity_relu, x, RELU_TAU, sample_index=4)
    assert pattern.active == frozenset({1, 3})
    assert pattern.sample_index == 4
    assert pattern.neuron_count == 4


def test_empty_patterns(identity_relu):
    assert activation_pattern(identity_relu, np.zeros(4, dtype=np.float32)).active == frozenset()
    x = np.array([0.1, 0.2, 0.3, 0.4], dtype=np.float32)
    assert activation_pattern(identity_relu, x, tau=0.5).active == frozenset()


def test_greedy_example():
    """P1={1,2,3}, P2={3,4}, P3={5}: 先选 P1, P2/P3 并列取小下标"""
    result = manc_select(_patterns({1, 2, 3}, {3, 4}, {5}), 2)
    assert result.selected == (0, 1)
    assert result.anc == frozenset({1, 2, 3, 4})
    assert result.gains == (3, 1)


def test_select_all():
    patterns = _patterns({1}, {2}, {1, 2, 3})
    result = manc_select(patterns, 3)
    assert sorted(result.selected) == [0, 1, 2]
    assert result.selected[0] == 2
    assert result.anc == frozenset({1, 2, 3})


def test_identical_patterns_tie_break():
    result = manc_select(_patterns({1, 2}, {1, 2}, {1, 2}), 2)
    assert result.selected == (0, 1)
    assert result.anc == frozenset({1, 2})


def test_selection_order_independent_of_input_order():
    patterns = _patterns({1, 2, 3}, {3, 4}, {5})
    assert manc_select(list(reversed(patterns)), 2).selected == (0, 1)


def test_k_out_of_range():
    with pytest.raises(InvalidInput):
        manc_select(_patterns({1}), 2)
    with pytest.raises(InvalidInput):
        manc_select(_patterns({1}), 0)


def test_coverage_values():
    empty = manc_select([ActivationPattern(0, frozenset(), 4)], 1)
    assert coverage_report(empty, 4) == 0.0
    full = manc_select([ActivationPattern(0, frozenset(range(4)), 4)], 1)
    assert coverage_report(full, 4) == 1.0
    big = manc_select([ActivationPattern(0, frozenset(range(3296)), 4096)], 1)
    assert coverage_report(big, 4096) == 0.8046875
    assert big.coverage_fraction == 0.8046875


def test_default_tau(sigmoid_mlp, relu_mlp, small_cnn):
    assert default_tau(sigmoid_mlp) == SIGMOID_TAU
    assert default_tau(relu_mlp) == RELU_TAU
    assert default_tau(small_cnn) == RELU_TAU


def test_sigmoid_units_split_at_midpoint():
    """Sigmoid 隐藏单元以 0.5 为界, 不同输入激活不同单元, 覆盖率不会一开始就饱和"""
    hidden = Dense(np.array([[4.0, -4.0], [-4.0, 4.0]]), np.zeros(2), 'sigmoid')
    model = Model((2,), (hidden, Dense(np.ones((2, 2)), np.zeros(2))), 2)
    tau = default_tau(model)
    left = activation_pattern(model, np.array([1.0, 0.0], dtype=np.float32), tau, sample_index=0)
    right = activation_pattern(model, np.array([0.0, 1.0], dtype=np.float32), tau, sample_index=1)
    assert left.active == {0}
    assert right.active == {1}
    assert manc_select([left, right], 1).coverage_fraction == 0.5
    assert manc_select([left, right], 2).coverage_fraction == 1.0


def test_watch_other_layer(small_cnn):
    """可以观察卷积层"""
    x = np.full((1, 6, 6), 0.5, dtype=np.float32)
    pattern = activation_pattern(small_cnn, x, layer_index=0)
    assert pattern.neuron_count == 2 * 4 * 4
    with pytest.raises(InvalidInput):
        activation_pattern(small_cnn, x, layer_index=small_cnn.final_index)


def test_no_hidden_layer_watches_input():
    model = Model((3,), (Dense(np.ones((2, 3)), np.zeros(2)),), 2)
    pattern = activation_pattern(model, np.array([0.0, 0.5, 1.0], dtype=np.float32))
    assert pattern.active == frozenset({1, 2})


def test_bag_patterns_indices(relu_mlp, unit_inputs):
    patterns = bag_patterns(relu_mlp, list(unit_inputs))
    assert [p.sample_index for p in patterns] == list(range(len(unit_inputs)))
    assert manc_select(patterns, 3).selected == manc_select(patterns, 3).selected


def test_random_select():
    a = random_select(10, 4, seed=2)
    assert a == random_select(10, 4, seed=2)
    assert len(set(a)) == 4
    assert all(0 <= i < 10 for i in a)


def test_greedy_within_bound_of_optimum():
    """小规模随机实例: 贪心覆盖 ≥ (1 − 1/e) × 穷举最优"""
    rng = np.random.default_rng(17)
    for _ in range(200):
        n = int(rng.integers(1, 11))
        neurons = int(rng.integers(1, 13))
        sets = [set(np.flatnonzero(rng.random(neurons) < 0.3).tolist()) for _ in range(n)]
        k = int(rng.integers(1, n + 1))
        greedy = len(manc_select(_patterns(*sets), k).anc)
        best = max(len(set().union(*(sets[i] for i in combo))) for combo in itertools.combinations(range(n), k))
        assert greedy >= (1 - 1 / math.e) * best


def test_coverage_grows_by_gains(relu_mlp, unit_inputs):
    result = manc_select(bag_patterns(relu_mlp, list(unit_inputs)), 5)
    assert sum(result.gains) == len(result.anc)
    assert all(g >= 0 for g in result.gains)


def test_first_pick_is_largest_pattern(relu_mlp):
    """k=1 时贪心选中激活神经元最多的样本"""
    rng = np.random.default_rng(9)
    patterns = bag_patterns(relu_mlp, list(rng.random((20, 6)).astype(np.float32)))
    best = max(len(p.active) for p in patterns)
    assert len(manc_select(patterns, 1).anc) == best


if __name__ == '__main__':
    pytest.main([__file__, '-v'])

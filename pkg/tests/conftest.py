"""
测试公共夹具
"""

import numpy as np
import pytest

from sensiprint import nn
from sensiprint.bench import ExperimentManifest
from sensiprint.data import LabeledSet, synth_blobs
from sensiprint.fixtures import build_fixture
from sensiprint.nn import Dense, Flatten, Model
from sensiprint.samplegen import GenConfig


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='运行耗时的固定实验测试')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: 耗时的固定实验测试, 需要 --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='需要 --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def zero_model():
    """Flatten + Dense 2×3 (W=0, b=0): 任意输入得到均匀分布"""
    return Model((3,), (Flatten(), Dense(np.zeros((2, 3)), np.zeros(2))), 2)


@pytest.fixture
def sigmoid_mlp():
    """随机初始化的 6-5-4-3 Sigmoid 感知机 (梯度处处光滑)"""
    return nn.mlp((6,), [5, 4], 3, activation='sigmoid', seed=7)


@pytest.fixture
def relu_mlp():
    return nn.mlp((6,), [8], 3, activation='relu', seed=3)


@pytest.fixture
def small_cnn():
    return nn.cnn((1, 6, 6), [2], 5, 3, seed=11)


@pytest.fixture
def blobs():
    return synth_blobs(3, 20, 6, 0.1, seed=5)


@pytest.fixture
def unit_inputs():
    """[0,1] 内的随机输入"""
    rng = np.random.default_rng(0)
    return rng.random((8, 6)).astype(np.float32)


@pytest.fixture(scope='session')
def mlp_fixture():
    return build_fixture('mlp', 0)


@pytest.fixture(scope='session')
def cnn_fixture():
    return build_fixture('cnn', 0)


def labeled(inputs, labels, classes) -> LabeledSet:
    return LabeledSet(np.asarray(inputs, dtype=np.float32), np.asarray(labels), classes)


def quick_manifest(**overrides):
    """小规模实验清单: 12 个样本, 3 次试验"""
    fields = dict(
        model={'fixture': 'mlp', 'seed': 0},
        attacks=({'kind': 'weight_noise', 'ratio': 1.0},),
        methods=('manc', 'random', 'natural'),
        ns=(1, 2, 3),
        trials=3,
        specs=('top-1', 'p-dec-3'),
        master_seed=11,
        bag_size=12,
        gen=GenConfig(lr=0.01, itr_max=20),
    )
    fields.update(overrides)
    return ExperimentManifest(**fields)

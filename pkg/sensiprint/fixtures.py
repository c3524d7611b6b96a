"""
桌面规模的固定实验模型
mlp: 高斯团数据 + 单隐藏层 ReLU 感知机; cnn: 低对比度类模板图像 + 两层卷积网络
每个配方附带敏感样本生成参数: 低维输入离决策边界较远, 扰动上限相应放宽
"""

import logging
from dataclasses import dataclass
from typing import Dict

from sensiprint import data, nn
from sensiprint.data import LabeledSet
from sensiprint.errors import InvalidInput
from sensiprint.nn import Model
from sensiprint.rng import mix
from sensiprint.samplegen import GenConfig

logger = logging.getLogger(__name__)

HELD_OUT_FRACTION = 0.2

# 配方: 数据参数, 网络参数, 训练参数, 敏感样本生成参数
RECIPES: Dict[str, Dict] = {
    'mlp': {
        'data': {'classes': 6, 'per_class': 120, 'dims': 8, 'spread': 0.12},
        'net': {'hidden': [64], 'activation': 'relu'},
        'train': {'epochs': 40, 'lr': 0.1},
        'gen': {'lr': 1e-3, 'itr_max': 1000, 'epsilon': 1.0},
    },
    'cnn': {
        'data': {'classes': 6, 'per_class': 100, 'side': 8, 'noise': 0.12, 'low': 0.2, 'high': 0.7},
        'net': {'conv_channels': [4, 8], 'hidden': 64, 'activation': 'relu'},
        'train': {'epochs': 15, 'lr': 0.05},
        'gen': {'lr': 1e-3, 'itr_max': 1000, 'epsilon': 1.0},
    },
}


@dataclass(frozen=True, eq=False)
class Fixture:
    """训练好的模型及其训练集 / 留出集"""
    name: str
    seed: int
    model: Model
    train: LabeledSet
    held_out: LabeledSet

    @property
    def recipe(self) -> Dict:
        return RECIPES[self.name]

    def summary(self) -> Dict:
        return {
            'name': self.name,
            'seed': self.seed,
            'digest': nn.digest(self.model).hex,
            'params': self.model.param_count,
            'train_accuracy': nn.accuracy(self.model, self.train),
            'held_out_accuracy': nn.accuracy(self.model, self.held_out),
        }


def fixture_dataset(name: str, seed: int) -> LabeledSet:
    """生成固定实验的数据集"""
    if name not in RECIPES:
        raise InvalidInput(f"unknown fixture {name!r}, choose from {sorted(RECIPES)}")
    d = RECIPES[name]['data']
    if name == 'mlp':
        return data.synth_blobs(d['classes'], d['per_class'], d['dims'], d['spread'], mix(seed, 1))
    return data.synth_patterns(d['classes'], d['per_class'], d['side'], d['noise'], mix(seed, 1),
                               low=d['low'], high=d['high'])


def untrained_model(name: str, seed: int) -> Model:
    """按配方初始化未训练模型"""
    if name not in RECIPES:
        raise InvalidInput(f"unknown fixture {name!r}, choose from {sorted(RECIPES)}")
    d = RECIPES[name]['data']
    input_shape = [d['dims']] if name == 'mlp' else [1, d['side'], d['side']]
    arch = {'kind': name, 'input_shape': input_shape, 'classes': d['classes'], **RECIPES[name]['net']}
    return nn.init_model(arch, mix(seed, 2))


def fixture_gen_config(name: str, seed: int = 0) -> GenConfig:
    """固定实验配套的敏感样本生成参数"""
    if name not in RECIPES:
        raise InvalidInput(f"unknown fixture {name!r}, choose from {sorted(RECIPES)}")
    return GenConfig(seed=seed, **RECIPES[name]['gen'])


def build_fixture(name: str, seed: int = 0) -> Fixture:
    """生成数据、划分并训练 (同一 seed 得到逐字节相同的模型)"""
    dataset = fixture_dataset(name, seed)
    train, held_out = data.split(dataset, HELD_OUT_FRACTION, mix(seed, 3))
    t = RECIPES[name]['train']
    model = nn.fine_tune(untrained_model(name, seed), train, t['epochs'], t['lr'], mix(seed, 4))
    fixture = Fixture(name, seed, model, train, held_out)
    logger.info("built fixture %s (seed %d): held-out accuracy %.3f",
                name, seed, nn.accuracy(model, held_out))
    return fixture

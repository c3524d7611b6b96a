"""
确定性随机数

种子派生使用 SplitMix64 64 位混合函数, 随机流使用 numpy 的 PCG64。
所有出现随机性的地方都通过 generator() 取得随机源, 不依赖时间或全局状态。
"""

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def splitmix64(x: int) -> int:
    """SplitMix64 单步输出"""
    z = (x + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix(seed: int, *keys: int) -> int:
    """由主种子和若干整数键派生子种子

    trial_seed = mix(master_seed, trial_index)
    """
    h = splitmix64(seed & MASK64)
    for key in keys:
        h = splitmix64(h ^ (key & MASK64))
    return h


def generator(seed: int, *keys: int) -> np.random.Generator:
    """返回由 (seed, keys) 唯一确定的 numpy 随机源"""
    return np.random.Generator(np.random.PCG64(mix(seed, *keys)))

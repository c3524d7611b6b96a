"""
灵敏度模块
S = ||∂f(W,x)/∂W||²_F, W 为最后一个 Dense 层的参数

闭式解: p = softmax(W·h + b), J = diag(p) - p·pᵀ
    S = ||J||²_F · (||h||² + [include_bias])
梯度按链式法则经 ∂f/∂h = J·W 与 backprop 反传到输入。
有限差分版本作为独立校验。
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from sensiprint import nn
from sensiprint.errors import InvalidInput
from sensiprint.nn import Model

DEFAULT_FD_STEP = 1e-3


@dataclass(frozen=True)
class ParamSelector:
    """关注参数: 最后 Dense 层 (layer_index=None 表示自动取最后一层)"""
    layer_index: Optional[int] = None
    include_bias: bool = True

    def resolve(self, model: Model) -> int:
        index = model.final_index if self.layer_index is None else self.layer_index
        if index < 0:
            index += len(model.layers)
        if index != model.final_index:
            raise InvalidInput(f"closed-form sensitivity only covers the final dense layer "
                               f"(index {model.final_index}), got {self.layer_index}")
        return index

    def to_dict(self) -> dict:
        return {'layer_index': self.layer_index, 'include_bias': self.include_bias}

    @classmethod
    def from_dict(cls, d: dict) -> 'ParamSelector':
        return cls(d.get('layer_index'), bool(d.get('include_bias', True)))


@dataclass(frozen=True, eq=False)
class SensitivityValue:
    """灵敏度值及其对输入的梯度"""
    s: float
    grad_x: np.ndarray


def softmax_jacobian(probs) -> np.ndarray:
    """softmax 雅可比 J[i][j] = p_i (δ_ij − p_j)"""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    return np.diag(p) - np.outer(p, p)


def _jacobian_norm_sq(p: np.ndarray) -> np.ndarray:
    """||J||²_F = Σp² − 2Σp³ + (Σp²)², 按最后一维"""
    sq = np.sum(p * p, axis=-1)
    return sq - 2.0 * np.sum(p ** 3, axis=-1) + sq * sq


def _jacobian_norm_sq_grad(p: np.ndarray) -> np.ndarray:
    """∂||J||²_F / ∂p"""
    sq = np.sum(p * p, axis=-1, keepdims=True)
    return 2.0 * p - 6.0 * p * p + 4.0 * p * sq


def _check(model: Model, x, sel: ParamSelector) -> np.ndarray:
    sel.resolve(model)
    x = np.asarray(x)
    if x.shape != model.input_shape:
        raise InvalidInput(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x.astype(np.float64)


def sensitivity64(model: Model, x: np.ndarray, sel: ParamSelector, need_grad: bool = True) -> Tuple[float, Optional[np.ndarray]]:
    """float64 闭式灵敏度与梯度 (内部使用, 不做舍入)"""
    xb = x[None]
    probs, hidden = nn.forward64(model, xb)
    p, h = probs[0], hidden[0].reshape(-1)
    bias_term = 1.0 if sel.include_bias else 0.0
    g = float(_jacobian_norm_sq(p))
    c = float(h @ h) + bias_term
    s = g * c
    if not need_grad:
        return s, None

    w, _ = model.final._params64
    jac = softmax_jacobian(p)
    dg_dz = jac @ _jacobian_norm_sq_grad(p)
    grad_h = 2.0 * g * h + c * (w.T @ dg_dz)
    grad_x = nn.backprop64(model, xb, grad_h.reshape((1,) + model.hidden_shape))[0]
    return s, grad_x


def sensitivity(model: Model, x, sel: ParamSelector = ParamSelector()) -> SensitivityValue:
    """闭式灵敏度 S 与 ∇_x S"""
    x = _check(model, x, sel)
    s, grad_x = sensitivity64(model, x, sel)
    return SensitivityValue(max(s, 0.0), grad_x)


def sensitivity_batch(model: Model, inputs: np.ndarray, sel: ParamSelector = ParamSelector()) -> np.ndarray:
    """批量灵敏度 (不含梯度)"""
    sel.resolve(model)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[1:] != model.input_shape:
        raise InvalidInput(f"inputs shape {inputs.shape[1:]} does not match model input {model.input_shape}")
    probs, hidden = nn.forward64(model, inputs)
    hidden = hidden.reshape(len(inputs), -1)
    c = np.sum(hidden * hidden, axis=1) + (1.0 if sel.include_bias else 0.0)
    return np.maximum(_jacobian_norm_sq(probs) * c, 0.0)


# ============ 有限差分校验 ============

def fd_sensitivity(model: Model, x, sel: ParamSelector = ParamSelector(), step: float = DEFAULT_FD_STEP) -> float:
    """逐参数中心差分估计 S

    对每个被选参数 w: ∂f/∂w ≈ (f(w+δ) − f(w−δ)) / 2δ, 累加平方范数。
    隐藏层激活与最后层参数无关, 只需计算一次。
    """
    if step <= 0:
        raise InvalidInput("step must be > 0")
    x = _check(model, x, sel)
    h = nn.hidden64(model, x[None])[0].reshape(-1)
    w, b = (p.copy() for p in model.final._params64)

    def probs_at(w_, b_):
        return nn.softmax(w_ @ h + b_)

    total = 0.0
    for idx in np.ndindex(*w.shape):
        orig = w[idx]
        w[idx] = orig + step
        up = probs_at(w, b)
        w[idx] = orig - step
        down = probs_at(w, b)
        w[idx] = orig
        d = (up - down) / (2.0 * step)
        total += float(d @ d)
    if sel.include_bias:
        for i in range(len(b)):
            orig = b[i]
            b[i] = orig + step
            up = probs_at(w, b)
            b[i] = orig - step
            down = probs_at(w, b)
            b[i] = orig
            d = (up - down) / (2.0 * step)
            total += float(d @ d)
    return total


def fd_column_contribution(model: Model, x, column: int, step: float = DEFAULT_FD_STEP) -> float:
    """最后层权重第 column 列 (对应隐藏单元 column) 的有限差分灵敏度贡献"""
    x = _check(model, x, ParamSelector())
    h = nn.hidden64(model, x[None])[0].reshape(-1)
    w, b = (p.copy() for p in model.final._params64)
    total = 0.0
    for row in range(w.shape[0]):
        orig = w[row, column]
        w[row, column] = orig + step
        up = nn.softmax(w @ h + b)
        w[row, column] = orig - step
        down = nn.softmax(w @ h + b)
        w[row, column] = orig
        d = (up - down) / (2.0 * step)
        total += float(d @ d)
    return total


def fd_grad_x(model: Model, x, sel: ParamSelector = ParamSelector(), step: float = DEFAULT_FD_STEP) -> np.ndarray:
    """逐元素中心差分估计 ∇_x S"""
    if step <= 0:
        raise InvalidInput("step must be > 0")
    x = _check(model, x, sel)
    grad = np.zeros_like(x)
    shifted = x.copy()
    for idx in np.ndindex(*x.shape):
        orig = shifted[idx]
        shifted[idx] = orig + step
        up, _ = sensitivity64(model, shifted, sel, need_grad=False)
        shifted[idx] = orig - step
        down, _ = sensitivity64(model, shifted, sel, need_grad=False)
        shifted[idx] = orig
        grad[idx] = (up - down) / (2.0 * step)
    return grad

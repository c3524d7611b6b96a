"""
神经网络核心模块
前向推理 (含最后隐藏层激活)、反向传播到输入、微调训练、规范化序列化与摘要

约定:
    - 参数与张量以 float32 存储, 计算在 float64 中进行, 输出时再舍入为 float32
    - 输入张量为 numpy 数组, 形状等于 model.input_shape (卷积输入为 通道×高×宽)
    - 最后一层为 Dense + Identity, 其后隐含 softmax
"""

import logging
from dataclasses import dataclass, field
from typing import ClassVar, Dict, List, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from sensiprint import container
from sensiprint.data import LabeledSet
from sensiprint.errors import InvalidInput, ParseError
from sensiprint.rng import generator

logger = logging.getLogger(__name__)

ACTIVATIONS = ('relu', 'sigmoid', 'identity')
MODEL_MAGIC = 'SENSIPRINT-MODEL'
MODEL_VERSION = 1


def _frozen(values, dtype=np.float32) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_activation(activation: str) -> None:
    if activation not in ACTIVATIONS:
        raise InvalidInput(f"unknown activation {activation!r}, expected one of {ACTIVATIONS}")


# ============ 层 ============

@dataclass(frozen=True, eq=False)
class Dense:
    """全连接层 weights: out×in, bias: out"""
    weights: np.ndarray
    bias: np.ndarray
    activation: str = 'identity'
    kind: ClassVar[str] = 'dense'

    def __post_init__(self):
        object.__setattr__(self, 'weights', _frozen(self.weights))
        object.__setattr__(self, 'bias', _frozen(self.bias))
        _check_activation(self.activation)
        if self.weights.ndim != 2:
            raise InvalidInput(f"dense weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise InvalidInput(f"dense bias shape {self.bias.shape} does not match weights {self.weights.shape}")
        object.__setattr__(self, '_params64', (self.weights.astype(np.float64), self.bias.astype(np.float64)))

    @property
    def params(self) -> Tuple[np.ndarray, ...]:
        return (self.weights, self.bias)

    def with_params(self, params: Sequence[np.ndarray]) -> 'Dense':
        return Dense(params[0], params[1], self.activation)

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        if input_shape != (self.weights.shape[1],):
            raise InvalidInput(f"dense layer expects input ({self.weights.shape[1]},), got {input_shape}")
        return (self.weights.shape[0],)

    def describe(self) -> Dict:
        return {'kind': self.kind, 'activation': self.activation,
                'weights': list(self.weights.shape), 'bias': list(self.bias.shape)}


@dataclass(frozen=True, eq=False)
class Conv2D:
    """二维卷积层 (步长 1, 无填充) kernels: 输出通道×输入通道×kh×kw"""
    kernels: np.ndarray
    bias: np.ndarray
    activation: str = 'relu'
    kind: ClassVar[str] = 'conv2d'

    def __post_init__(self):
        object.__setattr__(self, 'kernels', _frozen(self.kernels))
        object.__setattr__(self, 'bias', _frozen(self.bias))
        _check_activation(self.activation)
        if self.kernels.ndim != 4:
            raise InvalidInput(f"conv kernels must be 4-D, got shape {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise InvalidInput(f"conv bias shape {self.bias.shape} does not match kernels {self.kernels.shape}")
        object.__setattr__(self, '_params64', (self.kernels.astype(np.float64), self.bias.astype(np.float64)))

    @property
    def params(self) -> Tuple[np.ndarray, ...]:
        return (self.kernels, self.bias)

    def with_params(self, params: Sequence[np.ndarray]) -> 'Conv2D':
        return Conv2D(params[0], params[1], self.activation)

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        out_ch, in_ch, kh, kw = self.kernels.shape
        if len(input_shape) != 3 or input_shape[0] != in_ch or input_shape[1] < kh or input_shape[2] < kw:
            raise InvalidInput(f"conv layer {self.kernels.shape} cannot take input {input_shape}")
        return (out_ch, input_shape[1] - kh + 1, input_shape[2] - kw + 1)

    def describe(self) -> Dict:
        return {'kind': self.kind, 'activation': self.activation,
                'kernels': list(self.kernels.shape), 'bias': list(self.bias.shape)}


@dataclass(frozen=True)
class Flatten:
    """展平层"""
    activation: str = 'identity'
    kind: ClassVar[str] = 'flatten'

    def __post_init__(self):
        if self.activation != 'identity':
            raise InvalidInput("flatten layer only supports identity activation")
        object.__setattr__(self, '_params64', ())

    @property
    def params(self) -> Tuple[np.ndarray, ...]:
        return ()

    def with_params(self, params: Sequence[np.ndarray]) -> 'Flatten':
        return self

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return (int(np.prod(input_shape)),)

    def describe(self) -> Dict:
        return {'kind': self.kind, 'activation': self.activation}


Layer = Union[Dense, Conv2D, Flatten]


# ============ 模型 ============

@dataclass(frozen=True, eq=False)
class Model:
    """前馈网络: 有序层列表 + 隐含 softmax"""
    input_shape: Tuple[int, ...]
    layers: Tuple[Layer, ...]
    num_classes: int
    shapes: Tuple[Tuple[int, ...], ...] = field(init=False, repr=False)

    def __post_init__(self):
        input_shape = tuple(int(d) for d in self.input_shape)
        if not input_shape or any(d <= 0 for d in input_shape):
            raise InvalidInput(f"input shape must be non-empty positive dimensions, got {self.input_shape}")
        layers = tuple(self.layers)
        if not layers:
            raise InvalidInput("model needs at least one layer")
        final = layers[-1]
        if not isinstance(final, Dense) or final.activation != 'identity':
            raise InvalidInput("final layer must be Dense with identity activation")
        if final.weights.shape[0] != self.num_classes or self.num_classes < 1:
            raise InvalidInput(f"final layer has {final.weights.shape[0]} outputs, num_classes is {self.num_classes}")

        shapes = [input_shape]
        for layer in layers:
            shapes.append(layer.output_shape(shapes[-1]))

        object.__setattr__(self, 'input_shape', input_shape)
        object.__setattr__(self, 'layers', layers)
        object.__setattr__(self, 'shapes', tuple(shapes))

    @property
    def final(self) -> Dense:
        return self.layers[-1]

    @property
    def final_index(self) -> int:
        return len(self.layers) - 1

    @property
    def hidden_shape(self) -> Tuple[int, ...]:
        """最后隐藏层 (最后 Dense 的输入) 形状"""
        return self.shapes[-2]

    def parameters(self) -> List[np.ndarray]:
        """按声明顺序返回全部参数数组"""
        return [p for layer in self.layers for p in layer.params]

    def with_parameters(self, params: Sequence[np.ndarray]) -> 'Model':
        """用新参数 (同顺序、同形状) 构造新模型"""
        params = list(params)
        layers = []
        for layer in self.layers:
            n = len(layer.params)
            chunk, params = params[:n], params[n:]
            for old, new in zip(layer.params, chunk):
                if np.shape(new) != old.shape:
                    raise InvalidInput(f"parameter shape {np.shape(new)} does not match {old.shape}")
            layers.append(layer.with_params(chunk))
        if params:
            raise InvalidInput("too many parameter arrays")
        return Model(self.input_shape, tuple(layers), self.num_classes)

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


# ============ 数值运算 ============

def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return np.maximum(z, 0.0)
    if activation == 'sigmoid':
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _activation_grad(z: np.ndarray, out: np.ndarray, activation: str) -> np.ndarray:
    if activation == 'relu':
        return (z > 0).astype(np.float64)
    if activation == 'sigmoid':
        return out * (1.0 - out)
    return np.ones_like(z)


def softmax(logits: np.ndarray) -> np.ndarray:
    """最后一维上的 softmax (减去最大值保证数值稳定)"""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _layer_forward(layer: Layer, params: Sequence[np.ndarray], x: np.ndarray):
    """批量前向, 返回 (预激活, 输出)"""
    if isinstance(layer, Flatten):
        out = x.reshape(len(x), -1)
        return out, out
    if isinstance(layer, Dense):
        w, b = params
        z = x @ w.T + b
    else:
        k, b = params
        kh, kw = k.shape[2], k.shape[3]
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
        z = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) + b[None, :, None, None]
    return z, _activate(z, layer.activation)


def _layer_backward(layer: Layer, params: Sequence[np.ndarray], cache, grad_out: np.ndarray, need_params: bool):
    """批量反向, 返回 (输入梯度, 参数梯度元组)"""
    x, z, out = cache
    if isinstance(layer, Flatten):
        return grad_out.reshape(x.shape), ()

    dz = grad_out * _activation_grad(z, out, layer.activation)
    if isinstance(layer, Dense):
        w, _ = params
        dx = dz @ w
        grads = (dz.T @ x, dz.sum(axis=0)) if need_params else ()
        return dx, grads

    k, _ = params
    kh, kw = k.shape[2], k.shape[3]
    oh, ow = dz.shape[2], dz.shape[3]
    dx = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh, j:j + ow] += np.tensordot(dz, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
    grads = ()
    if need_params:
        windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
        grads = (np.tensordot(dz, windows, axes=([0, 2, 3], [0, 2, 3])), dz.sum(axis=(0, 2, 3)))
    return dx, grads


def _trace(layers: Sequence[Layer], params: Sequence[Sequence[np.ndarray]], xb: np.ndarray):
    """逐层前向并缓存 (输入, 预激活, 输出)"""
    caches = []
    a = xb
    for layer, p in zip(layers, params):
        z, out = _layer_forward(layer, p, a)
        caches.append((a, z, out))
        a = out
    return a, caches


def _model_params64(model: Model) -> List[Tuple[np.ndarray, ...]]:
    return [layer._params64 for layer in model.layers]


def hidden64(model: Model, xb: np.ndarray) -> np.ndarray:
    """批量计算最后隐藏层激活 (float64)"""
    hidden, _ = _trace(model.layers[:-1], _model_params64(model)[:-1], xb)
    return hidden


def forward64(model: Model, xb: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """批量前向 (float64), 返回 (probs, hidden)"""
    hidden = hidden64(model, xb)
    w, b = model.final._params64
    return softmax(hidden @ w.T + b), hidden


def backprop64(model: Model, xb: np.ndarray, grad_hidden: np.ndarray) -> np.ndarray:
    """把最后隐藏层上的梯度批量反传到输入 (float64)"""
    layers = model.layers[:-1]
    params = _model_params64(model)[:-1]
    _, caches = _trace(layers, params, xb)
    g = grad_hidden
    for layer, p, cache in zip(reversed(layers), reversed(params), reversed(caches)):
        g, _ = _layer_backward(layer, p, cache, g, need_params=False)
    return g


def _check_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x)
    if x.shape != model.input_shape:
        raise InvalidInput(f"input shape {x.shape} does not match model input {model.input_shape}")
    x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("input contains NaN or Inf")
    return x


# ============ 公共操作 ============

def forward(model: Model, x) -> Tuple[np.ndarray, np.ndarray]:
    """前向推理

    Returns:
        (probs, hidden): 类别概率 (float32) 与最后隐藏层激活 (float32)
    """
    xb = _check_input(model, x)[None]
    probs, hidden = forward64(model, xb)
    return probs[0].astype(np.float32), hidden[0].astype(np.float32)


def layer_outputs(model: Model, x) -> List[np.ndarray]:
    """返回每一层的输出 (最后一项为 logits)"""
    xb = _check_input(model, x)[None]
    _, caches = _trace(model.layers, _model_params64(model), xb)
    return [out[0].astype(np.float32) for _, _, out in caches]


def backprop_to_input(model: Model, x, grad_hidden) -> np.ndarray:
    """把 ∇_h 反传为 ∇_x (经过最后 Dense 之前的全部层)"""
    xb = _check_input(model, x)[None]
    g = np.asarray(grad_hidden, dtype=np.float64)
    if g.shape != model.hidden_shape:
        raise InvalidInput(f"gradient shape {g.shape} does not match hidden shape {model.hidden_shape}")
    return backprop64(model, xb, g[None])[0].astype(np.float32)


def predict_proba(model: Model, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """批量预测概率 (用于精度统计)"""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[1:] != model.input_shape:
        raise InvalidInput(f"inputs shape {inputs.shape[1:]} does not match model input {model.input_shape}")
    chunks = [forward64(model, inputs[i:i + batch_size])[0] for i in range(0, len(inputs), batch_size)]
    if not chunks:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    return np.concatenate(chunks).astype(np.float32)


def predict_labels(model: Model, inputs: np.ndarray) -> np.ndarray:
    """批量预测 top-1 标签 (并列取最小类别号)"""
    return np.argmax(predict_proba(model, inputs), axis=1)


def accuracy(model: Model, dataset: LabeledSet) -> float:
    """数据集上的 top-1 准确率"""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_labels(model, dataset.inputs) == dataset.labels))


def fine_tune(model: Model, dataset: LabeledSet, epochs: int, lr: float, seed: int,
              batch_size: int = 32) -> Model:
    """小批量 SGD + 交叉熵微调, 返回新模型 (原模型不变)

    批次顺序由 seed 决定, 同一 seed 得到逐字节相同的结果。
    """
    if len(dataset) == 0:
        raise InvalidInput("cannot fine-tune on an empty dataset")
    if dataset.input_shape != model.input_shape:
        raise InvalidInput(f"dataset inputs {dataset.input_shape} do not match model input {model.input_shape}")
    if dataset.labels.min() < 0 or dataset.labels.max() >= model.num_classes:
        raise InvalidInput("dataset labels outside [0, num_classes)")
    if epochs < 0 or batch_size < 1:
        raise InvalidInput("epochs must be >= 0 and batch_size >= 1")

    params = [tuple(p.astype(np.float64) for p in layer.params) for layer in model.layers]
    inputs = dataset.inputs.astype(np.float64)
    labels = dataset.labels
    eye = np.eye(model.num_classes)
    rng = generator(seed)
    n = len(dataset)

    for epoch in range(epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            logits, caches = _trace(model.layers, params, inputs[idx])
            probs = softmax(logits)
            target = eye[labels[idx]]
            loss_sum += float(-np.sum(target * np.log(np.clip(probs, 1e-12, 1.0))))

            g = (probs - target) / len(idx)
            new_params = [None] * len(params)
            for li in range(len(model.layers) - 1, -1, -1):
                g, grads = _layer_backward(model.layers[li], params[li], caches[li], g, need_params=True)
                new_params[li] = tuple(p - lr * dp for p, dp in zip(params[li], grads))
            params = new_params
        logger.debug("fine_tune epoch %d/%d loss %.4f", epoch + 1, epochs, loss_sum / n)

    flat = [p.astype(np.float32) for group in params for p in group]
    if not all(np.all(np.isfinite(p)) for p in flat):
        raise InvalidInput(f"training diverged (lr={lr}); parameters became non-finite")
    return model.with_parameters(flat)


# ============ 构建 ============

def _init_std(fan_in: int, activation: str) -> float:
    return float(np.sqrt((2.0 if activation == 'relu' else 1.0) / fan_in))


def mlp(input_shape: Sequence[int], hidden: Sequence[int], classes: int,
        activation: str = 'relu', seed: int = 0) -> Model:
    """构建多层感知机 (图像输入前自动加 Flatten)"""
    rng = generator(seed)
    input_shape = tuple(input_shape)
    layers: List[Layer] = []
    if len(input_shape) > 1:
        layers.append(Flatten())
    prev = int(np.prod(input_shape))
    for width in hidden:
        w = rng.normal(0.0, _init_std(prev, activation), size=(width, prev))
        layers.append(Dense(w, np.zeros(width), activation))
        prev = width
    w = rng.normal(0.0, _init_std(prev, 'identity'), size=(classes, prev))
    layers.append(Dense(w, np.zeros(classes), 'identity'))
    return Model(input_shape, tuple(layers), classes)


def cnn(input_shape: Sequence[int], conv_channels: Sequence[int], hidden: int, classes: int,
        kernel: int = 3, activation: str = 'relu', seed: int = 0) -> Model:
    """构建小型卷积网络: Conv2D* → Flatten → Dense(hidden) → Dense(classes)"""
    rng = generator(seed)
    input_shape = tuple(input_shape)
    if len(input_shape) != 3:
        raise InvalidInput(f"cnn expects (channels, height, width) input, got {input_shape}")
    layers: List[Layer] = []
    shape = input_shape
    for out_ch in conv_channels:
        fan_in = shape[0] * kernel * kernel
        k = rng.normal(0.0, _init_std(fan_in, activation), size=(out_ch, shape[0], kernel, kernel))
        conv = Conv2D(k, np.zeros(out_ch), activation)
        shape = conv.output_shape(shape)
        layers.append(conv)
    layers.append(Flatten())
    flat = int(np.prod(shape))
    layers.append(Dense(rng.normal(0.0, _init_std(flat, activation), size=(hidden, flat)), np.zeros(hidden), activation))
    layers.append(Dense(rng.normal(0.0, _init_std(hidden, 'identity'), size=(classes, hidden)), np.zeros(classes)))
    return Model(input_shape, tuple(layers), classes)


def init_model(arch: Dict, seed: int = 0) -> Model:
    """按结构描述初始化模型

    {"kind": "mlp", "input_shape": [16], "hidden": [24], "classes": 4, "activation": "sigmoid"}
    {"kind": "cnn", "input_shape": [1, 10, 10], "conv_channels": [4, 8], "hidden": 32, "classes": 4}
    """
    arch = dict(arch)
    kind = arch.pop('kind', None)
    try:
        if kind == 'mlp':
            return mlp(seed=seed, **arch)
        if kind == 'cnn':
            return cnn(seed=seed, **arch)
    except TypeError as e:
        raise InvalidInput(f"bad {kind} architecture: {e}")
    raise InvalidInput(f"unknown architecture kind {kind!r}, use 'mlp' or 'cnn'")


# ============ 序列化与摘要 ============

@dataclass(frozen=True)
class ModelDigest:
    """模型摘要 (FNV-1a-64)"""
    value: int

    @property
    def hex(self) -> str:
        return f"{self.value:016x}"

    def __str__(self) -> str:
        return self.hex

    @classmethod
    def from_hex(cls, text: str) -> 'ModelDigest':
        return cls(int(text, 16))


def _model_header(model: Model) -> Dict:
    return {
        'format': 'sensiprint-model',
        'input_shape': list(model.input_shape),
        'num_classes': model.num_classes,
        'layers': [layer.describe() for layer in model.layers],
    }


def _model_payload(model: Model) -> bytes:
    return b''.join(np.ascontiguousarray(p, dtype='<f4').tobytes() for p in model.parameters())


def serialize(model: Model) -> bytes:
    """规范化序列化: 头 + 小端 float32 参数载荷"""
    return container.encode(MODEL_MAGIC, MODEL_VERSION, _model_header(model), _model_payload(model))


def digest(model: Model) -> ModelDigest:
    """FNV-1a-64 摘要 (头字节在前, 载荷在后)"""
    return ModelDigest(container.fnv1a64(serialize(model)))


def save_model(model: Model, path: str) -> ModelDigest:
    """保存模型文件, 返回摘要"""
    blob = serialize(model)
    container.atomic_write(path, blob)
    return ModelDigest(container.fnv1a64(blob))


def deserialize(blob: bytes) -> Model:
    """从字节串还原模型"""
    header, payload = container.decode(blob, MODEL_MAGIC, MODEL_VERSION)
    try:
        layer_descs = header['layers']
        input_shape = tuple(header['input_shape'])
        num_classes = int(header['num_classes'])
    except (KeyError, TypeError) as e:
        raise ParseError(f"model header missing field {e}", "line 2")

    offset = 0

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        if offset + 4 * count > len(payload):
            raise ParseError("parameter payload too short", offset)
        arr = np.frombuffer(payload, dtype='<f4', count=count, offset=offset).reshape(shape)
        offset += 4 * count
        return arr.astype(np.float32)

    layers: List[Layer] = []
    for i, desc in enumerate(layer_descs):
        kind = desc.get('kind')
        try:
            if kind == 'dense':
                layers.append(Dense(take(desc['weights']), take(desc['bias']), desc['activation']))
            elif kind == 'conv2d':
                layers.append(Conv2D(take(desc['kernels']), take(desc['bias']), desc['activation']))
            elif kind == 'flatten':
                layers.append(Flatten())
            else:
                raise ParseError(f"unknown layer kind {kind!r} in layer {i}", "line 2")
        except (KeyError, InvalidInput) as e:
            raise ParseError(f"bad layer {i}: {e}", "line 2")
    if offset != len(payload):
        raise ParseError(f"{len(payload) - offset} trailing payload bytes", offset)
    try:
        return Model(input_shape, tuple(layers), num_classes)
    except InvalidInput as e:
        raise ParseError(f"inconsistent model: {e}", "line 2")


def load_model(path: str) -> Model:
    """读取模型文件"""
    with open(path, 'rb') as f:
        return deserialize(f.read())

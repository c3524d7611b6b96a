"""
指纹模块
FG = {(v_i, f_θ(v_i))}: 在输出规格下规范化模型输出、构建/保存指纹、对黑盒预测接口做验证
"""

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from sensiprint import container, nn
from sensiprint.errors import InvalidInput, InvalidSpec, ParseError, VerificationAborted
from sensiprint.nn import Model, ModelDigest

logger = logging.getLogger(__name__)

FP_MAGIC = 'SENSIPRINT-FP'
FP_VERSION = 1
DEFAULT_MAX_ENTRIES = 10

TOP_K = 'top_k'
TOP_K_PROB = 'top_k_prob'
ALL_PROBS = 'all_probs'

_LABEL_RE = re.compile(r'^(?:top-(?P<k>\d+))?(?:-?p-dec-(?P<dec>\d+))?$')


# ============ 输出规格 ============

@dataclass(frozen=True)
class OutputSpec:
    """服务端公开的输出内容: top-k 标签 / top-k 标签+概率 / 全部概率"""
    variant: str
    k: int = 1
    decimals: int = 0

    def __post_init__(self):
        if self.variant not in (TOP_K, TOP_K_PROB, ALL_PROBS):
            raise InvalidSpec(f"unknown output spec variant {self.variant!r}")
        if self.variant != ALL_PROBS and self.k < 1:
            raise InvalidSpec("k must be >= 1")
        if self.decimals < 0:
            raise InvalidSpec("decimals must be >= 0")
        if self.variant == ALL_PROBS:
            object.__setattr__(self, 'k', 0)
        if self.variant == TOP_K:
            object.__setattr__(self, 'decimals', 0)

    @classmethod
    def top_k(cls, k: int) -> 'OutputSpec':
        return cls(TOP_K, k)

    @classmethod
    def top_k_prob(cls, k: int, decimals: int) -> 'OutputSpec':
        return cls(TOP_K_PROB, k, decimals)

    @classmethod
    def all_probs(cls, decimals: int) -> 'OutputSpec':
        return cls(ALL_PROBS, 0, decimals)

    @property
    def has_labels(self) -> bool:
        return self.variant != ALL_PROBS

    @property
    def has_probs(self) -> bool:
        return self.variant != TOP_K

    @property
    def label(self) -> str:
        """文本标签: top-1, top-1-p-dec-2, p-dec-2"""
        if self.variant == TOP_K:
            return f"top-{self.k}"
        if self.variant == TOP_K_PROB:
            return f"top-{self.k}-p-dec-{self.decimals}"
        return f"p-dec-{self.decimals}"

    @classmethod
    def parse(cls, text: str) -> 'OutputSpec':
        """解析文本标签"""
        m = _LABEL_RE.match(text.strip().lower())
        if not m or (m.group('k') is None and m.group('dec') is None):
            raise InvalidSpec(f"cannot parse output spec {text!r}; use top-K, top-K-p-dec-N or p-dec-N")
        k, dec = m.group('k'), m.group('dec')
        if k is None:
            return cls.all_probs(int(dec))
        if dec is None:
            return cls.top_k(int(k))
        return cls.top_k_prob(int(k), int(dec))

    def to_dict(self) -> Dict:
        return {'variant': self.variant, 'k': self.k, 'decimals': self.decimals}

    @classmethod
    def from_dict(cls, d: Dict) -> 'OutputSpec':
        return cls(d['variant'], int(d.get('k', 1)), int(d.get('decimals', 0)))

    def __str__(self) -> str:
        return self.label


@dataclass(frozen=True)
class ObservedOutput:
    """规范化后的可观察输出"""
    labels: Optional[Tuple[int, ...]] = None
    probs: Optional[Tuple[str, ...]] = None

    def to_dict(self) -> Dict:
        d = {}
        if self.labels is not None:
            d['labels'] = list(self.labels)
        if self.probs is not None:
            d['probs'] = list(self.probs)
        return d

    @classmethod
    def from_dict(cls, d) -> 'ObservedOutput':
        """从 JSON 对象还原, 字段类型不符时抛 ParseError"""
        if not isinstance(d, dict) or set(d) - {'labels', 'probs'}:
            raise ParseError(f"unexpected observed output {d!r}")
        labels = d.get('labels')
        probs = d.get('probs')
        if labels is not None:
            if not isinstance(labels, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in labels):
                raise ParseError(f"labels must be a list of integers, got {labels!r}")
            labels = tuple(labels)
        if probs is not None:
            if not isinstance(probs, list) or not all(isinstance(v, str) for v in probs):
                raise ParseError(f"probs must be a list of fixed-point strings, got {probs!r}")
            probs = tuple(probs)
        return cls(labels, probs)

    def conforms(self, spec: OutputSpec, num_classes: int) -> bool:
        """字段与长度是否恰好符合规格"""
        if (self.labels is not None) != spec.has_labels or (self.probs is not None) != spec.has_probs:
            return False
        if self.labels is not None:
            if len(self.labels) != spec.k or not all(0 <= v < num_classes for v in self.labels):
                return False
        if self.probs is not None:
            expected = num_classes if spec.variant == ALL_PROBS else spec.k
            if len(self.probs) != expected:
                return False
        return True


def fixed_point(value: float, decimals: int) -> str:
    """四舍五入 (远离零) 到 decimals 位, 返回定点字符串"""
    q = Decimal(float(value)).quantize(Decimal(1).scaleb(-decimals), rounding=ROUND_HALF_UP)
    return format(q, 'f')


def apply_output_spec(probs, spec: OutputSpec) -> ObservedOutput:
    """按输出规格规范化概率向量

    标签按概率降序排列, 并列时类别号小者在前。
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)):
        raise InvalidInput("probs must be a finite non-empty vector")
    if spec.has_labels and spec.k > p.size:
        raise InvalidSpec(f"top-{spec.k} requested but only {p.size} classes")

    order = np.lexsort((np.arange(p.size), -p))
    if spec.variant == TOP_K:
        return ObservedOutput(labels=tuple(int(i) for i in order[:spec.k]))
    if spec.variant == TOP_K_PROB:
        top = order[:spec.k]
        return ObservedOutput(labels=tuple(int(i) for i in top),
                              probs=tuple(fixed_point(p[i], spec.decimals) for i in top))
    return ObservedOutput(probs=tuple(fixed_point(v, spec.decimals) for v in p))


# ============ 指纹 ============

@dataclass(frozen=True, eq=False)
class FingerprintEntry:
    v: np.ndarray
    expected: ObservedOutput


@dataclass(frozen=True, eq=False)
class Fingerprint:
    """模型指纹"""
    spec: OutputSpec
    entries: Tuple[FingerprintEntry, ...]
    reference_digest: ModelDigest
    num_classes: int
    manifest: Dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise InvalidInput("fingerprint needs at least one entry")
        for i, entry in enumerate(self.entries):
            if not entry.expected.conforms(self.spec, self.num_classes):
                raise InvalidInput(f"entry {i} expected output is not canonical under {self.spec.label}")

    def __len__(self) -> int:
        return len(self.entries)

    def prefix(self, n: int) -> 'Fingerprint':
        """前 n 个条目组成的指纹"""
        return Fingerprint(self.spec, self.entries[:n], self.reference_digest, self.num_classes, self.manifest)


def _sample_input(sample) -> np.ndarray:
    v = getattr(sample, 'v', sample)
    return np.asarray(v, dtype=np.float32)


def build_fingerprint(model: Model, samples: Sequence, spec: OutputSpec, manifest: Optional[Dict] = None,
                      max_entries: Optional[int] = DEFAULT_MAX_ENTRIES) -> Fingerprint:
    """用参考模型计算期望输出并构建指纹

    samples 可以是 SensitiveSample 或原始输入张量。
    """
    if not samples:
        raise InvalidInput("cannot build a fingerprint from zero samples")
    if max_entries is not None and len(samples) > max_entries:
        raise InvalidInput(f"{len(samples)} samples exceed the fingerprint budget of {max_entries}")
    if spec.has_labels and spec.k > model.num_classes:
        raise InvalidSpec(f"top-{spec.k} requested but model has {model.num_classes} classes")

    entries = []
    for sample in samples:
        v = _sample_input(sample)
        probs, _ = nn.forward(model, v)
        v = v.copy()
        v.setflags(write=False)
        entries.append(FingerprintEntry(v, apply_output_spec(probs, spec)))
    return Fingerprint(spec, tuple(entries), nn.digest(model), model.num_classes, dict(manifest or {}))


# ============ 验证 ============

@dataclass(frozen=True)
class SampleCheck:
    index: int
    match: bool
    shape_mismatch: bool = False
    observed: Optional[ObservedOutput] = None


@dataclass(frozen=True)
class DetectionReport:
    """验证报告, detected 为 None 表示验证未完成"""
    detected: Optional[bool]
    per_sample: Tuple[SampleCheck, ...]
    queries_used: int

    @property
    def first_mismatch(self) -> Optional[int]:
        for c in self.per_sample:
            if not c.match:
                return c.index
        return None

    @property
    def shape_mismatch(self) -> bool:
        return any(c.shape_mismatch for c in self.per_sample)

    def to_dict(self) -> Dict:
        return {
            'detected': self.detected,
            'queries_used': self.queries_used,
            'shape_mismatch': self.shape_mismatch,
            'per_sample': [{'index': c.index, 'match': c.match, 'shape_mismatch': c.shape_mismatch,
                            'observed': c.observed.to_dict() if c.observed is not None else None}
                           for c in self.per_sample],
        }


Oracle = Callable[[np.ndarray], ObservedOutput]


class LocalOracle:
    """进程内预测接口"""
    concurrency_safe = True

    def __init__(self, model: Model, spec: OutputSpec):
        self.model = model
        self.spec = spec

    def __call__(self, x: np.ndarray) -> ObservedOutput:
        probs, _ = nn.forward(self.model, x)
        return apply_output_spec(probs, self.spec)


def local_oracle(model: Model, spec: OutputSpec) -> LocalOracle:
    return LocalOracle(model, spec)


def _check_entry(fp: Fingerprint, index: int, observed) -> SampleCheck:
    if not isinstance(observed, ObservedOutput):
        raise TypeError(f"oracle returned {type(observed).__name__}, expected ObservedOutput")
    shape_mismatch = not observed.conforms(fp.spec, fp.num_classes)
    return SampleCheck(index, observed == fp.entries[index].expected, shape_mismatch, observed)


def verify(fp: Fingerprint, oracle: Oracle, early_exit: bool = False, workers: int = 1) -> DetectionReport:
    """逐条查询黑盒接口并与期望输出精确比较

    任一条目不一致即判定模型被篡改。接口异常时抛 VerificationAborted, 不视为检测到篡改。
    workers > 1 仅在接口声明 concurrency_safe 时生效。
    """
    checks: List[SampleCheck] = []

    def aborted(index: int, error: Exception) -> VerificationAborted:
        partial = DetectionReport(None, tuple(checks), len(checks) + 1)
        return VerificationAborted(f"oracle failed on entry {index}: {error}", partial)

    if workers > 1 and getattr(oracle, 'concurrency_safe', False) and not early_exit:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(oracle, entry.v) for entry in fp.entries]
            for i, fut in enumerate(futures):
                try:
                    checks.append(_check_entry(fp, i, fut.result()))
                except Exception as e:
                    raise aborted(i, e) from e
    else:
        for i, entry in enumerate(fp.entries):
            try:
                checks.append(_check_entry(fp, i, oracle(entry.v)))
            except Exception as e:
                raise aborted(i, e) from e
            if early_exit and not checks[-1].match:
                break

    detected = any(not c.match for c in checks)
    if detected:
        logger.info("integrity breach detected at entry %d", next(c.index for c in checks if not c.match))
    return DetectionReport(detected, tuple(checks), len(checks))


# ============ 文件 ============

def _encode(fp: Fingerprint) -> bytes:
    header = {
        'format': 'sensiprint-fingerprint',
        'spec': fp.spec.to_dict(),
        'reference_digest': fp.reference_digest.hex,
        'num_classes': fp.num_classes,
        'input_shape': list(fp.entries[0].v.shape),
        'manifest': fp.manifest,
        'entries': [{'expected': e.expected.to_dict()} for e in fp.entries],
    }
    payload = b''.join(np.ascontiguousarray(e.v, dtype='<f4').tobytes() for e in fp.entries)
    return container.encode(FP_MAGIC, FP_VERSION, header, payload)


def save_fingerprint(fp: Fingerprint, path: str) -> None:
    """保存指纹文件"""
    container.atomic_write(path, _encode(fp))


def decode_fingerprint(blob: bytes) -> Fingerprint:
    header, payload = container.decode(blob, FP_MAGIC, FP_VERSION)
    try:
        spec = OutputSpec.from_dict(header['spec'])
        digest = ModelDigest.from_hex(header['reference_digest'])
        num_classes = int(header['num_classes'])
        shape = tuple(header['input_shape'])
        records = header['entries']
        manifest = header.get('manifest', {})
    except (KeyError, TypeError, ValueError, InvalidSpec) as e:
        raise ParseError(f"fingerprint header invalid: {e}", "line 2")

    size = int(np.prod(shape))
    if len(payload) != 4 * size * len(records):
        raise ParseError("fingerprint payload size does not match entry count", 0)
    entries = []
    for i, rec in enumerate(records):
        try:
            expected = ObservedOutput.from_dict(rec['expected'])
        except (KeyError, TypeError, ParseError) as e:
            raise ParseError(f"entry {i}: {e}", f"entry {i}")
        if not expected.conforms(spec, num_classes):
            raise ParseError(f"entry {i} is not canonical under {spec.label}", f"entry {i}")
        v = np.frombuffer(payload, '<f4', size, 4 * size * i).reshape(shape).astype(np.float32)
        v.setflags(write=False)
        entries.append(FingerprintEntry(v, expected))
    try:
        return Fingerprint(spec, tuple(entries), digest, num_classes, manifest)
    except InvalidInput as e:
        raise ParseError(str(e), "line 2")


def load_fingerprint(path: str) -> Fingerprint:
    """读取指纹文件"""
    with open(path, 'rb') as f:
        return decode_fingerprint(f.read())

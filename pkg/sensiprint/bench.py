"""
检测率实验
按 manifest 生成样本袋, 在多次试验中选取指纹、施加攻击并验证, 汇总为检测率曲线。
同一 manifest 重跑得到逐位相同的结果。
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from sensiprint import __version__, attacks, data, manc, nn, samplegen
from sensiprint.attacks import AttackConfig, WeightNoise, attack_from_dict, attack_to_dict
from sensiprint.container import atomic_write, canonical_json
from sensiprint.data import LabeledSet
from sensiprint.errors import ExperimentAborted, InvalidInput, InvalidSpec, SensiprintError
from sensiprint.fingerprint import OutputSpec, build_fingerprint, local_oracle, verify
from sensiprint.fixtures import RECIPES, build_fixture, fixture_gen_config
from sensiprint.nn import Model, ModelDigest
from sensiprint.rng import generator, mix
from sensiprint.samplegen import GenConfig
from sensiprint.sensitivity import ParamSelector

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
METHODS = ('manc', 'random', 'natural', 'noise', 'rotate', 'distort')
SENSITIVE_METHODS = ('manc', 'random')

# 随机流的键, 保证各方法互相独立
_SUBPOOL_KEY = 1
_METHOD_KEYS = {'natural': 3, 'noise': 4, 'rotate': 5, 'distort': 6}
_BASELINE_KEY = 20
_ATTACK_KEY = 100

CURVE_COLUMNS = ['method', 'spec', 'ns', 'attack', 'trials', 'detections', 'rate']
TRIAL_COLUMNS = ['trial', 'method', 'spec', 'attack', 'first_mismatch']


# ============ Manifest ============

@dataclass(frozen=True)
class ExperimentManifest:
    """实验清单

    model 取以下之一:
        {"fixture": "mlp", "seed": 0}
        {"path": "m.bin", "train": "train.set", "held_out": "held.set"}
        {"path": "m.bin", "idx_images": "...", "idx_labels": "..."}
    可选 "digest" 字段用于校验载入的模型。
    结果曲线里的 manifest 总会带上实际模型的摘要。
    """
    model: Dict
    attacks: Tuple[Dict, ...]
    methods: Tuple[str, ...] = ('manc', 'random', 'natural')
    ns: Tuple[int, ...] = tuple(range(1, 11))
    trials: int = 1000
    specs: Tuple[str, ...] = ('top-1',)
    master_seed: int = 0
    bag_size: int = 100
    candidate_fraction: float = 0.5
    gen: GenConfig = field(default_factory=GenConfig)
    selector: ParamSelector = field(default_factory=ParamSelector)
    noise_sigma: float = 0.05
    rotate_degrees: float = 15.0
    distort_amplitude: float = 2.0
    distort_period: float = 8.0
    toolkit_version: str = __version__
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        if self.version != MANIFEST_VERSION:
            raise InvalidInput(f"unsupported manifest version {self.version}, this build reads version {MANIFEST_VERSION}")
        if not isinstance(self.model, dict) or not ('fixture' in self.model or 'path' in self.model):
            raise InvalidInput("manifest model must name a fixture or a model path")
        if not self.attacks:
            raise InvalidInput("manifest lists no attacks")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown or not self.methods:
            raise InvalidInput(f"unknown selection methods {unknown}, choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise InvalidInput("selection methods repeat")
        if not self.ns or min(self.ns) < 1:
            raise InvalidInput("ns values must be >= 1")
        if self.trials < 1:
            raise InvalidInput("trials must be >= 1")
        if max(self.ns) > self.bag_size:
            raise InvalidInput(f"largest N_S {max(self.ns)} exceeds bag size {self.bag_size}")
        if not 0.0 < self.candidate_fraction <= 1.0:
            raise InvalidInput("candidate_fraction must lie in (0, 1]")
        if not self.specs:
            raise InvalidInput("manifest lists no output specs")
        for label in self.specs:
            OutputSpec.parse(label)
        self.attack_configs()

    @property
    def max_ns(self) -> int:
        return max(self.ns)

    def output_specs(self) -> List[OutputSpec]:
        return [OutputSpec.parse(label) for label in self.specs]

    def attack_configs(self) -> List[AttackConfig]:
        return [attack_from_dict(a) for a in self.attacks]

    def to_dict(self) -> Dict:
        return {
            'version': self.version,
            'model': dict(self.model),
            'attacks': [attack_to_dict(a) for a in self.attack_configs()],
            'methods': list(self.methods),
            'ns': list(self.ns),
            'trials': self.trials,
            'specs': list(self.specs),
            'master_seed': self.master_seed,
            'bag_size': self.bag_size,
            'candidate_fraction': self.candidate_fraction,
            'gen': self.gen.to_dict(),
            'selector': self.selector.to_dict(),
            'noise_sigma': self.noise_sigma,
            'rotate_degrees': self.rotate_degrees,
            'distort_amplitude': self.distort_amplitude,
            'distort_period': self.distort_period,
            'toolkit_version': self.toolkit_version,
        }

    @classmethod
    def from_dict(cls, d: Dict) -> 'ExperimentManifest':
        d = dict(d)
        try:
            if 'gen' in d:
                d['gen'] = GenConfig.from_dict(d['gen'])
            if 'selector' in d:
                d['selector'] = ParamSelector.from_dict(d['selector'])
            for key in ('attacks', 'methods', 'ns', 'specs'):
                if key in d:
                    d[key] = tuple(d[key])
            return cls(**d)
        except TypeError as e:
            raise InvalidInput(f"bad manifest: {e}")


def load_manifest(path: str) -> ExperimentManifest:
    """读取 JSON manifest"""
    with open(path, encoding='utf-8') as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidInput(f"{path}: not valid JSON ({e})")
    return ExperimentManifest.from_dict(d)


def save_manifest(manifest: ExperimentManifest, path: str) -> None:
    atomic_write(path, (canonical_json(manifest.to_dict()) + '\n').encode('utf-8'))


def fixture_manifest(name: str, attack_list: Sequence, seed: int = 0, **overrides) -> ExperimentManifest:
    """以固定实验模型及其配套生成参数构造 manifest, overrides 覆盖其余字段"""
    fields = {
        'model': {'fixture': name, 'seed': seed},
        'attacks': tuple(a if isinstance(a, dict) else attack_to_dict(a) for a in attack_list),
        'gen': fixture_gen_config(name),
    }
    fields.update(overrides)
    return ExperimentManifest(**fields)


# ============ 检测率曲线 ============

@dataclass(frozen=True, eq=False)
class DetectionCurve:
    """检测率曲线: rows 每行一个 (方法, 规格, N_S, 攻击) 点; trial_table 记录每次试验的首个不一致位置"""
    rows: pd.DataFrame
    trial_table: pd.DataFrame
    manifest: Dict = field(default_factory=dict)
    stats: Dict = field(default_factory=dict)
    partial: bool = False

    def rate(self, method: str, spec: str, ns: int, attack: str) -> float:
        hit = self.rows[(self.rows['method'] == method) & (self.rows['spec'] == spec)
                        & (self.rows['ns'] == ns) & (self.rows['attack'] == attack)]
        if hit.empty:
            raise KeyError((method, spec, ns, attack))
        return float(hit['rate'].iloc[0])

    def detected(self, ns: int) -> pd.Series:
        """每次试验在 N_S=ns 时是否检测到"""
        fm = self.trial_table['first_mismatch']
        return (fm >= 0) & (fm < ns)

    @property
    def attack_ids(self) -> List[str]:
        return list(dict.fromkeys(self.rows['attack']))

    def to_dict(self) -> Dict:
        return {
            'partial': self.partial,
            'manifest': self.manifest,
            'stats': self.stats,
            'rows': self.rows.to_dict('records'),
        }


def aggregate(table: pd.DataFrame, ns: Sequence[int], trials: Optional[int] = None) -> pd.DataFrame:
    """由逐次试验记录汇总检测率 (计数后相除, 与试验顺序无关)"""
    rows = []
    groups = table.groupby(['method', 'spec', 'attack'], sort=False)
    for (method, spec, attack), g in groups:
        fm = g['first_mismatch'].to_numpy()
        count = trials if trials is not None else len(g)
        for n in sorted(ns):
            detections = int(np.count_nonzero((fm >= 0) & (fm < n)))
            rows.append({'method': method, 'spec': spec, 'ns': int(n), 'attack': attack,
                         'trials': int(count), 'detections': detections,
                         'rate': detections / count if count else 0.0})
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


# ============ 实验对象 ============

@dataclass(frozen=True, eq=False)
class Subject:
    """被测模型及其数据"""
    model: Model
    train: Optional[LabeledSet]
    held_out: LabeledSet
    description: str


def load_subject(ref: Dict) -> Subject:
    """按 manifest 的 model 字段载入模型与数据"""
    if 'fixture' in ref:
        fx = build_fixture(ref['fixture'], int(ref.get('seed', 0)))
        subject = Subject(fx.model, fx.train, fx.held_out, f"fixture {fx.name} seed {fx.seed}")
    else:
        model = nn.load_model(ref['path'])
        train = data.load_set(ref['train']) if ref.get('train') else None
        if ref.get('held_out'):
            held_out = data.load_set(ref['held_out'])
        elif ref.get('idx_images') and ref.get('idx_labels'):
            held_out = data.load_idx(ref['idx_images'], ref['idx_labels'], model.num_classes)
        else:
            raise InvalidInput("manifest model needs a held_out set or IDX archives")
        subject = Subject(model, train, held_out, ref['path'])

    if ref.get('digest'):
        expected = ModelDigest.from_hex(ref['digest'])
        actual = nn.digest(subject.model)
        if actual != expected:
            raise InvalidInput(f"model digest {actual.hex} does not match manifest digest {expected.hex}")
    if subject.held_out.input_shape != subject.model.input_shape:
        raise InvalidInput("held-out inputs do not match the model input shape")
    return subject


def _attack_ids(configs: Sequence[AttackConfig]) -> List[str]:
    ids, seen = [], {}
    for cfg in configs:
        base = cfg.attack_id
        seen[base] = seen.get(base, 0) + 1
        ids.append(base if seen[base] == 1 else f"{base}#{seen[base]}")
    return ids


def _baseline_bag(method: str, pool: np.ndarray, origins: np.ndarray, manifest: ExperimentManifest) -> np.ndarray:
    g = manifest.gen
    out = []
    for i, o in enumerate(origins):
        v0 = pool[o]
        if method == 'natural':
            out.append(v0)
        elif method == 'noise':
            out.append(samplegen.baseline_noise(v0, manifest.noise_sigma, mix(manifest.master_seed, _BASELINE_KEY, i),
                                                g.box_low, g.box_high))
        elif method == 'rotate':
            out.append(samplegen.baseline_rotate(v0, manifest.rotate_degrees))
        else:
            out.append(samplegen.baseline_distort(v0, manifest.distort_amplitude, manifest.distort_period,
                                                  seed=mix(manifest.master_seed, _BASELINE_KEY, i)))
    return np.stack(out).astype(np.float32)


# ============ 运行 ============

class _Experiment:
    """一次实验运行的共享只读状态"""

    def __init__(self, manifest: ExperimentManifest, subject: Subject, workers: int):
        self.manifest = manifest
        self.subject = subject
        self.model = subject.model
        self.specs = manifest.output_specs()
        for spec in self.specs:
            if spec.has_labels and spec.k > self.model.num_classes:
                raise InvalidSpec(f"{spec.label} needs at least {spec.k} classes, model has {self.model.num_classes}")
        self.attack_configs = manifest.attack_configs()
        self.attack_ids = _attack_ids(self.attack_configs)
        self.stats: Dict = {'subject': subject.description, 'model_digest': nn.digest(self.model).hex,
                           'attacks': {}}

        pool = subject.held_out.inputs
        self.origins = samplegen.draw_origins(len(pool), manifest.bag_size, manifest.gen.seed)
        self.bags: Dict[str, np.ndarray] = {}

        if any(m in SENSITIVE_METHODS for m in manifest.methods):
            bag = samplegen.generate_bag(self.model, manifest.selector, pool, manifest.bag_size,
                                         manifest.gen, workers)
            self.bags['sensitive'] = np.stack([b.v for b in bag])
            self.patterns = manc.bag_patterns(self.model, list(self.bags['sensitive']))
            cover = manc.manc_select(self.patterns, manifest.max_ns)
            self.stats['bag'] = {
                'size': len(bag),
                'mean_s_initial': float(np.mean([b.s_initial for b in bag])),
                'mean_s_final': float(np.mean([b.s_final for b in bag])),
                'mean_snr_ratio': float(np.mean([b.snr_ratio for b in bag])),
                'coverage_fraction': cover.coverage_fraction,
            }
        for method in manifest.methods:
            if method not in SENSITIVE_METHODS:
                self.bags[method] = _baseline_bag(method, pool, self.origins, manifest)

        self.fixed_models: Dict[int, Model] = {}
        for i, cfg in enumerate(self.attack_configs):
            if isinstance(cfg, WeightNoise):
                continue
            outcome = attacks.apply_attack(self.model, cfg, subject.train, subject.held_out)
            self.fixed_models[i] = outcome.tampered
            self.stats['attacks'][self.attack_ids[i]] = outcome.metrics

    def _selection(self, method: str, trial_seed: int) -> Tuple[np.ndarray, List[int]]:
        m = self.manifest
        if method in SENSITIVE_METHODS:
            bag = self.bags['sensitive']
            size = max(m.max_ns, int(math.ceil(m.candidate_fraction * len(bag))))
            candidates = np.sort(generator(trial_seed, _SUBPOOL_KEY).permutation(len(bag))[:size])
            if method == 'manc':
                # sample_index 即样本在袋中的位置
                chosen = manc.manc_select([self.patterns[int(c)] for c in candidates], m.max_ns).selected
                order = [int(i) for i in chosen]
            else:
                picks = manc.random_select(len(candidates), m.max_ns, mix(trial_seed, _SUBPOOL_KEY + 1))
                order = [int(candidates[p]) for p in picks]
            return bag, order
        bag = self.bags[method]
        order = [int(i) for i in generator(trial_seed, _METHOD_KEYS[method]).permutation(len(bag))[:m.max_ns]]
        return bag, order

    def _models(self, trial_seed: int) -> List[Model]:
        models = []
        for i, cfg in enumerate(self.attack_configs):
            if i in self.fixed_models:
                models.append(self.fixed_models[i])
            else:
                seed = mix(trial_seed, _ATTACK_KEY + i)
                models.append(attacks.weight_noise(self.model, cfg.ratio, cfg.sigma, seed).tampered)
        return models

    def run_trial(self, trial: int) -> List[Dict]:
        trial_seed = mix(self.manifest.master_seed, trial)
        tampered = self._models(trial_seed)
        records = []
        for method in self.manifest.methods:
            bag, order = self._selection(method, trial_seed)
            inputs = [bag[i] for i in order]
            for spec in self.specs:
                fp = build_fingerprint(self.model, inputs, spec, max_entries=None)
                for attack_id, model in zip(self.attack_ids, tampered):
                    report = verify(fp, local_oracle(model, spec))
                    first = report.first_mismatch
                    records.append({'trial': trial, 'method': method, 'spec': spec.label,
                                    'attack': attack_id, 'first_mismatch': -1 if first is None else int(first)})
        return records


def _curve(records: List[Dict], manifest: ExperimentManifest, stats: Dict, partial: bool) -> DetectionCurve:
    table = pd.DataFrame(records, columns=TRIAL_COLUMNS)
    table = table.sort_values(['trial', 'method', 'spec', 'attack'], kind='mergesort').reset_index(drop=True)
    recorded = manifest.to_dict()
    if stats.get('model_digest'):
        recorded['model']['digest'] = stats['model_digest']
    return DetectionCurve(aggregate(table, manifest.ns), table, recorded, stats, partial)


def run_experiment(manifest: ExperimentManifest, workers: int = 1,
                   subject: Optional[Subject] = None) -> DetectionCurve:
    """运行实验并返回检测率曲线

    每次试验的种子为 mix(master_seed, trial)。任一环节失败时抛 ExperimentAborted,
    其 partial 为已完成试验组成的曲线 (partial=True)。
    """
    try:
        if subject is None:
            subject = load_subject(manifest.model)
        exp = _Experiment(manifest, subject, workers)
    except (SensiprintError, OSError) as e:
        raise ExperimentAborted(f"experiment setup failed: {e}") from e

    results: Dict[int, List[Dict]] = {}
    failure: Optional[Tuple[int, Exception]] = None
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {t: executor.submit(exp.run_trial, t) for t in range(manifest.trials)}
            for t, fut in futures.items():
                try:
                    results[t] = fut.result()
                except Exception as e:
                    if failure is None:
                        failure = (t, e)
    else:
        for t in range(manifest.trials):
            try:
                results[t] = exp.run_trial(t)
            except Exception as e:
                failure = (t, e)
                break
            if (t + 1) % 100 == 0:
                logger.info("completed %d/%d trials", t + 1, manifest.trials)

    records = [r for t in sorted(results) for r in results[t]]
    if failure is not None:
        partial = _curve(records, manifest, exp.stats, partial=True)
        t, e = failure
        raise ExperimentAborted(f"trial {t} failed: {e}", partial) from e
    return _curve(records, manifest, exp.stats, partial=False)


def fixture_names() -> List[str]:
    return sorted(RECIPES)

"""
报告生成模块
检测率曲线 → CSV / JSON / 文本摘要, 所有文件原子写入
"""

import io
import json
import math
import os
from typing import Dict, List

import numpy as np
import pandas as pd

from sensiprint.bench import CURVE_COLUMNS, TRIAL_COLUMNS, DetectionCurve
from sensiprint.chart import curve_series
from sensiprint.container import atomic_write, canonical_json
from sensiprint.errors import ParseError


def _clean(obj):
    """numpy 类型转为 Python 原生类型, 非有限浮点数转为 None"""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def curve_csv(curve: DetectionCurve) -> str:
    buf = io.StringIO()
    curve.rows.to_csv(buf, index=False, columns=CURVE_COLUMNS, lineterminator='\n')
    return buf.getvalue()


def write_csv(curve: DetectionCurve, path: str) -> None:
    """每个曲线点一行"""
    atomic_write(path, curve_csv(curve).encode('utf-8'))


def write_trials(curve: DetectionCurve, path: str) -> None:
    buf = io.StringIO()
    curve.trial_table.to_csv(buf, index=False, columns=TRIAL_COLUMNS, lineterminator='\n')
    atomic_write(path, buf.getvalue().encode('utf-8'))


def write_json(curve: DetectionCurve, path: str) -> None:
    """曲线 JSON (含绘图数据)"""
    body = _clean(curve.to_dict())
    body['chart'] = _clean(curve_series(curve))
    atomic_write(path, (canonical_json(body) + '\n').encode('utf-8'))


def load_curve(path: str, trials_path: str = None) -> DetectionCurve:
    """读取 write_json 写出的曲线"""
    with open(path, encoding='utf-8') as f:
        try:
            body = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}: not valid JSON ({e.msg})", f"line {e.lineno}")
    try:
        rows = pd.DataFrame(body['rows'], columns=CURVE_COLUMNS)
    except (KeyError, TypeError) as e:
        raise ParseError(f"{path}: curve file lacks rows ({e})")
    if trials_path and os.path.exists(trials_path):
        trials = pd.read_csv(trials_path)
    else:
        trials = pd.DataFrame(columns=TRIAL_COLUMNS)
    return DetectionCurve(rows, trials, body.get('manifest', {}), body.get('stats', {}), bool(body.get('partial')))


def render_summary(curve: DetectionCurve) -> str:
    """生成文本摘要"""
    rows = curve.rows
    m = curve.manifest
    lines = [
        "",
        "=" * 80,
        "                        模型完整性检测报告",
        "=" * 80,
        f"被测模型: {curve.stats.get('subject', m.get('model'))}",
        f"模型摘要: {curve.stats.get('model_digest') or m.get('model', {}).get('digest', '?')}",
        f"试验次数: {m.get('trials', '?')} | 主种子: {m.get('master_seed', '?')}"
        + (" | 注意: 部分结果" if curve.partial else ""),
    ]

    bag = curve.stats.get('bag')
    if bag:
        lines += [
            "-" * 80,
            "【样本袋】",
            f"样本数: {bag['size']}",
            f"平均灵敏度: {bag['mean_s_initial']:.4g} → {bag['mean_s_final']:.4g}",
            f"神经元覆盖率: {bag['coverage_fraction'] * 100:.1f}%",
        ]

    attack_stats: Dict = curve.stats.get('attacks', {})
    if attack_stats:
        lines += ["-" * 80, "【攻击】"]
        for attack_id, metrics in attack_stats.items():
            parts: List[str] = [f"修改参数 {metrics.get('params_changed', 0)}"]
            if metrics.get('accuracy_before') is not None and metrics.get('accuracy_after') is not None:
                parts.append(f"准确率 {metrics['accuracy_before'] * 100:.1f}% → {metrics['accuracy_after'] * 100:.1f}%")
            if metrics.get('attack_success_rate') is not None:
                parts.append(f"攻击成功率 {metrics['attack_success_rate'] * 100:.1f}%")
            lines.append(f"{attack_id}: " + ", ".join(parts))

    if not rows.empty:
        max_ns = int(rows['ns'].max())
        lines += ["-" * 80, f"【检测率 (N_S={max_ns})】"]
        at = rows[rows['ns'] == max_ns].sort_values(['attack', 'spec', 'method'], kind='mergesort')
        for _, r in at.iterrows():
            lines.append(f"{r['attack']:<28} {r['spec']:<14} {r['method']:<8} "
                         f"{r['detections']:>6}/{r['trials']:<6} {r['rate'] * 100:6.2f}%")

    lines += ["=" * 80, ""]
    return "\n".join(lines)


def write_report(curve: DetectionCurve, out_dir: str, stem: str = 'curve') -> Dict[str, str]:
    """写出 CSV、JSON、逐次试验表与文本摘要, 返回各文件路径"""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        'csv': os.path.join(out_dir, f'{stem}.csv'),
        'json': os.path.join(out_dir, f'{stem}.json'),
        'trials': os.path.join(out_dir, f'{stem}.trials.csv'),
        'summary': os.path.join(out_dir, f'{stem}.txt'),
    }
    write_csv(curve, paths['csv'])
    write_json(curve, paths['json'])
    write_trials(curve, paths['trials'])
    atomic_write(paths['summary'], render_summary(curve).encode('utf-8'))
    return paths

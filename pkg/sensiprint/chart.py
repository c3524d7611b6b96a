"""
图表数据模块
检测率-N_S 曲线、输出规格对比 (只输出绘图用数据, 不绑定绘图库)
"""

from typing import Dict, List, Optional

import pandas as pd


class CurveChart:
    """检测率曲线图表数据"""

    def __init__(self, rows: pd.DataFrame):
        self.rows = rows.sort_values(['attack', 'spec', 'method', 'ns'], kind='mergesort')

    def get_series_data(self, attack: Optional[str] = None, spec: Optional[str] = None) -> List[Dict]:
        """每个 (攻击, 规格, 方法) 一条折线, x 为 N_S, y 为检测率"""
        rows = self.rows
        if attack is not None:
            rows = rows[rows['attack'] == attack]
        if spec is not None:
            rows = rows[rows['spec'] == spec]
        series = []
        for (a, s, m), g in rows.groupby(['attack', 'spec', 'method'], sort=True):
            series.append({
                'attack': a,
                'spec': s,
                'method': m,
                'points': [{'x': int(n), 'y': round(float(r), 4)} for n, r in zip(g['ns'], g['rate'])],
            })
        return series

    def get_spec_comparison(self, ns: int) -> Dict:
        """固定 N_S 时各输出规格下的检测率 (柱状图)"""
        at = self.rows[self.rows['ns'] == ns]
        table = at.pivot_table(index=['attack', 'method'], columns='spec', values='rate', aggfunc='first')
        bars = []
        for (attack, method), values in table.iterrows():
            bars.append({'attack': attack, 'method': method,
                         'rates': {spec: round(float(v), 4) for spec, v in values.dropna().items()}})
        return {'ns': int(ns), 'bars': bars}


def curve_series(curve) -> Dict:
    """绘图用 JSON: 折线 + 最大 N_S 处的规格对比"""
    chart = CurveChart(curve.rows)
    max_ns = int(curve.rows['ns'].max()) if not curve.rows.empty else 0
    return {
        'x_label': 'N_S',
        'y_label': 'detection rate',
        'series': chart.get_series_data(),
        'spec_comparison': chart.get_spec_comparison(max_ns) if max_ns else {'ns': 0, 'bars': []},
    }

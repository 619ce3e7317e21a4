"""
Report files for a finished ablation: CSV tables, plot-ready JSON series and HTML figures.
"""

import json
import logging
import os
from typing import Any, Dict, List

from analysis_modules.ablation_study import AblationResult
from src.errors import ArgumentError
from src.visualization import build_report_figures, write_figures_html

logger = logging.getLogger(__name__)

REPORT_FORMATS = ('csv', 'table', 'json', 'html', 'all')

PER_EPOCH_FILE = 'per_epoch.csv'
FIRST_EPOCH_FILE = 'first_epoch_table.csv'
FIRST_EPOCH_TEXT_FILE = 'first_epoch_table.txt'
IMPROVEMENT_FILE = 'improvement.csv'
SERIES_FILE = 'series.json'
FIGURES_FILE = 'figures.html'


def build_series(result: AblationResult) -> Dict[str, Any]:
    """{str(size): {domain: {'epoch': [...], metric: [...]}}}, epochs ascending."""
    frame = result.per_epoch_frame()
    series: Dict[str, Any] = {}
    for size in result.sizes:
        by_domain = {}
        for domain in result.domains:
            rows = frame[(frame['size'] == size) & (frame['domain'] == domain)]
            pivot = rows.pivot(index='epoch', columns='metric', values='value').sort_index()
            entry = {'epoch': [int(e) for e in pivot.index]}
            entry.update({metric: [float(v) for v in pivot[metric]] for metric in pivot.columns})
            by_domain[domain] = entry
        series[str(size)] = by_domain
    return series


def emit_report(result: AblationResult, out_dir: str, fmt: str = 'all') -> List[str]:
    """
    Write the ablation report files.

    Args:
        result: Ablation result with at least one row
        out_dir: Destination directory (created if needed)
        fmt: csv, table, json, html or all

    Returns:
        Paths of the written files
    """
    if fmt not in REPORT_FORMATS:
        raise ArgumentError(f"Unknown report format '{fmt}', expected one of {', '.join(REPORT_FORMATS)}")
    if not result.rows:
        raise ArgumentError("Cannot report an empty ablation result")

    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []
    per_epoch = result.per_epoch_frame()
    improvement = result.improvement_summary()

    def target(name: str) -> str:
        path = os.path.join(out_dir, name)
        written.append(path)
        return path

    if fmt in ('csv', 'all'):
        per_epoch.to_csv(target(PER_EPOCH_FILE), index=False, lineterminator='\n')
        improvement.to_csv(target(IMPROVEMENT_FILE), index=False, lineterminator='\n')

    if fmt in ('csv', 'table', 'all'):
        table = result.first_epoch_table()
        table.to_csv(target(FIRST_EPOCH_FILE), index=False, lineterminator='\n')
        if fmt == 'table':
            with open(target(FIRST_EPOCH_TEXT_FILE), 'w', encoding='utf-8') as f:
                f.write(table.to_string(index=False, float_format=lambda v: f"{v:.4f}") + '\n')

    if fmt in ('json', 'all'):
        with open(target(SERIES_FILE), 'w', encoding='utf-8') as f:
            json.dump(build_series(result), f, indent=2)
            f.write('\n')

    if fmt in ('html', 'all'):
        figures = build_report_figures(per_epoch, improvement, result.domains)
        write_figures_html(list(figures.values()), target(FIGURES_FILE))

    logger.info(f"Report ({fmt}) written to {out_dir}: {', '.join(os.path.basename(p) for p in written)}")
    return written

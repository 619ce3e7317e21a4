import plotly.graph_objects as go
import plotly.io as pio
import pandas as pd
from plotly.subplots import make_subplots
from typing import Dict, List, Sequence

METRIC_TITLES = {'precision': 'Precision@k', 'map': 'MAP@k', 'mrr': 'MRR@k', 'ndcg': 'nDCG@k'}


def create_epoch_series_chart(per_epoch: pd.DataFrame, domain: str,
                              metrics: Sequence[str] = ('map', 'mrr', 'ndcg')) -> go.Figure:
    """
    Per-epoch metric curves for one evaluation domain.

    Args:
        per_epoch: Long-format frame with size, epoch, domain, metric, value columns
        domain: Domain tag to plot
        metrics: One panel per metric

    Returns:
        Plotly figure object, one trace per training-set size in every panel
    """
    frame = per_epoch[per_epoch['domain'] == domain] if not per_epoch.empty else per_epoch
    if frame.empty:
        return go.Figure()

    fig = make_subplots(rows=1, cols=len(metrics), subplot_titles=[METRIC_TITLES.get(m, m) for m in metrics],
                        shared_xaxes=True)
    sizes = sorted(frame['size'].unique())

    for col, metric in enumerate(metrics, start=1):
        metric_frame = frame[frame['metric'] == metric]
        for size in sizes:
            series = metric_frame[metric_frame['size'] == size].sort_values('epoch')
            fig.add_trace(
                go.Scatter(
                    x=series['epoch'],
                    y=series['value'],
                    mode='lines+markers',
                    name=f"{size} triplets",
                    legendgroup=str(size),
                    showlegend=(col == 1),
                    hovertemplate=f"size {size}<br>epoch %{{x}}<br>%{{y:.4f}}<extra></extra>"
                ),
                row=1, col=col
            )
        fig.update_xaxes(title_text="Epoch", row=1, col=col, dtick=1)

    fig.update_layout(
        title=dict(
            text=f"Metrics per epoch ({domain.replace('_', '-')})",
            x=0.5,
            xanchor='center'
        ),
        legend=dict(
            orientation="h",
            yanchor="bottom",
            y=-0.3,
            xanchor="center",
            x=0.5
        ),
        plot_bgcolor='white',
        margin=dict(l=50, r=30, t=80, b=80),
        height=420
    )
    fig.update_yaxes(showgrid=True, gridcolor='rgba(0,0,0,0.1)')
    return fig


def create_improvement_chart(improvement: pd.DataFrame) -> go.Figure:
    """
    Mean improvement over the untrained model per size, with standard deviation error bars.

    Args:
        improvement: Frame with size, domain, metric, mean_improvement, std_improvement columns
    """
    if improvement.empty:
        return go.Figure()

    metrics = [m for m in ('map', 'mrr', 'ndcg', 'precision') if m in set(improvement['metric'])]
    fig = make_subplots(rows=1, cols=len(metrics), subplot_titles=[METRIC_TITLES.get(m, m) for m in metrics])

    for col, metric in enumerate(metrics, start=1):
        metric_frame = improvement[improvement['metric'] == metric]
        for domain in sorted(metric_frame['domain'].unique()):
            rows = metric_frame[metric_frame['domain'] == domain].sort_values('size')
            fig.add_trace(
                go.Bar(
                    x=rows['size'].astype(str),
                    y=rows['mean_improvement'],
                    error_y=dict(type='data', array=rows['std_improvement'], visible=True),
                    name=domain.replace('_', '-'),
                    legendgroup=domain,
                    showlegend=(col == 1),
                    hovertemplate='size %{x}<br>%{y:+.4f}<extra></extra>'
                ),
                row=1, col=col
            )
        fig.update_xaxes(title_text="Training triplets", row=1, col=col)

    fig.update_layout(
        title=dict(
            text="Average improvement over the untrained model",
            x=0.5,
            xanchor='center'
        ),
        barmode='group',
        plot_bgcolor='white',
        margin=dict(l=50, r=30, t=80, b=60),
        height=420
    )
    fig.update_yaxes(showgrid=True, gridcolor='rgba(0,0,0,0.1)', zeroline=True, zerolinecolor='rgba(0,0,0,0.4)')
    return fig


def write_figures_html(figures: List[go.Figure], path: str):
    """Write several figures into one standalone HTML page (plotly.js inlined once)."""
    parts: List[str] = []
    for index, fig in enumerate(figures):
        parts.append(pio.to_html(fig, full_html=False, include_plotlyjs=(index == 0)))
    with open(path, 'w', encoding='utf-8') as f:
        f.write("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Ablation report</title></head><body>\n")
        f.write('\n'.join(parts))
        f.write("\n</body></html>\n")


def build_report_figures(per_epoch: pd.DataFrame, improvement: pd.DataFrame,
                         domains: Sequence[str]) -> Dict[str, go.Figure]:
    figures = {f"series_{domain}": create_epoch_series_chart(per_epoch, domain) for domain in domains}
    figures['improvement'] = create_improvement_chart(improvement)
    return figures

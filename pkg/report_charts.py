"""
Report Charts Module (report_charts.py)

Plotly figures and pandas tables built from run reports: tier histogram of a
store, prune progress per iteration and the threshold sweep.
"""
import logging
import os
from typing import Any, Dict, List, Optional

import pandas as pd
import plotly.graph_objects as go
from plotly.subplots import make_subplots

from errors import DataIOError

logger = logging.getLogger(__name__)

TIER_COLORS = {"FP32": '#0052B8', "FP16": '#63A4FF', "INT8": '#A9D1FF'}


def create_tier_histogram(histogram: Dict[str, int], title: str = 'Rows per Precision Tier') -> Optional[go.Figure]:
    if not histogram or sum(histogram.values()) == 0:
        logger.warning("create_tier_histogram: empty histogram.")
        return None
    tiers = [t for t in ("FP32", "FP16", "INT8") if t in histogram]
    counts = [histogram[t] for t in tiers]
    fig = go.Figure()
    fig.add_trace(go.Bar(
        x=tiers,
        y=counts,
        marker_color=[TIER_COLORS[t] for t in tiers],
        text=[f"{c:,}" for c in counts],
        textposition='auto'
    ))
    fig.update_layout(
        title_text=title,
        xaxis_title_text='Tier',
        yaxis_title_text='Rows',
        height=400,
    )
    return fig


def create_prune_progress_chart(prune_report: Dict[str, Any]) -> Optional[go.Figure]:
    """AUC and memory ratio after every prune iteration, baseline as iteration 0."""
    iterations = prune_report.get("iterations") or []
    if not iterations:
        logger.warning("create_prune_progress_chart: no iterations to plot.")
        return None
    x = [0] + [it["iteration"] for it in iterations]
    auc = [prune_report["baseline_auc"]] + [it["auc"] for it in iterations]
    ratio = [1.0] + [it["memory_ratio"] for it in iterations]
    labels = ["baseline"] + [f"-{it['deleted_fields']}" for it in iterations]

    fig = make_subplots(specs=[[{"secondary_y": True}]])
    fig.add_trace(go.Scatter(x=x, y=auc, name='AUC', mode='lines+markers', text=labels,
                             marker_color='#0052B8'), secondary_y=False)
    fig.add_trace(go.Bar(x=x, y=ratio, name='Memory ratio', marker_color='#A9D1FF', opacity=0.6),
                  secondary_y=True)
    fig.update_layout(
        title_text=f"Field Pruning ({prune_report.get('status', '')})",
        xaxis_title_text='Iteration',
        legend_title_text='Metric',
        height=450,
    )
    fig.update_yaxes(title_text='AUC', secondary_y=False)
    fig.update_yaxes(title_text='Embedding memory / baseline', range=[0, 1.05], secondary_y=True)
    return fig


def create_sweep_table(points: List[Dict[str, Any]]) -> Optional[pd.DataFrame]:
    if not points:
        logger.warning("create_sweep_table: no sweep points.")
        return None
    df = pd.DataFrame(points)
    columns = [c for c in ("sweep", "t8", "t16", "auc", "logloss", "memory_ratio", "payload_ratio") if c in df.columns]
    return df[columns]


def create_sweep_chart(points: List[Dict[str, Any]]) -> Optional[go.Figure]:
    """AUC against embedding memory, one line per swept threshold."""
    df = create_sweep_table(points)
    if df is None:
        return None
    fig = go.Figure()
    for sweep, group in df.groupby("sweep", sort=False):
        swept = "t8" if sweep == "t8" else "t16"
        fig.add_trace(go.Scatter(
            x=group["memory_ratio"],
            y=group["auc"],
            mode='lines+markers+text',
            name=f"sweep {swept}",
            text=[f"{v:g}" for v in group[swept]],
            textposition='top center'
        ))
    fig.update_layout(
        title_text='Threshold Sweep',
        xaxis_title_text='Embedding memory / FP32 baseline',
        yaxis_title_text='AUC',
        legend_title_text='Sweep',
        height=450,
    )
    return fig


def create_memory_table(memory_report: Dict[str, Any]) -> Optional[pd.DataFrame]:
    tables = memory_report.get("tables") or []
    if not tables:
        return None
    rows = []
    for t in tables:
        rows.append({
            "Table": t["table_id"],
            "Rows": t["n_rows"],
            "Dim": t["dim"],
            "FP32": t["tiers"].get("FP32", 0),
            "FP16": t["tiers"].get("FP16", 0),
            "INT8": t["tiers"].get("INT8", 0),
            "Payload (bytes)": t["payload_bytes"],
            "Extra words (bytes)": t["extra_word_bytes"],
            "Baseline (bytes)": t["baseline_bytes"],
            "Dropped": t["dropped"],
        })
    return pd.DataFrame(rows)


def write_figure(fig: go.Figure, directory: str, name: str) -> str:
    try:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"{name}.html")
        fig.write_html(path, include_plotlyjs="cdn")
    except OSError as e:
        raise DataIOError(f"Could not write chart '{name}' to {directory}: {e}") from e
    logger.info(f"Wrote chart {path}")
    return path

#!/usr/bin/env python3
"""
Optional plotly figures for pruning runs
"""

from pathlib import Path
from typing import Dict, Sequence

import plotly.graph_objects as go

from utils.logger import get_logger

logger = get_logger('plots')


def curves_figure(curves: Sequence) -> go.Figure:
    """delta against pruning ratio, one trace per layer"""
    fig = go.Figure()
    for curve in curves:
        fig.add_trace(go.Scatter(x=list(curve.grid), y=list(curve.delta), mode='lines+markers',
                                 name=curve.layer_id))
    fig.update_layout(title='Distortion curves', xaxis_title='pruning ratio', yaxis_title='delta',
                      template='plotly_white')
    return fig


def sparsity_figure(alphas: Dict[str, float], title: str = 'Layerwise pruning ratio') -> go.Figure:
    fig = go.Figure(go.Bar(x=list(alphas), y=list(alphas.values())))
    fig.update_layout(title=title, xaxis_title='layer', yaxis_title='pruning ratio',
                      yaxis_range=[0, 1], template='plotly_white')
    return fig


def write_figure(fig: go.Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_html(str(path), include_plotlyjs='cdn', full_html=True)
    logger.info(f"figure written to {path}")
    return path

"""
Plotly figures for rollouts.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
import plotly.graph_objects as go

logger = logging.getLogger(__name__)


def _wireframe(points: np.ndarray, elements: np.ndarray):
    """x/y arrays tracing every triangle outline, separated by None gaps."""
    closed = np.concatenate([elements, elements[:, :1]], axis=1)
    xs, ys = [], []
    for tri in closed:
        xs.extend(points[tri, 0].tolist() + [None])
        ys.extend(points[tri, 1].tolist() + [None])
    return xs, ys


def rollout_figure(
    elements: np.ndarray,
    truth: np.ndarray,
    predicted: np.ndarray,
    title: Optional[str] = None,
) -> go.Figure:
    """
    Overlay predicted and ground-truth meshes of one (2D) step.

    Args:
        elements: (m, 3) triangles
        truth: (n, 2) ground-truth positions
        predicted: (n, 2) predicted positions
        title: Figure title
    """
    fig = go.Figure()
    for label, points, color in (("ground truth", truth, "#7f7f7f"), ("prediction", predicted, "#d62728")):
        xs, ys = _wireframe(np.asarray(points), np.asarray(elements))
        fig.add_trace(go.Scatter(x=xs, y=ys, mode="lines", name=label, line=dict(color=color, width=1)))
    fig.update_layout(
        title=title,
        xaxis=dict(scaleanchor="y", scaleratio=1, title="x"),
        yaxis=dict(title="y"),
        template="plotly_white",
    )
    return fig


def save_rollout_figure(
    path: Union[str, Path],
    elements: np.ndarray,
    truth: np.ndarray,
    predicted: np.ndarray,
    title: Optional[str] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rollout_figure(elements, truth, predicted, title).write_html(str(path), include_plotlyjs="cdn")
    logger.info(f"Wrote rollout figure to {path}")
    return path

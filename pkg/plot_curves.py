import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import pandas as pd
import plotly.graph_objects as go

from logging_config import setup_logging

logger = logging.getLogger(__name__)

COLORS = ['blue', 'red', 'green', 'orange', 'purple', 'brown']


def create_curve_plot(curves: pd.DataFrame, title: str = 'Learning curves') -> Optional[go.Figure]:
    """Mean normalized return per variant with a shaded min/max band."""
    if curves.empty:
        return None

    fig = go.Figure()
    for i, (variant, part) in enumerate(curves.groupby('variant', sort=False)):
        color = COLORS[i % len(COLORS)]
        fig.add_trace(go.Scatter(
            x=list(part['iteration']) + list(part['iteration'])[::-1],
            y=list(part['max']) + list(part['min'])[::-1],
            fill='toself',
            opacity=0.2,
            line=dict(color=color, width=0),
            name=f'{variant} range',
            showlegend=False,
            hoverinfo='skip'
        ))
        fig.add_trace(go.Scatter(
            x=part['iteration'],
            y=part['mean'],
            mode='lines',
            name=variant,
            line=dict(color=color, width=2)
        ))

    fig.update_layout(
        title=title,
        xaxis_title='Iteration',
        yaxis_title='Normalized return',
        yaxis_range=[0, 1],
        showlegend=True,
        hovermode='x unified'
    )
    return fig


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description='Render ablation learning curves to HTML.')
    parser.add_argument('curves', help='curves.csv written by the ablate command')
    parser.add_argument('--out', help='Output HTML path (default: next to the CSV)')
    parser.add_argument('--title', default='Learning curves')
    args = parser.parse_args(argv)

    setup_logging()
    curves_path = Path(args.curves)
    if not curves_path.exists():
        logger.error(f"Curve file not found: {curves_path}")
        return 1
    fig = create_curve_plot(pd.read_csv(curves_path), args.title)
    if fig is None:
        logger.error(f"No curves in {curves_path}")
        return 2
    out = Path(args.out) if args.out else curves_path.with_suffix('.html')
    fig.write_html(str(out))
    logger.info(f"Wrote {out}")
    return 0


if __name__ == '__main__':
    sys.exit(main())

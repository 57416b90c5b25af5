"""
Analytics over evaluation reports, training metrics and benchmark timings.

pandas and matplotlib come from the `analytics` extra and are imported on use.
"""
import logging
from typing import Dict, Optional

from src.errors import MalformedRecord

logger = logging.getLogger(__name__)

SUMMARY_ROW = 'MEAN'
METRIC_COLUMNS = ['auroc', 'auprc', 'top1', 'top5', 'top10']


def _pandas():
    try:
        import pandas as pd
    except ImportError:
        raise ImportError("pandas is required for reports: pip install posh-structure-hash[analytics]")
    return pd


def load_tsv(path: str):
    """Read a tab-separated file written by posh into a DataFrame."""
    pd = _pandas()
    df = pd.read_csv(path, sep='\t')
    for column in ('query', 'n_similar'):
        if column in df.columns:
            df[column] = df[column].astype(str)
    return df


def summarize_evaluation(df, n_extremes: int = 5) -> Dict:
    """
    Split an evaluation report into its per-query rows and the summary row.

    Args:
        df: DataFrame of an evaluation report
        n_extremes: Number of best and worst queries (by AUROC) to keep

    Returns:
        Dictionary with query count, skipped count, means and best/worst queries
    """
    missing = [c for c in ['query'] + METRIC_COLUMNS if c not in df.columns]
    if missing:
        raise MalformedRecord(f"Evaluation report lacks columns {missing}")
    is_summary = df['query'] == SUMMARY_ROW
    if is_summary.sum() != 1:
        raise MalformedRecord("Evaluation report needs exactly one MEAN row")

    summary_row = df[is_summary].iloc[0]
    skipped = 0
    marker = str(summary_row.get('n_similar', ''))
    if marker.startswith('skipped='):
        skipped = int(marker[len('skipped='):])

    queries = df[~is_summary].copy()
    queries['n_similar'] = queries['n_similar'].astype(int)
    ranked = queries.sort_values('auroc', kind='stable')
    return {
        'queries': len(queries),
        'skipped': skipped,
        'mean': {c: float(summary_row[c]) for c in METRIC_COLUMNS},
        'worst': ranked.head(n_extremes).to_dict('records'),
        'best': ranked.iloc[::-1].head(n_extremes).to_dict('records'),
    }


def summarize_metrics(df) -> Dict:
    """First, last and best total loss of a training metrics log."""
    if df.empty:
        return {'steps': 0}
    best = df.loc[df['loss'].idxmin()]
    return {
        'steps': int(df['step'].iloc[-1]),
        'first_loss': float(df['loss'].iloc[0]),
        'last_loss': float(df['loss'].iloc[-1]),
        'best_loss': float(best['loss']),
        'best_step': int(best['step']),
    }


def plot_report(out_path: str, metrics=None, benchmark=None) -> Optional[str]:
    """
    Plot the loss curves and search timings that are available.

    Args:
        out_path: Image file to write
        metrics: DataFrame of a training metrics log
        benchmark: DataFrame of benchmark timing rows

    Returns:
        out_path, or None when there was nothing to plot
    """
    panels = [p for p in (metrics, benchmark) if p is not None]
    if not panels:
        logger.warning("Nothing to plot")
        return None

    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(panels), figsize=(6 * len(panels), 4), squeeze=False)
    axes = axes[0]
    i = 0
    if metrics is not None:
        ax = axes[i]
        for column in ('loss', 'l_sim', 'l_hash'):
            ax.plot(metrics['step'], metrics[column], label=column)
        ax.set_xlabel('optimizer step')
        ax.set_ylabel('loss')
        ax.legend()
        i += 1
    if benchmark is not None:
        ax = axes[i]
        for method, rows in benchmark.groupby('method'):
            ax.plot(rows['n'], rows['seconds'], marker='o', label=method)
        ax.set_xscale('log')
        ax.set_yscale('log')
        ax.set_xlabel('database size')
        ax.set_ylabel('seconds per query')
        ax.legend()

    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    logger.info(f"Saved plot to {out_path}")
    return out_path

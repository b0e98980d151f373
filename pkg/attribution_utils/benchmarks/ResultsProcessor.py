import logging
from collections import Counter
from pathlib import Path
from typing import Iterable, List, Optional

import matplotlib
matplotlib.use('Agg')
import matplotlib.colors as mcolors
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.cm import ScalarMappable

from ..cli.RunArtifacts import atomic_target, write_text_atomic
from .Metrics import BUNDLE_FIELDS, DatasetReport

LOGGER = logging.getLogger(__name__)

METRIC_LABELS = {
    "coverage": "Coverage",
    "precision": "Precision",
    "recall": "Recall",
    "f1": "F1",
    "grounding_score": "Grounding",
    "over_citation_rate": "Over-citation",
    "accuracy": "Accuracy",
}
PLOTTED_METRICS = ("coverage", "precision", "recall", "f1", "grounding_score", "accuracy")


def as_percent(value: Optional[float]) -> str:
    """Fractions become percentages here and nowhere else."""
    return "-" if value is None else f"{value * 100:.1f}"


class ResultsProcessor:
    """Renders a DatasetReport as a text table, a DataFrame and a bar plot"""

    def __init__(self, run_id: str, run_title: str = "Attribution evaluation"):
        self.table_lines: List[str] = []
        self.run_id = run_id
        self.run_title = run_title

    # Table generation methods
    def generate_table(self, report: DatasetReport, warnings: Iterable[str] = ()) -> pd.DataFrame:
        """Create the report table and DataFrame (percentages to one decimal)"""
        self.table_lines = []
        df_data = []

        headers = ["Metric", "Mean(%)", "Defined"]
        self.table_lines.append("{:<16} {:<10} {:<8}".format(*headers))
        self.table_lines.append("-" * 36)

        rows = [(name, report.means[name], report.defined[name]) for name in BUNDLE_FIELDS]
        rows.append(("accuracy", report.accuracy, report.graded))
        for name, value, defined in rows:
            self.table_lines.append(
                "{:<16} {:<10} {:<8}".format(METRIC_LABELS[name], as_percent(value), defined))
            df_data.append([METRIC_LABELS[name], None if value is None else value * 100, defined])

        self.table_lines.append("-" * 36)
        for modality, value in report.per_modality_precision.items():
            label = f"P[{modality}]"
            count = report.per_modality_counts.get(modality, 0)
            self.table_lines.append("{:<16} {:<10} ({})".format(label, as_percent(value), count))
            df_data.append([label, None if value is None else value * 100, count])

        self.table_lines.extend([
            "-" * 36,
            f"Responses: {report.responses}, Skipped: {report.skipped}, "
            f"Undefined coverage: {report.undefined_coverage}, "
            f"Undefined attribution: {report.undefined_attribution}",
        ])

        warning_kinds = self._summarize_warnings(warnings)
        if warning_kinds:
            self.table_lines.append("\nWarnings:")
            for kind, count in warning_kinds.most_common():
                self.table_lines.append(f"  {count:>5}  {kind}")

        return pd.DataFrame(df_data, columns=["Metric", "Mean(%)", "Defined"])

    @staticmethod
    def _summarize_warnings(warnings: Iterable[str]) -> Counter:
        """Group warnings by their text after the per-item prefix."""
        kinds: Counter = Counter()
        for warning in warnings:
            _, _, tail = warning.partition(": ")
            kinds[(tail or warning).split(" (")[0][:72]] += 1
        return kinds

    def render(self) -> str:
        return "\n".join(self.table_lines)

    def save_table(self, save_dir: Path) -> Path:
        """Save table to text file"""
        file_path = Path(save_dir) / f"{self.run_id}_results.txt"
        write_text_atomic(file_path, self.render() + "\n")
        LOGGER.info("Results table saved to %s", file_path)
        return file_path

    # Plotting methods
    def generate_plot(self, df: pd.DataFrame, save_dir: Path, center_color: str = "#673147") -> Optional[Path]:
        """Bar chart of the dataset means; undefined metrics are left out"""
        df = df[df["Metric"].isin([METRIC_LABELS[m] for m in PLOTTED_METRICS])].dropna(subset=["Mean(%)"])
        if df.empty:
            LOGGER.warning("Nothing to plot: every plotted metric is undefined")
            return None
        labels = list(df["Metric"])
        values = np.asarray(df["Mean(%)"], dtype=float)

        fig, ax = self._setup_figure()
        bars = self._create_bars(ax, labels, values, center_color)
        self._add_annotations(ax, bars, df)
        self._configure_axes(ax)
        self._add_reference_lines(ax, values)
        self._add_colorbar(fig, ax, center_color)
        ax.set_title(self.run_title, fontsize=18, fontweight='bold')

        plt.tight_layout()
        plot_path = Path(save_dir) / f"{self.run_id}_metrics.png"
        try:
            with atomic_target(plot_path) as tmp:
                fig.savefig(tmp, format="png", bbox_inches='tight')
        finally:
            plt.close(fig)
        LOGGER.info("Results plot saved to %s", plot_path)
        return plot_path

    # Plotting helper methods (kept small for debugging)
    @staticmethod
    def generate_gradient_around_color(center_color, num_steps=10):
        """Create a gradient around the given center color."""
        center_rgb = mcolors.hex2color(center_color)
        lighter_colors = [tuple(min(1, c + i * 0.05) for c in center_rgb) for i in range(num_steps)]
        darker_colors = [tuple(max(0, c - i * 0.05) for c in center_rgb) for i in range(num_steps)]
        full_gradient = darker_colors[::-1] + [center_rgb] + lighter_colors
        return full_gradient[::-1]

    def _setup_figure(self):
        return plt.subplots(figsize=(10.4, 10.4 * 9 / 16))

    def _cmap(self, center_color):
        gradient = self.generate_gradient_around_color(center_color)
        return mcolors.LinearSegmentedColormap.from_list("custom_gradient", gradient)

    def _create_bars(self, ax, labels, values, center_color):
        cmap = self._cmap(center_color)
        norm = mcolors.Normalize(vmin=0, vmax=100)
        return ax.bar(labels, values, color=[cmap(norm(v)) for v in values], zorder=3, alpha=0.95)

    def _add_annotations(self, ax, bars, df):
        for i, bar in enumerate(bars):
            ax.annotate(
                f"{df['Mean(%)'].iloc[i]:.1f}% (n={int(df['Defined'].iloc[i])})",
                xy=(bar.get_x() + bar.get_width() / 2, bar.get_height()),
                xytext=(0, 4), textcoords="offset points", ha='center',
                fontsize=8, color='black', zorder=5,
            )

    def _configure_axes(self, ax):
        ax.set_ylim(0, 110)
        ax.set_ylabel("Dataset mean (%)", fontsize=12)
        ax.grid(True, which='major', axis='y', linestyle='--', linewidth=0.8, alpha=0.8)
        ax.minorticks_on()
        ax.grid(True, which='minor', axis='y', linestyle=':', linewidth=0.6, alpha=0.6)

    def _add_reference_lines(self, ax, values):
        ax.axhline(np.mean(values), color='#008000', linestyle='-', label=f'Average: {np.mean(values):.1f}%')
        ax.axhline(np.median(values), color='#800080', linestyle='-', label=f'Median: {np.median(values):.1f}%')
        ax.legend(loc='upper right', fontsize=8, frameon=True, facecolor='white', edgecolor='black')

    def _add_colorbar(self, fig, ax, center_color):
        norm = mcolors.Normalize(vmin=0, vmax=100)
        cbar = fig.colorbar(ScalarMappable(norm=norm, cmap=self._cmap(center_color)), ax=ax)
        cbar.set_label('Score (%)', fontsize=10)

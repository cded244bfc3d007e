"""SVG line plots rendered from emitted CSV tables.

Plots only ever read the CSV files, so every figure can be regenerated
offline from the tables alone.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from varprop.errors import OutputError  # noqa: E402
from varprop.results import read_csv  # noqa: E402

logger = logging.getLogger(__name__)

# Fixed element ids and no timestamp keep the SVG bytes reproducible.
matplotlib.rcParams.update(
    {
        "svg.hashsalt": "varprop",
        "svg.fonttype": "none",
        "figure.figsize": (6.4, 4.0),
        "axes.grid": True,
        "grid.alpha": 0.3,
        "legend.fontsize": 8,
        "axes.labelsize": 10,
    }
)


@dataclass(frozen=True)
class Series:
    """One polyline: ``y`` against ``x`` from a CSV, optionally with a +/- ``band`` column."""

    csv_path: Path
    x: str
    y: str
    label: str
    band: Optional[str] = None
    dashed: bool = False
    where: Optional[Tuple[str, Any]] = None


def line_plot(
    path: Path,
    series: Sequence[Series],
    xlabel: str,
    ylabel: str,
    title: str = "",
    log_y: bool = False,
    description: str = "",
) -> Path:
    fig, ax = plt.subplots()
    try:
        for s in series:
            frame = read_csv(s.csv_path)
            if s.where:
                frame = frame[frame[s.where[0]] == s.where[1]]
            x = frame[s.x].to_numpy()
            y = frame[s.y].to_numpy()
            (line,) = ax.plot(x, y, linestyle="--" if s.dashed else "-", linewidth=1.2, label=s.label)
            if s.band:
                spread = frame[s.band].to_numpy()
                ax.fill_between(x, y - spread, y + spread, color=line.get_color(), alpha=0.2, linewidth=0)
        if log_y:
            ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
    except OSError as e:
        raise OutputError(f"cannot write plot ({e.strerror})", str(path)) from e
    finally:
        plt.close(fig)
    logger.info(f"Wrote {path}")
    return path


def step_plot(
    path: Path,
    csv_path: Path,
    group: str,
    x: str,
    y: str,
    xlabel: str,
    ylabel: str,
    facet: Optional[str] = None,
    description: str = "",
) -> Path:
    """Histogram-style plot with one step line per ``group`` value and one panel per ``facet``."""
    frame = read_csv(csv_path)
    facets = sorted(frame[facet].unique()) if facet else [None]
    fig, axes = plt.subplots(1, len(facets), squeeze=False, figsize=(4.0 * len(facets), 3.6))
    try:
        for ax, value in zip(axes[0], facets):
            part = frame if value is None else frame[frame[facet] == value]
            for name in sorted(part[group].unique()):
                rows = part[part[group] == name]
                ax.step(rows[x].to_numpy(), rows[y].to_numpy(), where="mid", linewidth=1.0, label=str(name))
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            if value is not None:
                ax.set_title(f"{facet} {value}")
            ax.legend()
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None, "Description": description})
    except OSError as e:
        raise OutputError(f"cannot write plot ({e.strerror})", str(path)) from e
    finally:
        plt.close(fig)
    logger.info(f"Wrote {path}")
    return path

"""Chart rendering for training-run CSV outputs.

Reads the loss.csv and perf.csv files written by the simulator CLI and turns
them into the two static charts used to eyeball a run: the concatenated loss
curve, and the timeout/power timeline annotated with the correlation between
the two series.  The CSVs are consumed read-only; nothing here ever touches
run outputs.
"""

from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


class FigureError(Exception):
    pass


KINDS = ("loss-curve", "timeout-vs-power")

LOSS_COLUMNS = ("epoch", "sample", "sim_time", "loss")
PERF_COLUMNS = ("sim_time", "timeout", "total_power", "pouches", "reissues", "crashes")


@dataclass(frozen=True)
class FigureSpec:
    source: Path
    kind: str
    output: Path

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise FigureError(f"unknown figure kind {self.kind!r}; choose from {KINDS}")


def read_rows(path: Path, required: tuple[str, ...]) -> list[dict[str, float]]:
    """Parse a CSV into float-valued rows, insisting on the required columns."""
    try:
        fh = open(path, newline="")
    except OSError as err:
        raise FigureError(f"cannot read {path}: {err}") from err
    with fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or ()
        missing = [column for column in required if column not in header]
        if missing:
            raise FigureError(f"{path}: missing columns {', '.join(missing)}")
        try:
            rows = [{column: float(row[column]) for column in required}
                    for row in reader]
        except (TypeError, ValueError) as err:
            raise FigureError(f"{path}: non-numeric cell: {err}") from err
    if not rows:
        raise FigureError(f"{path}: no data rows")
    return rows


def pearson_label(xs: list[float], ys: list[float]) -> str:
    """Correlation annotation; constant series have no defined correlation."""
    try:
        r = statistics.correlation(xs, ys)
    except statistics.StatisticsError:
        return "r = n/a"
    return f"r = {r:+.3f}"


def render_loss(spec: FigureSpec) -> None:
    rows = read_rows(spec.source, LOSS_COLUMNS)
    losses = [row["loss"] for row in rows]
    epochs = [int(row["epoch"]) for row in rows]

    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(range(len(losses)), losses, linewidth=1.2)
    for n in range(1, len(epochs)):
        if epochs[n] != epochs[n - 1]:
            ax.axvline(n - 0.5, color="grey", linewidth=0.8, linestyle=":")
    ax.set_xlabel("sample (epochs concatenated)")
    ax.set_ylabel("MSE loss")
    ax.set_title(spec.source.name)
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(spec.output, dpi=120)
    plt.close(fig)


def render_timeout_power(spec: FigureSpec) -> str:
    rows = read_rows(spec.source, PERF_COLUMNS)
    times = [row["sim_time"] for row in rows]
    timeouts = [row["timeout"] for row in rows]
    powers = [row["total_power"] for row in rows]
    label = pearson_label(timeouts, powers)

    fig, ax_timeout = plt.subplots(figsize=(8, 4.5))
    ax_timeout.plot(times, timeouts, color="tab:blue", linewidth=1.2,
                    drawstyle="steps-post", label="timeout")
    ax_timeout.set_xlabel("sim time (s)")
    ax_timeout.set_ylabel("timeout (s)", color="tab:blue")
    ax_timeout.tick_params(axis="y", labelcolor="tab:blue")

    ax_power = ax_timeout.twinx()
    ax_power.plot(times, powers, color="tab:red", linewidth=1.2,
                  drawstyle="steps-post", label="total power")
    ax_power.set_ylabel("total power", color="tab:red")
    ax_power.tick_params(axis="y", labelcolor="tab:red")

    ax_timeout.set_title(f"{spec.source.name}   {label}")
    fig.tight_layout()
    fig.savefig(spec.output, dpi=120)
    plt.close(fig)
    return label


def render(spec: FigureSpec) -> Optional[str]:
    """Render one figure; returns the annotation label where the kind has one."""
    if spec.kind == "loss-curve":
        render_loss(spec)
        return None
    return render_timeout_power(spec)

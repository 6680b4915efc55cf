"""Static SVG charts from run traces.

Reads the traces a training run writes and renders per-episode line charts
(mean potential, demand fraction, mean power, spilled volume), per-window
line charts of the training signal, and, when several variants are given,
a cross-variant bar chart of evaluation power.

Traces are parsed strictly: a row with the wrong column count or an
unparseable number reports the file and 1-based line number instead of
propagating a bare ValueError.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


class TraceFormatError(ValueError):
    """A trace CSV does not match its declared header."""


EPISODE_COLUMNS = (
    "variant",
    "episode",
    "phase",
    "windows",
    "mean_potential",
    "last_potential",
    "mean_power_kw",
    "delivered_l",
    "requested_l",
    "demand_fraction",
    "spilled_l",
    "unmet_l",
)

WINDOW_COLUMNS = ("variant", "window", "potential", "power_kw")

_FLOAT_COLUMNS = {
    "mean_potential",
    "last_potential",
    "mean_power_kw",
    "delivered_l",
    "requested_l",
    "demand_fraction",
    "spilled_l",
    "unmet_l",
    "potential",
    "power_kw",
}
_INT_COLUMNS = {"episode", "windows", "window"}


def read_trace(path: str | Path, columns: tuple[str, ...]) -> list[dict]:
    """Parse one trace CSV into typed row dicts, strictly."""
    path = Path(path)
    rows: list[dict] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path}: empty trace") from None
        if tuple(header) != columns:
            raise TraceFormatError(f"{path}: header {header} != expected {list(columns)}")
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(columns):
                raise TraceFormatError(
                    f"{path} line {lineno}: {len(raw)} fields, expected {len(columns)}"
                )
            row: dict = {}
            for key, val in zip(columns, raw):
                if key in _FLOAT_COLUMNS:
                    try:
                        row[key] = float(val)
                    except ValueError:
                        raise TraceFormatError(
                            f"{path} line {lineno}: bad number {val!r} in column {key!r}"
                        ) from None
                elif key in _INT_COLUMNS:
                    try:
                        row[key] = int(val)
                    except ValueError:
                        raise TraceFormatError(
                            f"{path} line {lineno}: bad integer {val!r} in column {key!r}"
                        ) from None
                else:
                    row[key] = val
            rows.append(row)
    return rows


def read_episode_summaries(path: str | Path) -> list[dict]:
    """Parse an episode-summary JSONL file, strictly typed like read_trace."""
    path = Path(path)
    rows: list[dict] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"{path} line {lineno}: {exc}") from None
            missing = [key for key in EPISODE_COLUMNS if key not in row]
            if missing:
                raise TraceFormatError(f"{path} line {lineno}: missing fields {missing}")
            rows.append(row)
    return rows


def _by_variant(rows: list[dict]) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    for row in rows:
        out.setdefault(row["variant"], []).append(row)
    return out


def _line_chart(series: dict[str, tuple[list, list]], title: str, xlabel: str, ylabel: str, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for label, (xs, ys) in series.items():
        ax.plot(xs, ys, label=label, linewidth=1.2)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_window_potential(window_rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    series = {
        variant: ([r["window"] for r in rows], [r["potential"] for r in rows])
        for variant, rows in _by_variant(window_rows).items()
    }
    _line_chart(series, "Potential per training window", "window", "potential", path)
    return path


def plot_window_power(window_rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    series = {
        variant: ([r["window"] for r in rows], [r["power_kw"] for r in rows])
        for variant, rows in _by_variant(window_rows).items()
    }
    _line_chart(series, "Plant power per training window", "window", "power [kW]", path)
    return path


def plot_episode_potential(episode_rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    series = {}
    for variant, rows in _by_variant(episode_rows).items():
        series[variant] = ([r["episode"] for r in rows], [r["mean_potential"] for r in rows])
    _line_chart(series, "Mean potential per episode", "episode", "mean potential", path)
    return path


def plot_demand_fraction(episode_rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    series = {}
    for variant, rows in _by_variant(episode_rows).items():
        series[variant] = ([r["episode"] for r in rows], [r["demand_fraction"] for r in rows])
    _line_chart(series, "Demand fraction per episode", "episode", "delivered / requested", path)
    return path


def plot_episode_power(episode_rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    series = {}
    for variant, rows in _by_variant(episode_rows).items():
        series[variant] = ([r["episode"] for r in rows], [r["mean_power_kw"] for r in rows])
    _line_chart(series, "Mean power per episode", "episode", "power [kW]", path)
    return path


def plot_episode_overflow(episode_rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    series = {}
    for variant, rows in _by_variant(episode_rows).items():
        series[variant] = ([r["episode"] for r in rows], [r["spilled_l"] for r in rows])
    _line_chart(series, "Spilled volume per episode", "episode", "overflow [L]", path)
    return path


def plot_eval_power_bars(episode_rows: list[dict], path: str | Path) -> Path:
    """Cross-variant evaluation power, one bar per variant."""
    path = Path(path)
    means = {}
    for variant, rows in _by_variant(episode_rows).items():
        ev = [r["mean_power_kw"] for r in rows if r["phase"] == "eval"]
        if ev:
            means[variant] = sum(ev) / len(ev)
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    labels = list(means)
    ax.bar(labels, [means[v] for v in labels], color=["#4c72b0", "#dd8452", "#55a868"][: len(labels)])
    ax.set_title("Evaluation power by variant")
    ax.set_ylabel("mean power [kW]")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def render_all(episode_rows: list[dict], window_rows: list[dict], out_dir: str | Path) -> list[Path]:
    if not episode_rows:
        raise TraceFormatError("no episode rows to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [
        plot_episode_potential(episode_rows, out / "episode_potential.svg"),
        plot_demand_fraction(episode_rows, out / "demand_fraction.svg"),
        plot_episode_power(episode_rows, out / "episode_power.svg"),
        plot_episode_overflow(episode_rows, out / "episode_overflow.svg"),
    ]
    if window_rows:
        paths.append(plot_window_potential(window_rows, out / "window_potential.svg"))
        paths.append(plot_window_power(window_rows, out / "window_power.svg"))
    if len(_by_variant(episode_rows)) > 1:
        paths.append(plot_eval_power_bars(episode_rows, out / "eval_power.svg"))
    return paths

"""Telemetry and analysis: expert-activation records per training iteration,
assignment profiles over labeled evaluation categories, collapse metrics, and
deterministic CSV/SVG emission.

CSV schemas (headered, comma-separated, "\\n" line endings):

    activations.csv  iteration,layer,expert,count
    profiles.csv     category,layer,expert,mass
    collapse.csv     window_end,layer,entropy,ratio
    eval.csv         iteration,cross_entropy,perplexity

Counts are stored raw and normalized only at analysis time, so records can be
re-windowed losslessly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import EvalCategorySet
from .errors import DataError

HEATMAP_MAX_COLUMNS = 512


@dataclass
class ActivationRecord:
    """Per-layer expert selection counts for one optimizer iteration."""

    iteration: int
    layer: int
    counts: np.ndarray  # [N] int64

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)


@dataclass
class AssignmentProfile:
    """Per-category activation mass: mass[layer, expert] sums to 1 per layer."""

    category: str
    mass: np.ndarray  # [L, N] float64
    sample_count: int


@dataclass
class CollapseMetric:
    window_end: int
    layer: int
    entropy: float
    ratio: float  # max/min windowed frequency; inf when an expert starved


def activation_counts(decisions, n_experts: int) -> np.ndarray:
    """Selection counts per (layer, expert) from one forward's decisions."""
    counts = np.zeros((len(decisions), n_experts), dtype=np.int64)
    for i, decision in enumerate(decisions):
        counts[i] = decision.expert_counts(n_experts).numpy()
    return counts


def record_activations(decisions, iteration: int, n_experts: int) -> list[ActivationRecord]:
    counts = activation_counts(decisions, n_experts)
    return [ActivationRecord(iteration, layer, counts[layer])
            for layer in range(len(decisions))]


def distribution_entropy(frequencies: np.ndarray) -> float:
    """Shannon entropy in nats; zero-frequency terms contribute nothing."""
    p = np.asarray(frequencies, dtype=np.float64)
    total = p.sum()
    if total <= 0:
        raise DataError("entropy of an all-zero distribution is undefined")
    p = p / total
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def collapse_metrics(records: list[ActivationRecord], window: int) -> list[CollapseMetric]:
    """Sliding-window mean frequencies per layer -> entropy and max/min ratio."""
    by_layer: dict[int, list[ActivationRecord]] = {}
    for rec in records:
        by_layer.setdefault(rec.layer, []).append(rec)
    out: list[CollapseMetric] = []
    for layer in sorted(by_layer):
        rows = sorted(by_layer[layer], key=lambda r: r.iteration)
        if len(rows) < window:
            raise DataError(f"layer {layer}: {len(rows)} records < window {window}")
        stacked = np.stack([r.counts for r in rows]).astype(np.float64)
        for end in range(window - 1, len(rows)):
            mean = stacked[end - window + 1:end + 1].mean(axis=0)
            freqs = mean / mean.sum()
            low = freqs.min()
            ratio = float("inf") if low == 0 else float(freqs.max() / low)
            out.append(CollapseMetric(rows[end].iteration, layer,
                                      distribution_entropy(freqs), ratio))
    return out


# --------------------------------------------------------------------------
# Assignment profiles
# --------------------------------------------------------------------------

def assignment_profile(model, eval_set: EvalCategorySet,
                       max_batch: int = 64) -> list[AssignmentProfile]:
    """Aggregate routed selection mass per (layer, expert) for each category.

    Runs the model in evaluation mode over every sequence of every category;
    equal-length sequences are batched together. For language-strategy models
    the category label doubles as the per-sequence language label.
    """
    eval_set.validate()
    routing = model.experiment.routing
    if routing is None:
        raise DataError("assignment profiles require an MoE model")
    n_layers = model.experiment.model.n_layers
    n_experts = routing.n_experts
    language = routing.strategy == "language"

    was_training = model.training
    model.eval()
    profiles = []
    try:
        with torch.no_grad():
            for label, seqs in eval_set.categories:
                counts = np.zeros((n_layers, n_experts), dtype=np.int64)
                by_length: dict[int, list[np.ndarray]] = {}
                for seq in seqs:
                    by_length.setdefault(len(seq), []).append(seq)
                for length in sorted(by_length):
                    group = by_length[length]
                    for i in range(0, len(group), max_batch):
                        chunk = np.stack(group[i:i + max_batch])
                        tokens = torch.from_numpy(chunk.astype(np.int64))
                        labels = [label] * tokens.shape[0] if language else None
                        out = model(tokens, labels=labels)
                        counts += activation_counts(out.decisions, n_experts)
                mass = counts.astype(np.float64)
                mass /= mass.sum(axis=1, keepdims=True)
                profiles.append(AssignmentProfile(label, mass, len(seqs)))
    finally:
        if was_training:
            model.train()
    return profiles


# --------------------------------------------------------------------------
# CSV round trips
# --------------------------------------------------------------------------

def write_activations(path: str | Path, records: list[ActivationRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "layer", "expert", "count"])
        for rec in records:
            for expert, count in enumerate(rec.counts):
                writer.writerow([rec.iteration, rec.layer, expert, int(count)])


def read_activations(path: str | Path) -> list[ActivationRecord]:
    grouped: dict[tuple[int, int], dict[int, int]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = (int(row["iteration"]), int(row["layer"]))
            grouped.setdefault(key, {})[int(row["expert"])] = int(row["count"])
    records = []
    for (iteration, layer), per_expert in grouped.items():
        counts = np.zeros(max(per_expert) + 1, dtype=np.int64)
        for expert, count in per_expert.items():
            counts[expert] = count
        records.append(ActivationRecord(iteration, layer, counts))
    records.sort(key=lambda r: (r.iteration, r.layer))
    return records


def write_profiles(path: str | Path, profiles: list[AssignmentProfile]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["category", "layer", "expert", "mass"])
        for prof in profiles:
            for layer in range(prof.mass.shape[0]):
                for expert in range(prof.mass.shape[1]):
                    writer.writerow([prof.category, layer, expert,
                                     repr(float(prof.mass[layer, expert]))])


def read_profiles(path: str | Path) -> list[AssignmentProfile]:
    cells: dict[str, dict[tuple[int, int], float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cells.setdefault(row["category"], {})[
                (int(row["layer"]), int(row["expert"]))] = float(row["mass"])
    profiles = []
    for category, grid in cells.items():
        n_layers = max(k[0] for k in grid) + 1
        n_experts = max(k[1] for k in grid) + 1
        mass = np.zeros((n_layers, n_experts))
        for (layer, expert), value in grid.items():
            mass[layer, expert] = value
        profiles.append(AssignmentProfile(category, mass, 0))
    return profiles


def write_collapse(path: str | Path, metrics: list[CollapseMetric]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["window_end", "layer", "entropy", "ratio"])
        for m in metrics:
            writer.writerow([m.window_end, m.layer, repr(m.entropy), repr(m.ratio)])


def read_collapse(path: str | Path) -> list[CollapseMetric]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(CollapseMetric(int(row["window_end"]), int(row["layer"]),
                                      float(row["entropy"]), float(row["ratio"])))
    return out


class TelemetryWriter:
    """Single-writer append channel for a run's telemetry directory."""

    def __init__(self, run_dir: str | Path, overwrite: bool = False):
        self.dir = Path(run_dir) / "telemetry"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._activations = self._open(self.dir / "activations.csv",
                                       ["iteration", "layer", "expert", "count"],
                                       overwrite)
        self._eval = self._open(self.dir / "eval.csv",
                                ["iteration", "cross_entropy", "perplexity"],
                                overwrite)

    @staticmethod
    def _open(path: Path, header: list[str], overwrite: bool):
        fresh = overwrite or not path.exists()
        fh = open(path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(header)
            fh.flush()
        return fh, writer

    def append_activations(self, iteration: int, counts: np.ndarray) -> None:
        fh, writer = self._activations
        for layer in range(counts.shape[0]):
            for expert in range(counts.shape[1]):
                writer.writerow([iteration, layer, expert, int(counts[layer, expert])])
        fh.flush()

    def append_eval(self, iteration: int, cross_entropy: float, perplexity: float) -> None:
        fh, writer = self._eval
        writer.writerow([iteration, repr(cross_entropy), repr(perplexity)])
        fh.flush()

    def close(self) -> None:
        self._activations[0].close()
        self._eval[0].close()

    def __enter__(self) -> "TelemetryWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --------------------------------------------------------------------------
# SVG heatmaps
# --------------------------------------------------------------------------

_COLOR_STOPS = ((68, 1, 84), (33, 145, 140), (253, 231, 37))


def _color(t: float) -> str:
    t = min(max(t, 0.0), 1.0)
    if t <= 0.5:
        a, b, u = _COLOR_STOPS[0], _COLOR_STOPS[1], t * 2
    else:
        a, b, u = _COLOR_STOPS[1], _COLOR_STOPS[2], (t - 0.5) * 2
    rgb = [round(a[i] + (b[i] - a[i]) * u) for i in range(3)]
    return f"#{rgb[0]:02x}{rgb[1]:02x}{rgb[2]:02x}"


def _esc(text: str) -> str:
    return (text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
            .replace('"', "&quot;"))


def downsample_columns(matrix: np.ndarray,
                       max_columns: int = HEATMAP_MAX_COLUMNS) -> np.ndarray:
    """Window-average columns down to at most max_columns."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[1]
    if n <= max_columns:
        return matrix
    factor = -(-n // max_columns)  # ceil
    groups = -(-n // factor)
    out = np.zeros((matrix.shape[0], groups))
    for g in range(groups):
        out[:, g] = matrix[:, g * factor:(g + 1) * factor].mean(axis=1)
    return out


def render_heatmap(matrix: np.ndarray, row_labels: list[str] | None = None,
                   col_labels: list[str] | None = None, title: str = "",
                   legend_label: str = "") -> str:
    """Render a matrix as a self-contained SVG 1.1 heatmap.

    Rows and columns map to grid cells on a linear color scale with a legend;
    each cell carries its value as a tooltip. Output is a deterministic
    function of the inputs.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.size == 0:
        raise DataError("heatmap needs a non-empty 2-D matrix")
    if not np.isfinite(matrix).all():
        raise DataError("heatmap needs finite values")
    rows, cols = matrix.shape
    lo, hi = float(matrix.min()), float(matrix.max())
    span = hi - lo if hi > lo else 1.0

    cell = 18
    left = 88 if row_labels else 8
    top = 46 if title else 18
    legend_w = 64
    width = left + cols * cell + legend_w + 8
    height = top + rows * cell + (22 if col_labels else 8)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
             f'width="{width}" height="{height}" '
             f'font-family="monospace" font-size="10">']
    parts.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    if title:
        parts.append(f'<text x="{left}" y="18" font-size="13">{_esc(title)}</text>')

    for r in range(rows):
        y = top + r * cell
        if row_labels:
            parts.append(f'<text x="{left - 6}" y="{y + 13}" '
                         f'text-anchor="end">{_esc(str(row_labels[r]))}</text>')
        for c in range(cols):
            v = matrix[r, c]
            color = _color((v - lo) / span)
            parts.append(f'<rect x="{left + c * cell}" y="{y}" width="{cell}" '
                         f'height="{cell}" fill="{color}">'
                         f'<title>{v:.6g}</title></rect>')
    if col_labels:
        step = max(1, cols // 16)
        for c in range(0, cols, step):
            parts.append(f'<text x="{left + c * cell + 2}" '
                         f'y="{top + rows * cell + 14}">'
                         f'{_esc(str(col_labels[c]))}</text>')

    # legend: discrete vertical scale, max at the top
    lx = left + cols * cell + 12
    steps = 10
    bar_h = max(rows * cell, 60)
    for s in range(steps):
        t = 1.0 - s / (steps - 1)
        parts.append(f'<rect x="{lx}" y="{top + s * bar_h // steps}" width="12" '
                     f'height="{-(-bar_h // steps)}" fill="{_color(t)}"/>')
    parts.append(f'<text x="{lx + 16}" y="{top + 10}">{hi:.4g}</text>')
    parts.append(f'<text x="{lx + 16}" y="{top + bar_h}">{lo:.4g}</text>')
    if legend_label:
        parts.append(f'<text x="{lx}" y="{top - 6}">{_esc(legend_label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

"""Deterministic figure rendering for the laboratory's CSV artifacts.

Three figure kinds:

- heatmap: a rectangular numeric grid (one similarity matrix CSV, no header),
  drawn with a color scale fixed to [-1, 1] so figures are comparable across
  runs.
- bars: a header CSV whose first column is the category label and whose
  remaining columns are numeric series, drawn as grouped bars (ablation
  tables).
- lines: a header CSV whose first column is x and whose remaining columns
  are y series (token/iteration sweeps).

Rendering is pure: the same inputs produce a byte-identical PNG with the
fixed Agg backend settings used here.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["FigureSpec", "RaggedGridError", "render"]

HEATMAP_SCALE = (-1.0, 1.0)
DPI = 120


class RaggedGridError(ValueError):
    def __init__(self, row_index: int, message: str):
        super().__init__(message)
        self.row_index = row_index


@dataclass
class FigureSpec:
    inputs: list
    kind: str  # "heatmap" | "bars" | "lines"
    out_path: str
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    series_labels: list = field(default_factory=list)

    def validate(self):
        if self.kind not in ("heatmap", "bars", "lines"):
            raise ValueError(f"unknown figure kind {self.kind!r}")
        if not self.inputs:
            raise ValueError("figure spec needs at least one input file")
        for path in self.inputs:
            if not os.path.exists(path):
                raise FileNotFoundError(f"input file does not exist: {path}")


def _read_grid(path: str) -> np.ndarray:
    rows = []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(x) for x in line.split(",")])
            except ValueError as err:
                raise RaggedGridError(i, f"{path}: row {i} is not numeric: {err}") from err
    if not rows:
        raise ValueError(f"{path}: empty grid")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise RaggedGridError(i, f"{path}: row {i} has {len(row)} columns, expected {width}")
    return np.asarray(rows)


def _read_table(path: str):
    with open(path) as f:
        reader = csv.reader(f)
        rows = [r for r in reader if r]
    if len(rows) < 2:
        raise ValueError(f"{path}: table needs a header and at least one data row")
    header = rows[0]
    labels = [r[0] for r in rows[1:]]
    values = []
    for i, r in enumerate(rows[1:], start=1):
        if len(r) != len(header):
            raise RaggedGridError(i, f"{path}: row {i} has {len(r)} cells, expected {len(header)}")
        values.append([float(x) for x in r[1:]])
    return header[0], header[1:], labels, np.asarray(values)


def _new_figure():
    return plt.figure(figsize=(6.0, 4.5), dpi=DPI)


def render(spec: FigureSpec) -> str:
    """Render one figure to spec.out_path and return the path."""
    spec.validate()
    if spec.kind == "heatmap":
        grid = _read_grid(spec.inputs[0])
        fig = _new_figure()
        ax = fig.add_subplot(111)
        im = ax.imshow(
            grid,
            cmap="RdBu_r",
            vmin=HEATMAP_SCALE[0],
            vmax=HEATMAP_SCALE[1],
            aspect="auto",
            interpolation="nearest",
        )
        fig.colorbar(im, ax=ax)
    elif spec.kind == "bars":
        _, columns, labels, values = _read_table(spec.inputs[0])
        fig = _new_figure()
        ax = fig.add_subplot(111)
        x = np.arange(len(labels))
        n_series = values.shape[1]
        width = 0.8 / n_series
        names = spec.series_labels or columns
        for j in range(n_series):
            ax.bar(x + (j - (n_series - 1) / 2) * width, values[:, j], width, label=names[j])
        ax.set_xticks(x)
        ax.set_xticklabels(labels)
        ax.legend()
    else:  # lines
        _, columns, labels, values = _read_table(spec.inputs[0])
        fig = _new_figure()
        ax = fig.add_subplot(111)
        x = np.asarray([float(v) for v in labels])
        names = spec.series_labels or columns
        for j in range(values.shape[1]):
            ax.plot(x, values[:, j], marker="o", label=names[j])
        ax.legend()

    ax.set_title(spec.title)
    ax.set_xlabel(spec.xlabel)
    ax.set_ylabel(spec.ylabel)
    out_dir = os.path.dirname(spec.out_path)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    fig.savefig(spec.out_path, format="png", metadata={"Software": "kvlatent-plots"})
    plt.close(fig)
    return spec.out_path

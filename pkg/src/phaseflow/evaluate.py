"""Frame accuracy, macro F1, multi-run aggregation and ribbon plots."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .data import DEFAULT_LABEL_NAMES, N_CLASSES


class MetricError(ValueError):
    pass


def _labels(x) -> np.ndarray:
    return np.asarray(getattr(x, "labels", x), dtype=np.int64)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise MetricError(f"length mismatch: prediction {p.shape[0]} vs ground truth {g.shape[0]}")
    return p, g


def _drop_class(p: np.ndarray, g: np.ndarray, exclude: int | None):
    if exclude is None:
        return p, g
    keep = g != exclude
    return p[keep], g[keep]


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: ground truth, cols: prediction

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def per_class_f1(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(float)
        pred_n = self.counts.sum(axis=0)
        gt_n = self.counts.sum(axis=1)
        # 2PR/(P+R) simplifies to 2tp/(pred_n+gt_n), and is 0 when tp is 0
        denom = pred_n + gt_n
        return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)


def confusion_matrix(pred, gt, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    p, g = _pair(pred, gt)
    if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= n_classes):
        raise MetricError(f"labels outside 0..{n_classes - 1}")
    counts = np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return ConfusionMatrix(counts)


def frame_accuracy(pred, gt, exclude_class: int | None = None) -> float:
    """Percentage of seconds whose predicted label matches the ground truth."""
    p, g = _drop_class(*_pair(pred, gt), exclude_class)
    if g.size == 0:
        raise MetricError("no frames to evaluate")
    return 100.0 * float(np.count_nonzero(p == g)) / g.size


def macro_f1(
    pred,
    gt,
    n_classes: int = N_CLASSES,
    exclude_class: int | None = None,
    include_unsupported: bool = False,
) -> float:
    """Mean per-class F1 in percent over classes present in the ground truth.

    ``include_unsupported`` counts every class (F1 of 0 when it has no
    support). ``exclude_class`` drops frames of that ground-truth class and
    the class itself from the average.
    """
    p, g = _drop_class(*_pair(pred, gt), exclude_class)
    cm = confusion_matrix(p, g, n_classes)
    f1 = cm.per_class_f1()
    mask = np.ones(n_classes, dtype=bool) if include_unsupported else cm.support > 0
    if exclude_class is not None:
        mask[exclude_class] = False
    if not mask.any():
        raise MetricError("no class with ground-truth support")
    return 100.0 * float(f1[mask].mean())


@dataclass
class RunAggregate:
    mean: float
    std: float
    runs: int

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise MetricError("need at least one run")
    return RunAggregate(float(v.mean()), float(v.std(ddof=0)), int(v.size))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def write_metrics_csv(path, rows: Sequence[tuple[str, float, float]], seed: int | None = None) -> None:
    lines = []
    if seed is not None:
        lines.append(f"# seed={seed}")
    lines.append("operation_id,accuracy,f1")
    lines += [f"{op},{acc:.4f},{f1:.4f}" for op, acc, f1 in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_metrics_csv(path) -> list[tuple[str, float, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#") or line.startswith("operation_id"):
            continue
        op, acc, f1 = line.split(",")
        rows.append((op, float(acc), float(f1)))
    return rows


def summary_dict(per_run: dict[str, Sequence[float]]) -> dict:
    out = {}
    for metric, values in per_run.items():
        agg = aggregate_runs(values)
        out[metric] = {"mean": round(agg.mean, 6), "std": round(agg.std, 6), "runs": agg.runs}
    return out


def write_summary_json(path, summary: dict, seed: int | None = None) -> None:
    doc = dict(summary)
    if seed is not None:
        doc["seed"] = seed
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Ribbon plot
# ---------------------------------------------------------------------------

PHASE_COLORS = (
    "#bdbdbd",  # transition
    "#1f77b4",
    "#ff7f0e",
    "#2ca02c",
    "#d62728",
    "#9467bd",
    "#8c564b",
    "#e377c2",
    "#17becf",
)

_WIDTH = 900
_LEFT = 140
_ROW_H = 18
_PAIR_GAP = 34
_TOP = 20


def _runs(labels: np.ndarray):
    """(start, length, label) for each maximal constant run."""
    if labels.size == 0:
        return
    edges = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [labels.size]])
    for s, e in zip(starts, ends):
        yield int(s), int(e - s), int(labels[s])


def ribbon_svg(pairs: Sequence[tuple], label_names: Sequence[str] = DEFAULT_LABEL_NAMES) -> str:
    """SVG with a prediction row over a ground-truth row per operation, plus a legend.

    ``pairs`` holds ``(pred, gt, title)`` tuples.
    """
    if len(label_names) > len(PHASE_COLORS):
        raise MetricError(f"at most {len(PHASE_COLORS)} classes can be drawn")
    plot_w = _WIDTH - _LEFT - 20
    parts = []
    y = _TOP
    for pred, gt, title in pairs:
        p, g = _pair(pred, gt)
        T = max(g.size, 1)
        sx = plot_w / T
        parts.append(f'<text x="4" y="{y + _ROW_H:.1f}" font-size="12">{escape(str(title))}</text>')
        for row, (name, seq) in enumerate((("pred", p), ("gt", g))):
            ry = y + row * _ROW_H
            parts.append(f'<g class="ribbon" data-row="{name}">')
            for s, n, c in _runs(seq):
                parts.append(
                    f'<rect x="{_LEFT + s * sx:.2f}" y="{ry}" width="{n * sx:.2f}" height="{_ROW_H - 2}" '
                    f'fill="{PHASE_COLORS[c]}"/>'
                )
            parts.append("</g>")
            parts.append(f'<text x="{_LEFT - 6}" y="{ry + _ROW_H - 5}" font-size="10" text-anchor="end">{name}</text>')
        # minute ticks
        axis_y = y + 2 * _ROW_H + 2
        step = max(1, int(np.ceil(T / 60 / 10)))
        for m in range(0, int(T // 60) + 1, step):
            x = _LEFT + m * 60 * sx
            parts.append(f'<line x1="{x:.2f}" y1="{axis_y}" x2="{x:.2f}" y2="{axis_y + 4}" stroke="#000"/>')
            parts.append(f'<text x="{x:.2f}" y="{axis_y + 14}" font-size="9" text-anchor="middle">{m}</text>')
        parts.append(f'<text x="{_LEFT + plot_w}" y="{axis_y + 26}" font-size="9" text-anchor="end">minutes</text>')
        y += 2 * _ROW_H + _PAIR_GAP
    legend_y = y + 10
    for i, name in enumerate(label_names):
        lx = 10 + (i % 3) * 290
        ly = legend_y + (i // 3) * 18
        parts.append(f'<rect x="{lx}" y="{ly}" width="12" height="12" fill="{PHASE_COLORS[i]}"/>')
        parts.append(f'<text x="{lx + 16}" y="{ly + 10}" font-size="11">{i}: {escape(name)}</text>')
    height = legend_y + 18 * ((len(label_names) + 2) // 3) + 10
    body = "\n".join(parts)
    return (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{_WIDTH}" height="{height}" '
        f'viewBox="0 0 {_WIDTH} {height}">\n{body}\n</svg>\n'
    )

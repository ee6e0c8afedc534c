"""Interval IoU, recall-at metrics with a rare/common breakdown, and the
2-D principal-component projection of memory slots."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DegenerateVectorWarning

DEFAULT_GRID = ((1, 0.5), (1, 0.7), (5, 0.5), (5, 0.7))


def interval_iou(a, b) -> float:
    """Overlap-over-union of two [start, end] intervals, lengths end - start.

    Disjoint intervals score 0; two identical intervals score 1 (including
    degenerate points, by convention).
    """
    a_s, a_e = float(a[0]), float(a[1])
    b_s, b_e = float(b[0]), float(b[1])
    if a_s > a_e or b_s > b_e:
        raise ValueError(f"interval_iou: inverted interval in {a}, {b}")
    inter = min(a_e, b_e) - max(a_s, b_s)
    if inter <= 0:
        return 1.0 if (a_s, a_e) == (b_s, b_e) else 0.0
    union = max(a_e, b_e) - min(a_s, b_s)
    return inter / union


def recall_at(prediction_sets, gts, n: int, m: float) -> float:
    """Percentage of samples whose best of the top-n predictions clears IoU m.

    The threshold is strict: a best IoU exactly equal to m is a miss.
    """
    if len(prediction_sets) != len(gts):
        raise ValueError("recall_at: prediction and ground-truth counts differ")
    if not prediction_sets:
        raise ValueError("recall_at: no samples")
    hits = 0
    for preds, gt in zip(prediction_sets, gts):
        if not preds:
            warnings.warn("recall_at: sample with no predictions counted as miss")
            continue
        best = max(interval_iou((p[0], p[1]), gt) for p in preds[:n])
        if best > m:
            hits += 1
    return 100.0 * hits / len(prediction_sets)


@dataclass
class MetricsReport:
    """Recall grid split by rarity, plus sample counts and loss curves."""
    recalls: dict        # (n, m) -> {"overall": float, "rare": float|None, "common": float|None}
    n_total: int
    n_rare: int
    n_common: int
    loss_curve: list = field(default_factory=list)  # rows of (epoch, train, val, val_r1)


def breakdown(prediction_sets, gts, rare_flags, grid=DEFAULT_GRID) -> MetricsReport:
    if not len(prediction_sets) == len(gts) == len(rare_flags):
        raise ValueError("breakdown: inputs must cover all samples")
    rare_idx = [i for i, r in enumerate(rare_flags) if r]
    common_idx = [i for i, r in enumerate(rare_flags) if not r]
    recalls = {}
    for n, m in grid:
        entry = {"overall": recall_at(prediction_sets, gts, n, m)}
        for name, idx in (("rare", rare_idx), ("common", common_idx)):
            if idx:
                entry[name] = recall_at([prediction_sets[i] for i in idx],
                                        [gts[i] for i in idx], n, m)
            else:
                entry[name] = None
        recalls[(n, m)] = entry
    return MetricsReport(recalls, len(gts), len(rare_idx), len(common_idx))


def memory_projection(slots: np.ndarray) -> np.ndarray:
    """Mean-centered slots projected onto the top-2 principal directions.

    Directions are eigenvectors of the slot covariance with the largest
    eigenvalues; each direction's first nonzero component is made
    positive so the output is reproducible. An all-identical slot matrix
    has no principal directions and projects to zeros (with a warning).
    """
    x = np.asarray(slots, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"memory_projection: need at least 2 slots, got {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    if np.allclose(centered, 0.0, atol=1e-15):
        warnings.warn("memory_projection: identical slots, projection is zero",
                      DegenerateVectorWarning)
        return np.zeros((x.shape[0], 2))
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    dirs = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    if dirs.shape[1] < 2:  # single-feature slots still get a second, zero axis
        dirs = np.concatenate([dirs, np.zeros((dirs.shape[0], 1))], axis=1)
    for j in range(2):
        nz = np.nonzero(np.abs(dirs[:, j]) > 1e-12)[0]
        if nz.size and dirs[nz[0], j] < 0:
            dirs[:, j] = -dirs[:, j]
    return centered @ dirs


# -- report output -----------------------------------------------------------

def format_report(report: MetricsReport) -> str:
    lines = ["[samples]",
             f"total = {report.n_total}",
             f"rare = {report.n_rare}",
             f"common = {report.n_common}",
             "",
             "[recall]"]
    for (n, m), entry in sorted(report.recalls.items()):
        parts = [f"n={n}", f"iou={m}"]
        for split in ("overall", "rare", "common"):
            value = entry[split]
            parts.append(f"{split}={'NA' if value is None else f'{value:.4f}'}")
        lines.append(" ".join(parts))
    if report.loss_curve:
        lines += ["", "[loss_curve]", "epoch train_loss val_loss val_recall_1_05"]
        for row in report.loss_curve:
            lines.append(" ".join(f"{v:.6f}" if isinstance(v, float) else str(v)
                                  for v in row))
    return "\n".join(lines) + "\n"


def write_report_text(path, report: MetricsReport) -> None:
    with open(path, "w") as fh:
        fh.write(format_report(report))


def write_report_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "iou", "split", "recall"])
        for (n, m), entry in sorted(report.recalls.items()):
            for split in ("overall", "rare", "common"):
                value = entry[split]
                writer.writerow([n, m, split, "NA" if value is None else f"{value:.4f}"])


def write_projection_csv(path, projection: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in projection:
            writer.writerow([f"{row[0]:.12g}", f"{row[1]:.12g}"])


def report_from_dump(records, grid=DEFAULT_GRID) -> MetricsReport:
    """Score a loaded prediction dump (see grounding.read_prediction_dump)."""
    preds = [r["predictions"] for r in records]
    gts = [r["gt"] for r in records]
    flags = [r["rare"] for r in records]
    return breakdown(preds, gts, flags, grid)

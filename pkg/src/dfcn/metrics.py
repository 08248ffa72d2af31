"""Confusion matrix, per-class precision / recall / F1, OA, average F1, colored exports."""
from __future__ import annotations

from pathlib import Path

import numpy as np

# one (r, g, b) per class, in ingest.CLASS_NAMES order
DEFAULT_PALETTE = np.array(
    [
        [255, 255, 125],
        [0, 255, 255],
        [255, 255, 255],
        [255, 255, 0],
        [0, 255, 125],
        [0, 0, 255],
        [0, 125, 255],
        [125, 255, 0],
        [0, 255, 0],
    ],
    dtype=np.int64,
)
CORRECT_RGB = (0, 255, 0)
WRONG_RGB = (255, 0, 0)


def confusion(pred, gt, n_classes: int) -> np.ndarray:
    """C x C counts, rows = ground truth, columns = prediction.

    Points whose ground truth (or prediction) is outside [0, C) are skipped.
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    keep = (gt >= 0) & (gt < n_classes) & (pred >= 0) & (pred < n_classes)
    flat = gt[keep] * n_classes + pred[keep]
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros_like(num)
    np.divide(num, den, out=out, where=den != 0)
    return out


def f1_from_pr(precision, recall):
    """Harmonic mean of precision and recall; 0 when both are 0."""
    p = np.asarray(precision, dtype=np.float64)
    r = np.asarray(recall, dtype=np.float64)
    return _safe_div(2.0 * p * r, p + r)


def precision_recall_f1(cm):
    """Per-class (precision, recall, f1) arrays; every 0/0 is defined as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    precision = _safe_div(tp, cm.sum(axis=0))
    recall = _safe_div(tp, cm.sum(axis=1))
    return precision, recall, f1_from_pr(precision, recall)


def overall_accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    if cm.size == 0 or total == 0:
        raise ValueError("empty confusion matrix")
    return float(np.trace(cm) / total)


def average_f1(f1) -> float:
    f1 = np.asarray(f1, dtype=np.float64)
    if f1.size == 0:
        raise ValueError("no F1 values")
    return float(f1.mean())


def format_report(cm, class_names=None, digits: int = 3) -> str:
    """Human-readable confusion matrix plus per-class P/R/F1, OA and average F1."""
    cm = np.asarray(cm)
    c = cm.shape[0]
    names = list(class_names) if class_names is not None else [str(i) for i in range(c)]
    p, r, f = precision_recall_f1(cm)
    w = max(12, max(len(n) for n in names) + 1)
    lines = ["confusion matrix (rows = ground truth, columns = prediction)"]
    lines.append("".ljust(w) + "".join(n[:w - 1].rjust(w) for n in names))
    for i in range(c):
        lines.append(names[i].ljust(w) + "".join(str(v).rjust(w) for v in cm[i]))
    lines.append("")
    fmt = f"{{:.{digits}f}}"
    for label, vals in (("precision", p), ("recall", r), ("f1", f)):
        lines.append(label.ljust(w) + "".join(fmt.format(v).rjust(w) for v in vals))
    lines.append("")
    lines.append(f"OA {fmt.format(overall_accuracy(cm))}")
    lines.append(f"average F1 {fmt.format(average_f1(f))}")
    return "\n".join(lines)


def format_machine(cm, class_names=None) -> str:
    """Tab-separated rows: ``metric class value`` plus OA and average F1."""
    p, r, f = precision_recall_f1(cm)
    names = list(class_names) if class_names is not None else [str(i) for i in range(len(p))]
    rows = ["metric\tclass\tvalue"]
    for label, vals in (("precision", p), ("recall", r), ("f1", f)):
        rows.extend(f"{label}\t{n}\t{v:.6f}" for n, v in zip(names, vals))
    rows.append(f"oa\tall\t{overall_accuracy(cm):.6f}")
    rows.append(f"average_f1\tall\t{average_f1(f):.6f}")
    return "\n".join(rows)


def _write_ply(path, xyz, rgb, labels):
    path = Path(path)
    n = len(xyz)
    header = "\n".join([
        "ply",
        "format ascii 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int label",
        "end_header",
    ])
    table = np.column_stack([xyz, rgb, labels])
    with open(path, "w") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, table, fmt=["%.3f", "%.3f", "%.3f", "%d", "%d", "%d", "%d"])
    return path


def export_labeled_cloud(path, xyz, pred, palette=DEFAULT_PALETTE, n_classes: int | None = None):
    """ASCII PLY with per-point class color and predicted label."""
    pred = np.asarray(pred, dtype=np.int64)
    palette = np.asarray(palette, dtype=np.int64)
    n_classes = int(pred.max()) + 1 if n_classes is None and pred.size else (n_classes or 0)
    if len(palette) < n_classes:
        raise ValueError(f"palette has {len(palette)} colors for {n_classes} classes")
    if len(pred) != len(xyz):
        raise ValueError("labels are not aligned with the cloud")
    rgb = np.zeros((len(pred), 3), dtype=np.int64)
    ok = (pred >= 0) & (pred < len(palette))
    rgb[ok] = palette[pred[ok]]
    return _write_ply(path, xyz, rgb, pred)


def error_colors(pred, gt) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt lengths differ")
    return np.where((pred == gt)[:, None], np.array(CORRECT_RGB), np.array(WRONG_RGB))


def export_error_map(path, xyz, pred, gt):
    """ASCII PLY: green where the prediction is right, red where it is wrong."""
    if len(pred) != len(xyz):
        raise ValueError("labels are not aligned with the cloud")
    return _write_ply(path, xyz, error_colors(pred, gt), np.asarray(pred, dtype=np.int64))


def read_ply_colors(path) -> np.ndarray:
    """RGB columns from a PLY written by this module."""
    with open(path) as fh:
        for line in fh:
            if line.strip() == "end_header":
                break
        table = np.loadtxt(fh, ndmin=2)
    return table[:, 3:6].astype(np.int64)

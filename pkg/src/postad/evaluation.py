"""Point-adjusted detection metrics, time-wise and channel-wise."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .scoring import calibrate_threshold


def _check_pair(pred, gt):
    pred = np.asarray(pred).astype(np.int8)
    gt = np.asarray(gt).astype(np.int8)
    if pred.shape != gt.shape:
        raise DataError(f"shape mismatch: predictions {pred.shape} vs labels {gt.shape}")
    return pred, gt


def segments(gt) -> list[tuple[int, int]]:
    """Maximal runs of ones in a binary vector as ``(start, stop)`` pairs."""
    g = np.concatenate([[0], np.asarray(gt).astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(g))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


def point_adjust(pred, gt) -> np.ndarray:
    """Mark a whole ground-truth segment positive once any step inside it is predicted."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 1:
        raise DataError("point_adjust expects 1-D vectors; use channelwise_adjust for matrices")
    out = pred.copy()
    for start, stop in segments(gt):
        if out[start:stop].any():
            out[start:stop] = 1
    return out


def channelwise_adjust(pred, gt) -> np.ndarray:
    """Apply point adjustment to every channel column independently."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 2:
        raise DataError("channelwise_adjust expects (T, D0) matrices")
    return np.stack([point_adjust(pred[:, c], gt[:, c]) for c in range(pred.shape[1])], axis=1)


def adjust(pred, gt) -> np.ndarray:
    pred = np.asarray(pred)
    return point_adjust(pred, gt) if pred.ndim == 1 else channelwise_adjust(pred, gt)


def prf(pred, gt) -> dict[str, float]:
    """Precision, recall and F1 accumulated over every cell.

    A zero denominator yields 0 for that metric; F1 is 0 when P + R = 0.
    """
    pred, gt = _check_pair(pred, gt)
    tp = int(np.sum((pred == 1) & (gt == 1)))
    fp = int(np.sum((pred == 1) & (gt == 0)))
    fn = int(np.sum((pred == 0) & (gt == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "fp": fp, "fn": fn}


def detect(scores, threshold: float) -> np.ndarray:
    return (np.asarray(scores) > threshold).astype(np.int8)


def evaluate(scores, gt, threshold: float, adjusted: bool = True) -> dict[str, float]:
    pred = detect(scores, threshold)
    if adjusted:
        pred = adjust(pred, gt)
    return prf(pred, gt)


def broadcast_channels(timewise_scores, n_channels: int) -> np.ndarray:
    """Copy a time-wise score to every channel (baseline for detectors without 2-D output)."""
    s = np.asarray(timewise_scores)
    return np.repeat(s[:, None], n_channels, axis=1)


def pr_curve(scores, gt, ratios: Sequence[float], adjusted: bool = True,
             reference_scores=None) -> tuple[list[dict], float]:
    """Precision/recall over a grid of anomaly ratios (percent) and step-wise average precision.

    Thresholds are calibrated on ``reference_scores`` when given, otherwise on
    ``scores`` themselves.
    """
    ratios = [float(r) for r in ratios]
    if not ratios:
        raise DataError("ratio grid is empty")
    if any(b <= a for a, b in zip(ratios, ratios[1:])):
        raise DataError("ratio grid must be strictly increasing")
    ref = scores if reference_scores is None else reference_scores
    curve = []
    for r in ratios:
        thr = calibrate_threshold(ref, r)
        m = evaluate(scores, gt, thr, adjusted)
        curve.append({"ratio": r, "threshold": thr, "precision": m["precision"], "recall": m["recall"]})
    return curve, average_precision(curve)


def average_precision(curve) -> float:
    """Sum of recall increments times precision over the recall-sorted curve."""
    pts = sorted(((c["recall"], c["precision"]) for c in curve), key=lambda rp: (rp[0], -rp[1]))
    ap, prev = 0.0, 0.0
    for recall, precision in pts:
        ap += (recall - prev) * precision
        prev = recall
    return ap


def default_ratio_grid(n: int = 40) -> list[float]:
    """Log-spaced percentages from 1e-5 % to 30 %."""
    return np.geomspace(1e-5, 30.0, n).tolist()


def write_metrics(path, record: dict) -> None:
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def write_curve(path, curve, ap: Optional[float] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if ap is not None:
            fh.write(f"# average_precision={ap:.17g}\n")
        w.writerow(["ratio", "threshold", "precision", "recall"])
        for c in curve:
            w.writerow([repr(c["ratio"]), repr(c["threshold"]), repr(c["precision"]), repr(c["recall"])])

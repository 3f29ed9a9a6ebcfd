"""Anomaly criteria built from reconstruction residuals and association discrepancies."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .assoc import EPS_FLOOR
from .errors import DataError, DimensionMismatchError
from .saga import assdis_s
from .tasa import assdis_t

TIMEWISE = "timewise"
SPATIOTEMPORAL = "spatiotemporal"
SCORE_MAGIC = b"POSTSCR1"


@dataclass
class WindowParts:
    """Per-window ingredients of the anomaly scores."""

    residual: np.ndarray            # (B, N, D0) squared residuals
    assdis_t: np.ndarray            # (B, N)
    assdis_s: Optional[np.ndarray]  # (B, D0), None without the spatial module


@torch.no_grad()
def window_parts(model, windows, batch_size: int = 64) -> WindowParts:
    model.eval()
    dtype = next(model.parameters()).dtype
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim == 2:
        windows = windows[None]
    if windows.shape[1:] != (model.window, model.n_channels):
        raise DimensionMismatchError(
            f"windows shaped {windows.shape[1:]}, model expects ({model.window}, {model.n_channels})")
    res, dt, ds = [], [], []
    for start in range(0, len(windows), batch_size):
        chunk = torch.as_tensor(windows[start:start + batch_size], dtype=dtype)
        out = model(chunk)
        res.append(((out.reconstruction - chunk) ** 2).double().numpy())
        dt.append(assdis_t(out.priors, out.series).double().numpy())
        if out.spatial:
            ds.append(assdis_s(out.graph_priors, out.observations).double().numpy())
    return WindowParts(np.concatenate(res), np.concatenate(dt), np.concatenate(ds) if ds else None)


def _softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def timewise_from_parts(assdis_t_values, residual) -> np.ndarray:
    """``softmax_N(-AssDis_t) * ||residual_i||^2``; ``residual`` holds squared errors (..., N, D0)."""
    weight = _softmax(-np.asarray(assdis_t_values, dtype=np.float64), axis=-1)
    return weight * np.asarray(residual).sum(axis=-1)


def spatiotemporal_from_parts(assdis_t_values, spatial_z, residual, activation: str = "sigmoid") -> np.ndarray:
    """Outer product of the temporal softmax and the spatial factor, times squared residuals.

    ``spatial_z`` is the centred spatial discrepancy (..., D0). ``activation="softmax"``
    normalizes across channels instead of scoring each channel independently.
    """
    temporal = _softmax(-np.asarray(assdis_t_values, dtype=np.float64), axis=-1)
    z = -np.asarray(spatial_z, dtype=np.float64)
    if activation == "sigmoid":
        spatial = _logistic(z)
    elif activation == "softmax":
        spatial = _softmax(z, axis=-1)
    else:
        raise ValueError(f"unknown activation {activation!r}")
    return temporal[..., :, None] * spatial[..., None, :] * np.asarray(residual)


def score_timewise(model, windows) -> np.ndarray:
    """Time-wise scores, ``(B, N)`` (or ``(N,)`` for one window)."""
    single = np.asarray(windows).ndim == 2
    parts = window_parts(model, windows)
    scores = timewise_from_parts(parts.assdis_t, parts.residual)
    return scores[0] if single else scores


@dataclass
class SpatialStats:
    mean: np.ndarray
    std: np.ndarray

    def zscore(self, values) -> np.ndarray:
        values = np.asarray(values)
        if values.shape[-1] != len(self.mean):
            raise DimensionMismatchError(f"{values.shape[-1]} channels vs stats over {len(self.mean)}")
        return (values - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def spatial_stats_from_values(values) -> SpatialStats:
    """Per-channel mean and population std, std clamped at the probability floor."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or len(values) == 0:
        raise DataError("need a non-empty (windows, D0) array of spatial discrepancies")
    return SpatialStats(values.mean(axis=0), np.maximum(values.std(axis=0), EPS_FLOOR))


def fit_spatial_stats(model, windows) -> SpatialStats:
    parts = window_parts(model, windows)
    if parts.assdis_s is None:
        raise DataError("model has no spatial module; spatial statistics are undefined")
    return spatial_stats_from_values(parts.assdis_s)


def score_spatiotemporal(model, windows, stats: SpatialStats, activation: str = "sigmoid") -> np.ndarray:
    """Joint scores ``(B, N, D0)`` (or ``(N, D0)`` for one window)."""
    single = np.asarray(windows).ndim == 2
    parts = window_parts(model, windows)
    if parts.assdis_s is None:
        raise DataError("model has no spatial module; use the time-wise protocol")
    scores = spatiotemporal_from_parts(parts.assdis_t, stats.zscore(parts.assdis_s), parts.residual,
                                       activation)
    return scores[0] if single else scores


def calibrate_threshold(scores, ratio: float) -> float:
    """Threshold flagging ``ratio`` percent of ``scores``.

    The ``(100 - ratio)``-th percentile with linear interpolation; detections
    are the scores strictly above it, so all-equal scores flag nothing.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise DataError("cannot calibrate a threshold on empty scores")
    if not 0 < ratio < 100:
        raise DataError(f"ratio must lie in (0, 100), got {ratio}")
    return float(np.percentile(scores, 100.0 - ratio, method="linear"))


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    threshold: float
    protocol: str
    window: int

    def save(self, path) -> None:
        """CSV with a ``#`` header line, or a binary file for a ``.bin`` suffix.

        Binary layout: magic ``POSTSCR1``, uint32 header length, UTF-8 JSON header,
        uint64 rows, uint64 cols, float64 row-major payload (little-endian).
        """
        path = Path(path)
        mat = self.scores if self.scores.ndim == 2 else self.scores[:, None]
        header = {"N": self.window, "D0": int(mat.shape[1]) if self.protocol == SPATIOTEMPORAL else 1,
                  "protocol": self.protocol, "threshold": self.threshold}
        if path.suffix == ".bin":
            blob = json.dumps(header, sort_keys=True).encode()
            with open(path, "wb") as fh:
                fh.write(SCORE_MAGIC + struct.pack("<I", len(blob)) + blob)
                fh.write(struct.pack("<QQ", *mat.shape))
                fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())
        else:
            with open(path, "w") as fh:
                fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
                np.savetxt(fh, mat, delimiter=",", fmt="%.17g")

    @classmethod
    def load(cls, path) -> "ScoreMatrix":
        path = Path(path)
        if path.suffix == ".bin":
            data = path.read_bytes()
            if data[:8] != SCORE_MAGIC:
                raise DataError(f"{path}: not a score file")
            (hlen,) = struct.unpack("<I", data[8:12])
            header = json.loads(data[12:12 + hlen])
            rows, cols = struct.unpack("<QQ", data[12 + hlen:28 + hlen])
            if len(data) != 28 + hlen + 8 * rows * cols:
                raise DataError(f"{path}: truncated score payload")
            mat = np.frombuffer(data, dtype="<f8", offset=28 + hlen).reshape(rows, cols).copy()
        else:
            with open(path) as fh:
                first = fh.readline()
                if not first.startswith("# "):
                    raise DataError(f"{path}: missing score header")
                header = json.loads(first[2:])
                mat = np.loadtxt(fh, delimiter=",", ndmin=2)
        scores = mat if header["protocol"] == SPATIOTEMPORAL else mat[:, 0]
        return cls(scores, header["threshold"], header["protocol"], header["N"])

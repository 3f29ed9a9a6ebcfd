"""Dataset manifests, series/label I/O, normalization and non-overlapping windowing.

File formats
------------
CSV: comma separated numeric table, optional single header row (detected when
the first row does not parse as numbers). One row per time step.

Binary matrix (``.bin``): little-endian; 8-byte magic ``b"POSTMAT1"``, two
uint64 values ``rows`` and ``cols``, then ``rows*cols`` float64 values in
row-major order. Nothing may follow the payload.

Manifest (``.json``): an object with keys ``name``, ``n_channels``, ``window``,
``val_fraction``, ``train``, ``test``, ``test_labels``, ``test_channel_labels``
(paths relative to the manifest, or null) and optionally ``ratio`` (threshold
percentage) and ``normalization`` (``{"mean": [...], "std": [...]}``).
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .assoc import EPS_FLOOR
from .errors import (DataError, LeakageError, LengthMismatchError, MissingLabelsError,
                     NonNumericCellError, RaggedRowsError)

logger = logging.getLogger(__name__)

BIN_MAGIC = b"POSTMAT1"
MANIFEST_KEYS = {"name", "n_channels", "window", "val_fraction", "train", "test", "test_labels",
                 "test_channel_labels", "ratio", "normalization"}


# --- matrix I/O -----------------------------------------------------------------------------

def read_csv_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty table")

    def parse(row):
        return [float(c) for c in row]

    try:
        parse(rows[0])
    except ValueError:
        rows = rows[1:]  # header
    if not rows:
        raise DataError(f"{path}: header without data")
    width = len(rows[0])
    out = np.empty((len(rows), width), dtype=np.float64)
    for i, row in enumerate(rows):
        if len(row) != width:
            raise RaggedRowsError(f"{path}: row {i} has {len(row)} cells, expected {width}")
        try:
            out[i] = parse(row)
        except ValueError as exc:
            raise NonNumericCellError(f"{path}: row {i}: {exc}") from None
    return out


def write_csv_matrix(path, matrix, header: Optional[list[str]] = None, fmt: str = "%.17g") -> None:
    matrix = np.asarray(matrix)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        np.savetxt(fh, matrix, delimiter=",", fmt=fmt)


def read_bin_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:8] != BIN_MAGIC:
        raise DataError(f"{path}: not a binary matrix file")
    rows, cols = struct.unpack("<QQ", data[8:24])
    if len(data) != 24 + 8 * rows * cols:
        raise DataError(f"{path}: payload length does not match header {rows}x{cols}")
    return np.frombuffer(data, dtype="<f8", offset=24).reshape(rows, cols).astype(np.float64)


def write_bin_matrix(path, matrix) -> None:
    matrix = np.asarray(matrix, dtype="<f8")
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC + struct.pack("<QQ", *matrix.shape))
        fh.write(np.ascontiguousarray(matrix).tobytes())


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    return read_bin_matrix(path) if path.suffix == ".bin" else read_csv_matrix(path)


def write_matrix(path, matrix, header=None) -> None:
    path = Path(path)
    if path.suffix == ".bin":
        write_bin_matrix(path, matrix)
    else:
        write_csv_matrix(path, matrix, header)


# --- manifest -------------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    name: str
    n_channels: int
    train: Optional[str] = None
    test: Optional[str] = None
    test_labels: Optional[str] = None
    test_channel_labels: Optional[str] = None
    window: int = 100
    val_fraction: float = 0.2
    ratio: Optional[float] = None
    normalization: Optional[dict] = None
    root: Path = field(default_factory=Path)

    def resolve(self, rel: Optional[str]) -> Optional[Path]:
        return None if rel is None else self.root / rel

    @property
    def default_ratio(self) -> float:
        """Threshold percentage: 0.5 for SMD-family data, 1.0 otherwise."""
        if self.ratio is not None:
            return self.ratio
        return 0.5 if self.name.lower().startswith("smd") else 1.0

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in sorted(MANIFEST_KEYS)}
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing manifest: {path}")
        try:
            raw = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid manifest ({exc})") from None
        unknown = set(raw) - MANIFEST_KEYS
        if unknown:
            raise DataError(f"{path}: unknown manifest keys {sorted(unknown)}")
        if "name" not in raw or "n_channels" not in raw:
            raise DataError(f"{path}: manifest needs 'name' and 'n_channels'")
        return cls(root=path.parent, **raw)


@dataclass
class LoadedData:
    train: Optional[np.ndarray]
    test: Optional[np.ndarray]
    labels: Optional[np.ndarray]
    channel_labels: Optional[np.ndarray]


def _binary(arr, path) -> np.ndarray:
    if not np.isin(arr, (0.0, 1.0)).all():
        raise DataError(f"{path}: labels must be 0/1")
    return arr.astype(np.int8)


def load_series(manifest: DatasetManifest, require_labels: bool = False) -> LoadedData:
    """Read every file named in ``manifest`` and check shapes against each other."""
    d0 = manifest.n_channels
    train = test = labels = channel_labels = None
    if manifest.train:
        train = read_matrix(manifest.resolve(manifest.train))
        if train.shape[1] != d0:
            raise LengthMismatchError(f"train has {train.shape[1]} channels, manifest says {d0}")
    if manifest.test:
        test = read_matrix(manifest.resolve(manifest.test))
        if test.shape[1] != d0:
            raise LengthMismatchError(f"test has {test.shape[1]} channels, manifest says {d0}")
        if manifest.test_labels:
            p = manifest.resolve(manifest.test_labels)
            if not p.exists():
                raise MissingLabelsError(f"missing label file {p}")
            raw = read_matrix(p)
            if raw.shape[1] != 1:
                raise LengthMismatchError(f"{p}: time-wise labels must have one column")
            labels = _binary(raw[:, 0], p)
            if len(labels) != len(test):
                raise LengthMismatchError(f"{p}: {len(labels)} labels for {len(test)} test rows")
        elif require_labels:
            raise MissingLabelsError("test manifest has no time-wise label file")
        if manifest.test_channel_labels:
            p = manifest.resolve(manifest.test_channel_labels)
            if not p.exists():
                raise MissingLabelsError(f"missing channel label file {p}")
            channel_labels = _binary(read_matrix(p), p)
            if channel_labels.shape != test.shape:
                raise LengthMismatchError(f"{p}: channel labels {channel_labels.shape} vs test {test.shape}")
    return LoadedData(train, test, labels, channel_labels)


# --- normalization --------------------------------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    source: str = "train"

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


def fit_norm_stats(train_series, source: str = "train") -> NormStats:
    x = np.asarray(train_series, dtype=np.float64)
    std = x.std(axis=0)
    return NormStats(mean=x.mean(axis=0), std=np.where(std < EPS_FLOOR, 1.0, std), source=source)


def normalize(series, stats: NormStats) -> np.ndarray:
    """Per-channel z-score with training statistics; constant channels are only centred."""
    if stats.source != "train":
        raise LeakageError(f"normalization statistics come from the {stats.source!r} split")
    x = np.asarray(series, dtype=np.float64)
    if x.shape[-1] != len(stats.mean):
        raise LengthMismatchError(f"series has {x.shape[-1]} channels, stats have {len(stats.mean)}")
    return (x - stats.mean) / stats.std


# --- windowing ------------------------------------------------------------------------------

@dataclass
class WindowSet:
    windows: np.ndarray   # (n_windows, N, D0) or (n_windows, N) for label vectors
    starts: np.ndarray    # absolute start index of each window
    length: int           # length of the source series

    @property
    def covered(self) -> int:
        return len(self.starts) * self.windows.shape[1]

    def unwindow(self) -> np.ndarray:
        return self.windows.reshape((-1,) + self.windows.shape[2:])


def make_windows(series, n: int) -> WindowSet:
    """Cut ``series`` into ``floor(T/n)`` non-overlapping windows; the tail is dropped."""
    x = np.asarray(series)
    t = len(x)
    if n < 1 or t < n:
        raise DataError(f"series of length {t} is shorter than window {n}")
    count = t // n
    if t % n:
        logger.info("dropping %d tail points (T=%d, N=%d)", t % n, t, n)
    windows = x[: count * n].reshape((count, n) + x.shape[1:])
    return WindowSet(windows=windows, starts=np.arange(count) * n, length=t)


def train_val_split(series, val_fraction: float = 0.2):
    """Temporal split: the last ``val_fraction`` of the series is validation."""
    x = np.asarray(series)
    cut = int(round(len(x) * (1.0 - val_fraction)))
    return x[:cut], x[cut:]

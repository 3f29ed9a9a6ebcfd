"""Synthetic benchmark with exact channel-wise labels.

Normal segments are cut from a source test series, and additive anomalies are
injected into the tail end of each segment on a sparse subset of channels:
single-step point offsets or constant level shifts held for a duration.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datastore import DatasetManifest, load_series, write_matrix
from .errors import DataError, NoNormalSegmentError, UnreachableTargetError, UsageError

POINT = "point"
PATTERN = "pattern"


class InjectionError(DataError):
    pass


@dataclass
class Segment:
    start: int
    stop: int  # exclusive

    def __len__(self):
        return self.stop - self.start


def extract_normal_segments(series, labels, min_len: int) -> list[Segment]:
    """Maximal runs of zero labels with at least ``min_len`` steps, in order."""
    labels = np.asarray(labels).astype(bool)
    if len(labels) != len(np.asarray(series)):
        raise DataError("labels are not aligned with the series")
    segments, start = [], None
    for i, flag in enumerate(np.append(labels, True)):
        if not flag and start is None:
            start = i
        elif flag and start is not None:
            if i - start >= min_len:
                segments.append(Segment(start, i))
            start = None
    if not segments:
        raise NoNormalSegmentError(f"no normal run of length >= {min_len}")
    return segments


@dataclass
class InjectionSpec:
    kind: str
    n_channels: int
    amplitude: float        # multiple of the channel's training std; sign gives direction
    duration: int = 1
    tail_fraction: float = 0.3

    def __post_init__(self):
        if self.kind not in (POINT, PATTERN):
            raise UsageError(f"unknown anomaly kind {self.kind!r}")
        if self.amplitude == 0:
            raise UsageError("amplitude must be non-zero")
        if self.duration < 1 or (self.kind == POINT and self.duration != 1):
            raise UsageError("point anomalies last one step; durations must be >= 1")
        if self.n_channels < 1:
            raise UsageError("an event needs at least one channel")


def inject(segment, spec: InjectionSpec, rng: np.random.Generator, std=None,
           occupied=None, channels: Optional[Sequence[int]] = None, start: Optional[int] = None):
    """Add one anomaly to the tail of ``segment``.

    Returns ``(perturbed copy, cell mask, event dict)``. ``occupied`` marks rows
    already used by earlier events; a one-step gap is kept around them.
    """
    x = np.asarray(segment, dtype=np.float64)
    n, d0 = x.shape
    std = np.ones(d0) if std is None else np.asarray(std, dtype=np.float64)
    if spec.n_channels > d0:
        raise InjectionError(f"{spec.n_channels} channels requested, segment has {d0}")
    tail_start = n - max(1, int(round(spec.tail_fraction * n)))
    if spec.duration > n - tail_start:
        raise InjectionError(f"duration {spec.duration} exceeds tail window of {n - tail_start} steps")
    if start is None:
        busy = np.zeros(n, dtype=bool) if occupied is None else np.asarray(occupied, dtype=bool)
        padded = busy.copy()
        padded[1:] |= busy[:-1]
        padded[:-1] |= busy[1:]
        candidates = [s for s in range(tail_start, n - spec.duration + 1)
                      if not padded[s:s + spec.duration].any()]
        if not candidates:
            raise InjectionError("no free slot in the segment tail")
        start = int(rng.choice(candidates))
    if channels is None:
        channels = np.sort(rng.choice(d0, size=spec.n_channels, replace=False))
    channels = [int(c) for c in channels]
    out = x.copy()
    mask = np.zeros((n, d0), dtype=np.int8)
    stop = start + spec.duration
    for c in channels:
        out[start:stop, c] = x[start:stop, c] + spec.amplitude * std[c]
        mask[start:stop, c] = 1
    # an offset can vanish in floating point only for huge values; keep mask honest
    mask &= (out != x).astype(np.int8)
    event = {"start": int(start), "stop": int(stop), "channels": channels, "kind": spec.kind,
             "amplitude": float(spec.amplitude)}
    return out, mask, event


@dataclass
class BenchConfig:
    """Benchmark recipe. ``source`` is ``"synthetic"`` or a manifest path."""

    name: str = "toy"
    source: str = "synthetic"
    n_channels: int = 5
    train_length: int = 5000
    test_length: int = 2000
    noise: float = 0.05
    time_ratio: float = 0.05
    channel_ratio: Optional[float] = None
    max_channels: int = 2
    point_fraction: float = 0.3
    amplitudes: tuple = (1.5, 3.0, 5.0)
    duration_range: tuple = (10, 50)
    tail_fraction: float = 0.3
    min_segment_len: int = 100
    max_segment_len: Optional[int] = 250
    tolerance: float = 0.1
    window: int = 50
    seed: Optional[int] = None

    def __post_init__(self):
        self.amplitudes = tuple(float(a) for a in self.amplitudes)
        self.duration_range = tuple(int(d) for d in self.duration_range)
        if any(a == 0 for a in self.amplitudes):
            raise UsageError("amplitudes must be non-zero")
        if not 0 <= self.time_ratio < 1:
            raise UsageError("time_ratio must lie in [0, 1)")
        if self.max_channels < 1:
            raise UsageError("max_channels must be >= 1")


@dataclass
class AnnotatedBenchmark:
    train: np.ndarray
    test: np.ndarray
    labels: np.ndarray
    channel_labels: np.ndarray
    events: list = field(default_factory=list)
    source_test: Optional[np.ndarray] = None
    config: Optional[BenchConfig] = None

    @property
    def time_ratio(self) -> float:
        return float(self.labels.mean()) if len(self.labels) else 0.0

    @property
    def channel_ratio(self) -> float:
        return float(self.channel_labels.mean()) if self.channel_labels.size else 0.0


def sinusoid_mixture(length: int, n_channels: int, rng: np.random.Generator, noise: float = 0.05,
                     n_latent: int = 3) -> np.ndarray:
    """Correlated multichannel series: shared latent sinusoids plus one private tone per channel."""
    t = np.arange(length, dtype=np.float64)
    periods = rng.uniform(20, 120, size=n_latent)
    phases = rng.uniform(0, 2 * np.pi, size=n_latent)
    latent = np.sin(2 * np.pi * t[:, None] / periods + phases)
    mixing = rng.normal(size=(n_latent, n_channels))
    own_period = rng.uniform(15, 80, size=n_channels)
    own_phase = rng.uniform(0, 2 * np.pi, size=n_channels)
    own = 0.5 * np.sin(2 * np.pi * t[:, None] / own_period + own_phase)
    return latent @ mixing + own + noise * rng.normal(size=(length, n_channels))


def _split_segments(segments: list[Segment], max_len: Optional[int], min_len: int) -> list[Segment]:
    if not max_len:
        return segments
    out = []
    for seg in segments:
        for s in range(seg.start, seg.stop, max_len):
            piece = Segment(s, min(s + max_len, seg.stop))
            if len(piece) >= min_len:
                out.append(piece)
    return out


def generate(config: BenchConfig) -> AnnotatedBenchmark:
    """Build the benchmark and inject events until the ratio targets are met."""
    if config.seed is None:
        raise UsageError("benchmark generation requires a seed")
    rng = np.random.default_rng(config.seed)
    if config.source == "synthetic":
        full = sinusoid_mixture(config.train_length + config.test_length, config.n_channels, rng,
                                config.noise)
        train, canvas = full[: config.train_length], full[config.train_length:]
        segments = [Segment(0, len(canvas))]
    else:
        manifest = DatasetManifest.load(config.source)
        data = load_series(manifest, require_labels=True)
        train = data.train
        if train is None:
            raise DataError("source manifest needs a training series")
        normal = extract_normal_segments(data.test, data.labels, config.min_segment_len)
        canvas = np.concatenate([data.test[s.start:s.stop] for s in normal])
        segments, offset = [], 0
        for s in normal:
            segments.append(Segment(offset, offset + len(s)))
            offset += len(s)
    segments = _split_segments(segments, config.max_segment_len, config.min_segment_len)
    if not segments:
        raise NoNormalSegmentError("no segment left after splitting")

    d0 = canvas.shape[1]
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    test = canvas.copy()
    channel_labels = np.zeros(canvas.shape, dtype=np.int8)
    events: list[dict] = []
    total = len(canvas)
    target_rows = int(round(config.time_ratio * total))
    cells_per_row = None
    if config.channel_ratio and config.time_ratio > 0:
        cells_per_row = config.channel_ratio * d0 / config.time_ratio
    max_ch = min(config.max_channels, d0)
    lo, hi = config.duration_range

    rows = cells = 0
    failures = 0
    while rows < target_rows:
        remaining = target_rows - rows
        if remaining == 1 or rng.random() < config.point_fraction:
            kind, duration = POINT, 1
        else:
            kind = PATTERN
            duration = int(rng.integers(lo, hi + 1))
            duration = max(2, min(duration, remaining))
        if cells_per_row is None:
            n_ch = int(rng.integers(1, max_ch + 1))
        else:
            n_ch = min(range(1, max_ch + 1),
                       key=lambda k: abs((cells + k * duration) / (rows + duration) - cells_per_row))
        amplitude = float(rng.choice(config.amplitudes)) * (1.0 if rng.random() < 0.5 else -1.0)
        spec = InjectionSpec(kind, n_ch, amplitude, duration, config.tail_fraction)
        seg = segments[int(rng.integers(len(segments)))]
        try:
            part, mask, event = inject(test[seg.start:seg.stop], spec, rng, std,
                                       occupied=channel_labels[seg.start:seg.stop].any(axis=1))
        except DataError:
            failures += 1
            if failures > 200:
                raise UnreachableTargetError(
                    "not enough normal tail room for the requested anomaly ratio",
                    {"time_ratio": rows / total, "channel_ratio": cells / (total * d0)}) from None
            continue
        test[seg.start:seg.stop] = part
        channel_labels[seg.start:seg.stop] |= mask
        event["start"] += seg.start
        event["stop"] += seg.start
        events.append(event)
        rows += duration
        cells += int(mask.sum())

    bench = AnnotatedBenchmark(train=train, test=test, labels=channel_labels.any(axis=1).astype(np.int8),
                               channel_labels=channel_labels, events=events, source_test=canvas,
                               config=config)
    _check_targets(bench, config)
    return bench


def _check_targets(bench: AnnotatedBenchmark, config: BenchConfig) -> None:
    achieved = {"time_ratio": bench.time_ratio, "channel_ratio": bench.channel_ratio}
    targets = {"time_ratio": config.time_ratio, "channel_ratio": config.channel_ratio}
    for key, target in targets.items():
        if target is None:
            continue
        got = achieved[key]
        if target == 0:
            ok = got == 0
        else:
            ok = abs(got - target) <= config.tolerance * target
        if not ok:
            raise UnreachableTargetError(f"{key} {got:.5f} misses target {target:.5f}", achieved)


def event_lines(events) -> list[str]:
    return [f"t=[{e['start']},{e['stop']}) channels={','.join(map(str, e['channels']))} "
            f"kind={e['kind']} amplitude={e['amplitude']:+g}std" for e in events]


def write_benchmark(bench: AnnotatedBenchmark, out_dir, fmt: str = "csv") -> DatasetManifest:
    """Write series, labels, manifest and event log; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".bin" if fmt == "bin" else ".csv"
    d0 = bench.test.shape[1]
    header = [f"c{i}" for i in range(d0)]
    write_matrix(out / f"train{ext}", bench.train, header)
    write_matrix(out / f"test{ext}", bench.test, header)
    write_matrix(out / f"test_label{ext}", bench.labels, ["label"])
    write_matrix(out / f"test_channel_label{ext}", bench.channel_labels, header)
    cfg = bench.config or BenchConfig(seed=0)
    manifest = DatasetManifest(name=cfg.name, n_channels=d0, train=f"train{ext}", test=f"test{ext}",
                               test_labels=f"test_label{ext}",
                               test_channel_labels=f"test_channel_label{ext}",
                               window=cfg.window, val_fraction=0.2, root=out)
    manifest.save(out / "manifest.json")
    (out / "events.log").write_text("\n".join(event_lines(bench.events)) + ("\n" if bench.events else ""))
    stats = {"time_ratio": bench.time_ratio, "channel_ratio": bench.channel_ratio,
             "events": len(bench.events), "test_length": len(bench.test), "n_channels": d0,
             "config": {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in dataclasses.asdict(cfg).items()}}
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return manifest

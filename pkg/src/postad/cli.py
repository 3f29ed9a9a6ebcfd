"""Command-line entry point: ``postad generate|train|score|eval|export``.

Every command reads an optional INI file (``--config``) whose sections are

``[run]``       ``out`` (run directory), ``seed``
``[data]``      ``manifest`` (dataset manifest path), ``ratio`` (threshold percent or ``auto``)
``[generate]``  benchmark recipe fields plus ``format`` (``csv`` or ``bin``)
``[train]``     training hyperparameters
``[eval]``      ``checkpoint``, ``protocol`` (``auto``, ``timewise``, ``spatiotemporal``),
                ``grid_points``, ``dumps`` (comma list of ``graphs``, ``overlays``, ``as_ts``)

Command-line flags override file values. Unknown sections or keys are a usage
error. The resolved configuration is written to ``<out>/effective.cfg`` and
every produced file is listed in ``<out>/artifacts.json``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from . import __version__
from .benchgen import BenchConfig, generate, write_benchmark
from .config import ABLATIONS, TrainConfig
from .datastore import DatasetManifest, load_series, write_csv_matrix
from .errors import DataError, PostError, ProtocolError, UsageError
from .estimator import POSTDetector, cover_windows
from .evaluation import broadcast_channels, default_ratio_grid, evaluate, pr_curve, write_curve, write_metrics
from .scoring import SPATIOTEMPORAL, TIMEWISE, ScoreMatrix

logger = logging.getLogger("postad")

DATA_DEFAULTS = {"manifest": None, "ratio": "auto"}
EVAL_DEFAULTS = {"checkpoint": None, "protocol": "auto", "grid_points": 40, "dumps": ""}
DUMPS = ("graphs", "overlays", "as_ts")
SECTIONS = {
    "generate": ("run", "generate"),
    "train": ("run", "data", "train"),
    "score": ("run", "data", "eval"),
    "eval": ("run", "data", "eval"),
    "export": ("run", "eval"),
}


# --- config handling ------------------------------------------------------------------------

def _coerce(text: str, type_name: str, key: str) -> Any:
    text = text.strip()
    try:
        if "None" in type_name or "Optional" in type_name:
            if text.lower() in ("none", ""):
                return None
        if "bool" in type_name:
            states = configparser.ConfigParser.BOOLEAN_STATES
            if text.lower() not in states:
                raise ValueError(text)
            return states[text.lower()]
        if "tuple" in type_name:
            return tuple(float(v) for v in text.split(","))
        if "int" in type_name:
            return int(text)
        if "float" in type_name:
            return float(text)
    except ValueError:
        raise UsageError(f"bad value for {key}: {text!r}") from None
    return text


def _fields(cls) -> dict[str, str]:
    return {f.name: str(f.type) for f in dataclasses.fields(cls)}


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_config(path: Optional[str], command: str) -> dict[str, dict[str, str]]:
    """Raw string values per section; rejects sections the command does not use."""
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if not Path(path).exists():
        raise UsageError(f"config file not found: {path}")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from None
    allowed = SECTIONS[command]
    extra = [s for s in parser.sections() if s not in allowed]
    if extra:
        raise UsageError(f"{path}: section(s) {extra} not used by '{command}' (allowed: {list(allowed)})")
    return {s: dict(parser[s]) for s in parser.sections()}


def _section(raw: dict, name: str, schema: dict[str, str], defaults: dict[str, Any]) -> dict[str, Any]:
    values = raw.get(name, {})
    unknown = sorted(set(values) - set(schema))
    if unknown:
        raise UsageError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    out = dict(defaults)
    for k, v in values.items():
        out[k] = _coerce(v, schema[k], f"{name}.{k}")
    return out


def write_effective(path: Path, sections: dict[str, dict[str, Any]]) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name, values in sections.items():
        parser[name] = {k: _format(v) for k, v in values.items()}
    with open(path, "w") as fh:
        parser.write(fh)


class Run:
    """Output directory bookkeeping: tracks produced files for the artifact manifest."""

    def __init__(self, out: str, command: str):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.files: list[str] = []

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def finish(self, **info) -> None:
        record = {"command": self.command, "version": __version__, "files": sorted(set(self.files)), **info}
        (self.dir / "artifacts.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _run_section(raw, args, need_seed: bool) -> dict[str, Any]:
    run = _section(raw, "run", {"out": "str", "seed": "Optional[int]"}, {"out": None, "seed": None})
    if args.out is not None:
        run["out"] = args.out
    if getattr(args, "seed", None) is not None:
        run["seed"] = args.seed
    if not run["out"]:
        raise UsageError("an output directory is required (--out or [run] out)")
    if need_seed and run["seed"] is None:
        raise UsageError("a seed is required (--seed or [run] seed)")
    return run


def _data_section(raw, args) -> dict[str, Any]:
    data = _section(raw, "data", {"manifest": "Optional[str]", "ratio": "str"}, DATA_DEFAULTS)
    if getattr(args, "manifest", None) is not None:
        data["manifest"] = args.manifest
    if getattr(args, "ratio", None) is not None:
        data["ratio"] = str(args.ratio)
    if not data["manifest"]:
        raise UsageError("a dataset manifest is required (--manifest or [data] manifest)")
    return data


def _ratio(data: dict, manifest: DatasetManifest) -> float:
    if str(data["ratio"]).lower() == "auto":
        return manifest.default_ratio
    try:
        return float(data["ratio"])
    except ValueError:
        raise UsageError(f"bad ratio {data['ratio']!r}") from None


def _eval_section(raw, args) -> dict[str, Any]:
    schema = {"checkpoint": "Optional[str]", "protocol": "str", "grid_points": "int", "dumps": "str"}
    ev = _section(raw, "eval", schema, EVAL_DEFAULTS)
    for key in ("checkpoint", "protocol", "grid_points", "dumps"):
        value = getattr(args, key, None)
        if value is not None:
            ev[key] = value
    if not ev["checkpoint"]:
        raise UsageError("a checkpoint is required (--checkpoint or [eval] checkpoint)")
    if ev["protocol"] not in ("auto", TIMEWISE, SPATIOTEMPORAL):
        raise UsageError(f"unknown protocol {ev['protocol']!r}")
    dumps = [d.strip() for d in str(ev["dumps"]).split(",") if d.strip()]
    bad = [d for d in dumps if d not in DUMPS]
    if bad:
        raise UsageError(f"unknown dump(s) {bad}; choose from {list(DUMPS)}")
    ev["dumps"] = ",".join(dumps)
    return ev


# --- commands -------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    raw = read_config(args.config, "generate")
    run = _run_section(raw, args, need_seed=True)
    schema = {**_fields(BenchConfig), "format": "str"}
    defaults = {**{k: v for k, v in dataclasses.asdict(BenchConfig(seed=0)).items()}, "format": "csv"}
    gen = _section(raw, "generate", schema, defaults)
    if args.format is not None:
        gen["format"] = args.format
    if gen["format"] not in ("csv", "bin"):
        raise UsageError(f"unknown format {gen['format']!r}")
    gen["seed"] = run["seed"]
    fmt = gen.pop("format")
    bench = generate(BenchConfig(**gen))
    out = Run(run["out"], "generate")
    write_benchmark(bench, out.dir, fmt)
    ext = ".bin" if fmt == "bin" else ".csv"
    for name in ("train", "test", "test_label", "test_channel_label"):
        out.files.append(name + ext)
    out.files += ["manifest.json", "events.log", "stats.json"]
    write_effective(out.path("effective.cfg"), {"run": run, "generate": {**gen, "format": fmt}})
    out.finish(events=len(bench.events), time_ratio=bench.time_ratio, channel_ratio=bench.channel_ratio)
    print(f"generated {len(bench.events)} events, time ratio {bench.time_ratio:.4f}, "
          f"channel ratio {bench.channel_ratio:.4f} -> {out.dir}")
    return 0


def cmd_train(args) -> int:
    raw = read_config(args.config, "train")
    run = _run_section(raw, args, need_seed=True)
    data = _data_section(raw, args)
    manifest = DatasetManifest.load(data["manifest"])
    schema = _fields(TrainConfig)
    if "lambda" in raw.get("train", {}):
        raw["train"]["lam"] = raw["train"].pop("lambda")
    defaults = dataclasses.asdict(TrainConfig())
    defaults.update(window=manifest.window, val_fraction=manifest.val_fraction)
    values = _section(raw, "train", schema, defaults)
    values["seed"] = run["seed"]
    if args.epochs is not None:
        values["epochs"] = args.epochs
    config = TrainConfig.from_dict(values)
    for name in args.ablation or []:
        config = config.with_ablation(name)
    ratio = _ratio(data, manifest)

    loaded = load_series(manifest)
    if loaded.train is None:
        raise DataError(f"{data['manifest']}: manifest names no training series")
    out = Run(run["out"], "train")
    log_path = out.path("train_log.jsonl")
    with open(log_path, "w") as log:
        def record(entry):
            log.write(json.dumps(entry, sort_keys=True) + "\n")
            log.flush()
        det = POSTDetector.from_config(config, ratio=ratio)
        det.fit(loaded.train, callback=record)
    det.save(out.path("checkpoint.ckpt"))
    write_effective(out.path("effective.cfg"),
                    {"run": run, "data": data, "train": config.to_dict()})
    out.finish(epochs_run=det.state_.epoch, threshold=det.threshold_)
    print(f"trained {det.state_.epoch} epoch(s); checkpoint -> {out.dir / 'checkpoint.ckpt'}")
    return 0


def _load_detector(ev: dict, manifest: Optional[DatasetManifest]) -> POSTDetector:
    return POSTDetector.load(ev["checkpoint"], manifest.n_channels if manifest is not None else None)


def cmd_score(args) -> int:
    raw = read_config(args.config, "score")
    run = _run_section(raw, args, need_seed=False)
    data = _data_section(raw, args)
    ev = _eval_section(raw, args)
    manifest = DatasetManifest.load(data["manifest"])
    det = _load_detector(ev, manifest).set_ratio(_ratio(data, manifest))
    loaded = load_series(manifest)
    if loaded.test is None:
        raise DataError(f"{data['manifest']}: manifest names no test series")
    protocol = TIMEWISE if ev["protocol"] == "auto" else ev["protocol"]
    if protocol == SPATIOTEMPORAL and det.spatial_stats_ is None:
        raise ProtocolError("the checkpoint has no spatial module; joint scores are unavailable")
    scores = det.scores(loaded.test, protocol)
    threshold = det.threshold_ if protocol == TIMEWISE else det.channel_threshold_
    out = Run(run["out"], "score")
    name = f"scores_{protocol}" + (".bin" if args.format == "bin" else ".csv")
    ScoreMatrix(scores, threshold, protocol, det.state_.config.window).save(out.path(name))
    write_effective(out.path("effective.cfg"), {"run": run, "data": data, "eval": ev})
    out.finish(protocol=protocol, threshold=threshold)
    return 0


def _layer_windows(det: POSTDetector, test: np.ndarray, index: int):
    windows, _ = cover_windows(det._prepare(test), det.state_.config.window)
    index = min(max(index, 0), len(windows) - 1)
    model = det.state_.model
    model.eval()
    with torch.no_grad():
        out = model(torch.as_tensor(windows[index:index + 1], dtype=next(model.parameters()).dtype))
    return index, out


def cmd_eval(args) -> int:
    raw = read_config(args.config, "eval")
    run = _run_section(raw, args, need_seed=False)
    data = _data_section(raw, args)
    ev = _eval_section(raw, args)
    manifest = DatasetManifest.load(data["manifest"])
    ratio = _ratio(data, manifest)
    det = _load_detector(ev, manifest).set_ratio(ratio)
    loaded = load_series(manifest, require_labels=True)
    protocol, has_spatial = ev["protocol"], det.spatial_stats_ is not None
    if protocol == SPATIOTEMPORAL:
        if loaded.channel_labels is None:
            raise ProtocolError("channel-wise evaluation requested but the dataset has no channel labels")
        if not has_spatial:
            raise ProtocolError("channel-wise evaluation requested but the checkpoint has no spatial module")
    channelwise = loaded.channel_labels is not None and protocol != TIMEWISE
    out = Run(run["out"], "eval")
    grid = default_ratio_grid(int(ev["grid_points"]))

    timewise = det.score_samples(loaded.test)
    metrics: dict[str, Any] = {"ratio": ratio, "dataset": manifest.name}
    tw = evaluate(timewise, loaded.labels, det.threshold_)
    curve, ap = pr_curve(timewise, loaded.labels, grid, reference_scores=det.val_scores_)
    write_curve(out.path("pr_timewise.csv"), curve, ap)
    metrics["timewise"] = {**tw, "threshold": det.threshold_, "average_precision": ap}
    if channelwise:
        d0 = loaded.test.shape[1]
        broadcast = broadcast_channels(timewise, d0)
        metrics["broadcast"] = {**evaluate(broadcast, loaded.channel_labels, det.threshold_),
                                "threshold": det.threshold_}
        if has_spatial:
            joint = det.score_channels(loaded.test)
            metrics["spatiotemporal"] = {**evaluate(joint, loaded.channel_labels, det.channel_threshold_),
                                         "threshold": det.channel_threshold_}
            curve, ap = pr_curve(joint, loaded.channel_labels, grid, reference_scores=det.val_channel_scores_)
            write_curve(out.path("pr_spatiotemporal.csv"), curve, ap)
            metrics["spatiotemporal"]["average_precision"] = ap
    write_metrics(out.path("metrics.json"), metrics)

    dumps = [d for d in ev["dumps"].split(",") if d]
    model = det.state_.model
    if "graphs" in dumps:
        for layer, g in enumerate(model.graph_tildes()):
            write_csv_matrix(out.path(f"graph_layer{layer}.csv"), g.detach().double().numpy())
    if "overlays" in dumps:
        anomalous = np.flatnonzero(loaded.labels)
        index = int(anomalous[0]) // det.state_.config.window if len(anomalous) else 0
        index, fwd = _layer_windows(det, loaded.test, index)
        for layer, t in enumerate(fwd.temporal):
            write_csv_matrix(out.path(f"series_layer{layer}.csv"), t.series[0].mean(0).double().numpy())
            write_csv_matrix(out.path(f"prior_layer{layer}.csv"), t.prior[0].mean(0).double().numpy())
        metrics["overlay_window"] = index
    if "as_ts" in dumps:
        if not has_spatial:
            raise ProtocolError("AS_ts dump requested but the checkpoint has no spatial module")
        ScoreMatrix(det.score_channels(loaded.test), det.channel_threshold_, SPATIOTEMPORAL,
                    det.state_.config.window).save(out.path("as_ts.csv"))
    write_effective(out.path("effective.cfg"), {"run": run, "data": data, "eval": ev})
    out.finish(**{k: v["f1"] for k, v in metrics.items() if isinstance(v, dict)})
    line = f"time-wise F1 {tw['f1']:.4f}"
    if "spatiotemporal" in metrics:
        line += (f", channel-wise F1 {metrics['spatiotemporal']['f1']:.4f}"
                 f" (broadcast {metrics['broadcast']['f1']:.4f})")
    print(line)
    return 0


def cmd_export(args) -> int:
    raw = read_config(args.config, "export")
    run = _run_section(raw, args, need_seed=False)
    ev = _eval_section(raw, args)
    det = POSTDetector.load(ev["checkpoint"])
    out = Run(run["out"], "export")
    model = det.state_.model
    if not model.use_saga:
        raise ProtocolError("the checkpoint has no spatial module; there is no graph to export")
    for layer, (g, saga) in enumerate(zip(model.graph_tildes(), model.saga_layers)):
        write_csv_matrix(out.path(f"graph_layer{layer}.csv"), g.detach().double().numpy())
        write_csv_matrix(out.path(f"graph_logits_layer{layer}.csv"), saga.graph_logits.detach().double().numpy())
    write_effective(out.path("effective.cfg"), {"run": run, "eval": ev})
    out.finish()
    return 0


# --- argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="postad", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=False):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--out", help="output directory")
        if seed:
            p.add_argument("--seed", type=int, help="random seed (required)")
        return p

    g = common(sub.add_parser("generate", help="build an annotated synthetic benchmark"), seed=True)
    g.add_argument("--format", choices=("csv", "bin"))
    g.set_defaults(func=cmd_generate)

    t = common(sub.add_parser("train", help="train a detector and write a checkpoint"), seed=True)
    t.add_argument("--manifest")
    t.add_argument("--ratio")
    t.add_argument("--epochs", type=int)
    t.add_argument("--ablation", action="append", choices=sorted(ABLATIONS))
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("score", cmd_score, "write anomaly score matrices"),
                                 ("eval", cmd_eval, "compute detection metrics and plot data")):
        p = common(sub.add_parser(name, help=helptext))
        p.add_argument("--manifest")
        p.add_argument("--checkpoint")
        p.add_argument("--ratio")
        p.add_argument("--protocol", choices=("auto", TIMEWISE, SPATIOTEMPORAL))
        if name == "score":
            p.add_argument("--format", choices=("csv", "bin"), default="csv")
        else:
            p.add_argument("--grid-points", dest="grid_points", type=int)
            p.add_argument("--dumps", help=f"comma list of {', '.join(DUMPS)}")
        p.set_defaults(func=func)

    e = common(sub.add_parser("export", help="dump learned graphs as CSV heatmaps"))
    e.add_argument("--checkpoint")
    e.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PostError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

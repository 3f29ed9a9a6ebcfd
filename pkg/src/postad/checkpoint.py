"""Versioned binary checkpoints for a training state.

Layout (little-endian)::

    b"POSTCKPT"           8-byte magic
    uint32 version        FORMAT_VERSION
    uint64 header_len
    header                UTF-8 JSON, header_len bytes
    payload               raw tensor bytes, concatenated
    uint32 crc32          over header and payload

The header holds ``config`` (TrainConfig fields), ``n_channels``, ``epoch``,
``clip_events``, ``optimizers`` (non-tensor Adam settings), free-form
``extra`` metadata and ``tensors``: a list of ``{name, dtype, shape, offset,
nbytes}`` entries, offsets relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import TrainConfig
from .errors import CheckpointCorruptError, CheckpointVersionError, DimensionMismatchError
from .trainer import TrainState, init_state

MAGIC = b"POSTCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "uint8": (torch.uint8, "u1"),
}
_BY_TORCH = {t: name for name, (t, _) in _DTYPES.items()}


def _flatten_optimizer(prefix: str, opt, tensors: dict) -> dict:
    sd = opt.state_dict()
    for idx in sorted(sd["state"]):
        for key in sorted(sd["state"][idx]):
            tensors[f"{prefix}/{idx}/{key}"] = torch.as_tensor(sd["state"][idx][key])
    return {"param_groups": sd["param_groups"], "indices": sorted(sd["state"])}


def _restore_optimizer(prefix: str, opt, meta: dict, tensors: dict) -> None:
    state = {}
    for idx in meta["indices"]:
        lead = f"{prefix}/{idx}/"
        state[idx] = {k[len(lead):]: v for k, v in tensors.items() if k.startswith(lead)}
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})


def save(state: TrainState, path, extra: Optional[dict] = None) -> None:
    """Write ``state`` (model, both optimizers, random stream) to ``path``."""
    tensors: dict[str, torch.Tensor] = {}
    for name, t in state.model.state_dict().items():
        tensors[f"model/{name}"] = t
    optimizers = {"net": _flatten_optimizer("net_opt", state.net_opt, tensors)}
    if state.graph_opt is not None:
        optimizers["graph"] = _flatten_optimizer("graph_opt", state.graph_opt, tensors)
    tensors["generator"] = state.generator.get_state()

    directory, chunks, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu().contiguous()
        if t.dtype not in _BY_TORCH:
            raise TypeError(f"cannot serialize {name} of dtype {t.dtype}")
        dname = _BY_TORCH[t.dtype]
        raw = t.numpy().astype(_DTYPES[dname][1], copy=False).tobytes()
        directory.append({"name": name, "dtype": dname, "shape": list(t.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "config": state.config.to_dict(),
        "n_channels": state.n_channels,
        "epoch": state.epoch,
        "clip_events": state.clip_events,
        "optimizers": optimizers,
        "extra": state.extra if extra is None else extra,
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(chunks)
    crc = zlib.crc32(payload, zlib.crc32(blob))
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    tmp.replace(path)


def read(path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Parse and verify a checkpoint file; returns ``(header, tensors)``."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size + 4:
        raise CheckpointCorruptError(f"{path}: file too short ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if start + hlen + 4 > len(data):
        raise CheckpointCorruptError(f"{path}: header length {hlen} exceeds file size")
    blob = data[start:start + hlen]
    payload = data[start + hlen:-4]
    (crc,) = struct.unpack("<I", data[-4:])
    try:
        header = json.loads(blob)
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointCorruptError(f"{path}: unreadable header") from None
    expected = sum(e["nbytes"] for e in header.get("tensors", []))
    if expected != len(payload):
        raise CheckpointCorruptError(f"{path}: payload is {len(payload)} bytes, directory says {expected}")
    if zlib.crc32(payload, zlib.crc32(blob)) != crc:
        raise CheckpointCorruptError(f"{path}: checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        torch_dtype, np_dtype = _DTYPES[e["dtype"]]
        arr = np.frombuffer(payload, dtype=np_dtype, count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr).to(torch_dtype)
    return header, tensors


def load(path, expect_channels: Optional[int] = None) -> TrainState:
    """Rebuild a :class:`TrainState` saved by :func:`save`.

    ``expect_channels`` makes a channel-count mismatch with the target dataset
    fail before any tensor is touched.
    """
    header, tensors = read(path)
    d0 = header["n_channels"]
    if expect_channels is not None and expect_channels != d0:
        raise DimensionMismatchError(f"checkpoint has {d0} channels, dataset has {expect_channels}")
    config = TrainConfig.from_dict(header["config"])
    state = init_state(d0, config)
    model_sd = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    state.model.load_state_dict(model_sd, strict=True)
    _restore_optimizer("net_opt", state.net_opt, header["optimizers"]["net"], tensors)
    if state.graph_opt is not None and "graph" in header["optimizers"]:
        _restore_optimizer("graph_opt", state.graph_opt, header["optimizers"]["graph"], tensors)
    state.generator.set_state(tensors["generator"])
    state.epoch = header["epoch"]
    state.clip_events = header["clip_events"]
    state.extra = header["extra"]
    return state

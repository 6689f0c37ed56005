"""Binary checkpoint format.

Layout: ``b"ARTT1"`` magic, little-endian uint32 header length, UTF-8 JSON
header, then every tensor as little-endian float64 in header-table order.
The header is serialised with sorted keys so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .mapper import ModelConfig, OptimState, ParamSet

MAGIC = b"ARTT1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, theta: ParamSet, teacher: ParamSet | None, state: OptimState | None,
                    cfg: ModelConfig, stage: int = 1, extra: dict | None = None):
    groups = [("student", theta)]
    if teacher is not None:
        groups.append(("teacher", teacher))
    if state is not None:
        groups.append(("adam_m", ParamSet(state.m)))
        groups.append(("adam_v", ParamSet(state.v)))
    table, payload, offset = [], [], 0
    for prefix, ps in groups:
        for name, arr in ps.tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            table.append({"name": f"{prefix}/{name}", "shape": list(arr.shape), "offset": offset})
            payload.append(data)
            offset += len(data)
    header = {
        "version": VERSION,
        "stage": stage,
        "model": asdict(cfg),
        "student_step": theta.step_count,
        "teacher_step": teacher.step_count if teacher is not None else None,
        "optim": None if state is None else {
            "t": state.t, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2,
            "eps": state.eps, "skipped": state.skipped},
        "tensors": table,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hbytes)))
        f.write(hbytes)
        for chunk in payload:
            f.write(chunk)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(theta, teacher_or_None, optim_state_or_None, model_cfg, header)``."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 9 or raw[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if 9 + hlen > len(raw):
        raise CheckpointError(f"{path}: corrupt checkpoint, header truncated")
    try:
        header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    body = memoryview(raw)[9 + hlen:]
    groups: dict[str, OrderedDict] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start, stop = entry["offset"], entry["offset"] + 8 * count
        if stop > len(body):
            raise CheckpointError(f"{path}: corrupt checkpoint, tensor {entry['name']} truncated")
        arr = np.frombuffer(body[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
        prefix, name = entry["name"].split("/", 1)
        groups.setdefault(prefix, OrderedDict())[name] = arr
    cfg = ModelConfig(**header["model"])
    theta = ParamSet(groups["student"], header["student_step"])
    shapes = cfg.layer_shapes()
    for i, (a, b) in enumerate(shapes):
        if theta.tensors.get(f"W{i}", np.empty(0)).shape != (a, b):
            raise CheckpointError(f"{path}: tensor W{i} does not match the model config")
    teacher = ParamSet(groups["teacher"], header["teacher_step"]) if "teacher" in groups else None
    state = None
    if header["optim"] is not None:
        o = header["optim"]
        state = OptimState(groups["adam_m"], groups["adam_v"], o["t"], o["lr"], o["beta1"],
                           o["beta2"], o["eps"], o["skipped"])
    return theta, teacher, state, cfg, header

"""Binary checkpoints ("CROSSNAV-CKPT v1").

A text header (phase, config snapshot, rng state, optimizer step, history,
then a name/shape directory) terminated by an ``end`` line, followed by the
tensors as little-endian float64 in directory order.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .mathcore import AdamState

MAGIC = b"CROSSNAV-CKPT v1\n"
PHASES = ("init", "critic", "sl", "rl", "sil")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    phase: str
    config: dict
    nav_params: dict
    critic_params: dict
    optimizer: AdamState
    rng_state: dict
    history: list = field(default_factory=list)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(type(obj))


def _tensors(ckpt: Checkpoint):
    for prefix, group in (("nav", ckpt.nav_params), ("critic", ckpt.critic_params),
                          ("adam.m", ckpt.optimizer.m), ("adam.v", ckpt.optimizer.v)):
        for name, arr in group.items():
            yield f"{prefix}/{name}", np.asarray(arr, dtype=np.float64)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    if ckpt.phase not in PHASES:
        raise CheckpointError(f"unknown phase {ckpt.phase!r}")
    tensors = list(_tensors(ckpt))
    header = [f"phase {ckpt.phase}",
              "config " + json.dumps(ckpt.config, sort_keys=True, default=_json_default),
              "rng " + json.dumps(ckpt.rng_state, sort_keys=True, default=_json_default),
              f"adam_step {ckpt.optimizer.step}",
              "history " + json.dumps(ckpt.history, default=_json_default),
              f"tensors {len(tensors)}"]
    for name, arr in tensors:
        header.append(" ".join([name] + [str(d) for d in arr.shape]))
    header.append("end")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        for _, arr in tensors:
            fh.write(arr.astype("<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a CROSSNAV-CKPT v1 file")
    pos = len(MAGIC)
    header = {}
    directory = []
    n_tensors = None
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:nl].decode("utf-8")
        pos = nl + 1
        if line == "end":
            break
        if n_tensors is not None:
            parts = line.split()
            directory.append((parts[0], tuple(int(d) for d in parts[1:])))
            continue
        key, _, value = line.partition(" ")
        header[key] = value
        if key == "tensors":
            n_tensors = int(value)
    if n_tensors is None or len(directory) != n_tensors:
        raise CheckpointError(f"{path}: tensor directory does not match its count")
    need = sum(8 * math.prod(shape) for _, shape in directory)
    if len(data) - pos != need:
        raise CheckpointError(
            f"{path}: payload has {len(data) - pos} bytes, directory needs {need}")
    groups = {"nav": {}, "critic": {}, "adam.m": {}, "adam.v": {}}
    for name, shape in directory:
        size = math.prod(shape)
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
        prefix, _, pname = name.partition("/")
        if prefix not in groups:
            raise CheckpointError(f"{path}: unknown tensor group in {name!r}")
        groups[prefix][pname] = arr
    try:
        return Checkpoint(
            phase=header["phase"],
            config=json.loads(header["config"]),
            nav_params=groups["nav"],
            critic_params=groups["critic"],
            optimizer=AdamState(int(header["adam_step"]), groups["adam.m"], groups["adam.v"]),
            rng_state=json.loads(header["rng"]),
            history=json.loads(header["history"]),
        )
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: bad header field {exc}") from None


def check_shapes(params: dict, expected: dict, group: str) -> None:
    if set(params) != set(expected):
        raise CheckpointError(f"{group}: parameter names differ from the model configuration")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise CheckpointError(f"{group}/{name}: shape {params[name].shape} != {tuple(shape)}")

"""Checkpoint container: a small binary format with a JSON header followed by
named float32 little-endian parameter blobs.

Layout (all little-endian):
    bytes 0-3   magic b"AVCK"
    bytes 4-5   container version (u16), currently 1
    bytes 6-9   header length in bytes (u32)
    header      UTF-8 JSON: {"format_version", "epoch", "config",
                "config_hash", "blobs": [{"name", "shape", "offset",
                "nbytes"}], "scalars": {...}}
    blob area   concatenated float32 data, offsets relative to its start
"""

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"AVCK"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def config_hash(config: dict) -> str:
    return hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, named_tensors: dict, config: dict, epoch: int,
                    scalars: dict | None = None) -> None:
    """Atomic write (temp file + rename)."""
    blobs, chunks, offset = [], [], 0
    for name, tensor in named_tensors.items():
        arr = np.ascontiguousarray(
            tensor.detach().cpu().numpy().astype("<f4"))
        blobs.append({"name": name, "shape": list(arr.shape),
                      "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "format_version": VERSION,
        "epoch": epoch,
        "config": config,
        "config_hash": config_hash(config),
        "blobs": blobs,
        "scalars": scalars or {},
    }).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header dict, {name: float32 tensor})."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    version, header_len = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    header = json.loads(data[10:10 + header_len].decode())
    if "format_version" not in header:
        raise CheckpointError("header missing format_version")
    base = 10 + header_len
    tensors = {}
    for blob in header["blobs"]:
        raw = data[base + blob["offset"]:base + blob["offset"] + blob["nbytes"]]
        if len(raw) != blob["nbytes"]:
            raise CheckpointError(
                f"truncated blob {blob['name']!r}: expected {blob['nbytes']} "
                f"bytes at offset {base + blob['offset']}, got {len(raw)}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(blob["shape"]).copy()
        tensors[blob["name"]] = torch.from_numpy(arr)
    return header, tensors


def model_blobs(model, optimizers: dict | None = None) -> tuple[dict, dict]:
    """Collect parameter/buffer blobs plus Adam moment blobs; scalar Adam
    state (step counts) goes into the scalars dict."""
    named = {}
    for name, p in model.state_dict().items():
        named[f"model/{name}"] = p.float()
    scalars = {}
    if optimizers:
        for opt_name, opt in optimizers.items():
            params = [p for group in opt.param_groups for p in group["params"]]
            for i, p in enumerate(params):
                state = opt.state.get(p)
                if not state:
                    continue
                named[f"opt/{opt_name}/{i}/exp_avg"] = state["exp_avg"].float()
                named[f"opt/{opt_name}/{i}/exp_avg_sq"] = state["exp_avg_sq"].float()
                scalars[f"opt/{opt_name}/{i}/step"] = float(state["step"])
    return named, scalars


def restore_model(model, tensors: dict) -> None:
    state = {name[len("model/"):]: t for name, t in tensors.items()
             if name.startswith("model/")}
    target = model.state_dict()
    for key in state:
        state[key] = state[key].to(target[key].dtype).reshape(target[key].shape)
    model.load_state_dict(state)


def restore_optimizer(opt, opt_name: str, tensors: dict, scalars: dict) -> None:
    params = [p for group in opt.param_groups for p in group["params"]]
    for i, p in enumerate(params):
        ea = tensors.get(f"opt/{opt_name}/{i}/exp_avg")
        if ea is None:
            continue
        opt.state[p] = {
            "step": torch.tensor(scalars[f"opt/{opt_name}/{i}/step"]),
            "exp_avg": ea.reshape(p.shape).clone(),
            "exp_avg_sq": tensors[f"opt/{opt_name}/{i}/exp_avg_sq"].reshape(p.shape).clone(),
        }

"""Binary checkpoints for estimator and reward-model parameters.

Layout: ``b"OGZC"``, u32 LE version, u64 LE metadata length, UTF-8 JSON
metadata, then every tensor as little-endian float32 in metadata order.
Serialisation is deterministic, so identical parameters give identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .nets import GazeEstimatorParams, Params, init_mlp
from .reward import RewardModelParams, init_reward

MAGIC = b"OGZC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def architecture(p: Params) -> dict:
    if isinstance(p, GazeEstimatorParams):
        return {"kind": "estimator", "encoder": p.encoder.dims, "head": p.head.dims}
    if isinstance(p, RewardModelParams):
        return {"kind": "reward", "d_visual": p.visual_width, "d_text": p.text_width, "width": p.width,
                "hidden": p.conf_head.dims[1], "residual": p.residual}
    raise TypeError(f"cannot checkpoint {type(p).__name__}")


def _skeleton(arch: Mapping) -> Params:
    kind = arch.get("kind")
    if kind == "estimator":
        rng = np.random.default_rng(0)
        return GazeEstimatorParams(init_mlp(rng, arch["encoder"]), init_mlp(rng, arch["head"]))
    if kind == "reward":
        return init_reward(0, arch["d_visual"], arch["d_text"], arch["width"], arch["hidden"], arch["residual"])
    raise CheckpointError(f"unknown model kind {kind!r}")


def encode(models: Mapping[str, Params], config_hash: str = "", epoch: int = 0,
           extra: Mapping | None = None) -> bytes:
    tensors, chunks = [], []
    for model_name in sorted(models):
        for name, t in models[model_name].named_parameters():
            arr = np.ascontiguousarray(t.data, dtype="<f4")
            tensors.append({"name": f"{model_name}/{name}", "shape": list(arr.shape), "dtype": "float32"})
            chunks.append(arr.tobytes())
    meta = {
        "config_hash": config_hash,
        "epoch": int(epoch),
        "models": {k: architecture(models[k]) for k in sorted(models)},
        "tensors": tensors,
        "extra": dict(extra or {}),
    }
    raw = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(raw)) + raw + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, Params], dict]:
    """Inverse of :func:`encode`; returns ``(models, metadata)``."""
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, n_meta = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    start = _HEADER.size
    try:
        meta = json.loads(blob[start:start + n_meta].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint metadata: {e}") from None
    payload = memoryview(blob)[start + n_meta:]
    sizes = [int(np.prod(t["shape"], dtype=np.int64)) for t in meta["tensors"]]
    if len(payload) != 4 * sum(sizes):
        raise CheckpointError(f"payload has {len(payload)} bytes, metadata declares {4 * sum(sizes)}")
    states: dict[str, dict[str, np.ndarray]] = {k: {} for k in meta["models"]}
    offset = 0
    for t, n in zip(meta["tensors"], sizes):
        if t.get("dtype") != "float32":
            raise CheckpointError(f"unsupported dtype {t.get('dtype')!r} for {t['name']}")
        model_name, name = t["name"].split("/", 1)
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(t["shape"])
        states[model_name][name] = arr.astype(np.float32)
        offset += 4 * n
    models = {}
    for k, arch in meta["models"].items():
        p = _skeleton(arch)
        try:
            p.load_state_dict(states[k])
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"model {k!r} does not match its declared architecture: {e}") from None
        models[k] = p
    return models, meta


def save(path, models: Mapping[str, Params], config_hash: str = "", epoch: int = 0,
         extra: Mapping | None = None) -> Path:
    path = Path(path)
    blob = encode(models, config_hash, epoch, extra)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, Params], dict]:
    return decode(Path(path).read_bytes())


def load_model(path, name: str) -> Params:
    models, _ = load(path)
    if name not in models:
        raise CheckpointError(f"{path}: no model {name!r} (has {sorted(models)})")
    return models[name]

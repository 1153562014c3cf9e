"""Versioned binary checkpoints.

Layout (little-endian)::

    magic    8 bytes  b"QPRLCKPT"
    version  uint32
    hlen     uint32   length of the JSON header
    header   hlen bytes: config echo, net spec, tensor table (name, shape)
    tensors  row-major float64 values, in header order
    sha256   32 bytes over everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .env import EnvConfig
from .rl.net import NetSpec, PolicyNet
from .rl.train import TrainConfig

MAGIC = b"QPRLCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST = 32


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    net: PolicyNet
    train_config: TrainConfig
    env_config: Optional[EnvConfig] = None
    extra: dict = field(default_factory=dict)


def _encode(net: PolicyNet, train_config: TrainConfig, env_config: Optional[EnvConfig], extra: dict, version: int) -> bytes:
    names = sorted(net.params)
    header = {
        "train_config": train_config.to_dict(),
        "env_config": None if env_config is None else env_config.to_dict(),
        "net_spec": net.spec.to_dict(),
        "tensors": [{"name": k, "shape": list(net.params[k].shape)} for k in names],
        "extra": extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [_PREFIX.pack(MAGIC, version, len(blob)), blob]
    parts += [np.ascontiguousarray(net.params[k], dtype="<f8").tobytes() for k in names]
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(
    path: Union[str, os.PathLike],
    net: PolicyNet,
    train_config: TrainConfig,
    env_config: Optional[EnvConfig] = None,
    extra: Optional[dict] = None,
    *,
    version: int = VERSION,
) -> Path:
    """Write atomically (temp file then rename) so readers never see a partial file."""
    path = Path(path)
    data = _encode(net, train_config, env_config, dict(extra or {}), version)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def _train_config(d: dict) -> TrainConfig:
    d = dict(d)
    d["channels"] = tuple(d.get("channels", (8, 8, 8)))
    known = TrainConfig.__dataclass_fields__
    return TrainConfig(**{k: v for k, v in d.items() if k in known})


def load_checkpoint(path: Union[str, os.PathLike]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if len(data) < _PREFIX.size + _DIGEST:
        raise ChecksumError(f"{path}: checksum mismatch (file is {len(data)} bytes, too short to be a checkpoint)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError(f"{path}: checksum mismatch; file is truncated or corrupt")
    if version != VERSION:
        raise VersionError(f"{path}: checkpoint format version {version} is not supported by this build (version {VERSION})")
    header = json.loads(body[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    spec = NetSpec(**header["net_spec"])
    net = PolicyNet(spec, seed=None, zero_heads=True)
    offset = _PREFIX.size + hlen
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        chunk = body[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: tensor {entry['name']} is short")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes after tensors")
    if set(params) != set(net.params):
        raise CheckpointError(f"{path}: tensor names {sorted(params)} do not match the network {sorted(net.params)}")
    for k, v in params.items():
        if v.shape != net.params[k].shape:
            raise CheckpointError(f"{path}: tensor {k} has shape {v.shape}, network expects {net.params[k].shape}")
    net.params = params
    env = header.get("env_config")
    return Checkpoint(
        net=net,
        train_config=_train_config(header["train_config"]),
        env_config=None if env is None else EnvConfig.from_dict(env),
        extra=header.get("extra", {}),
    )

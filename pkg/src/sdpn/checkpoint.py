"""Single-file checkpoint container.

Layout: magic | u32 version | u64 header length | JSON header | raw tensor
payload | sha256 digest of everything after the magic. The header carries
counters, rng state, a config snapshot, and the tensor table (name, dtype,
shape, offset).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SDPNCKPT"
VERSION = 1
_DIGEST_LEN = 32


class CheckpointError(Exception):
    """File is not a checkpoint produced by this code."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint is truncated or corrupt."""


@dataclass
class Checkpoint:
    step: int
    epoch: int
    tensors: dict[str, np.ndarray]
    rng_state: dict
    config: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    index = []
    offset = 0
    blobs = []
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name])
        blob = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "step": ckpt.step,
            "epoch": ckpt.epoch,
            "rng_state": ckpt.rng_state,
            "config": ckpt.config,
            "tensors": index,
        },
        sort_keys=True,
    ).encode("utf-8")

    body = struct.pack("<IQ", VERSION, len(header)) + header + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    Path(path).write_bytes(MAGIC + body + digest)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 12 + _DIGEST_LEN or not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = raw[len(MAGIC) : -_DIGEST_LEN], raw[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch (truncated or corrupt)")
    version, header_len = struct.unpack_from("<IQ", body)
    if version != VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version} is not supported (expected {VERSION})"
        )
    header_bytes = body[12 : 12 + header_len]
    payload = body[12 + header_len :]
    header = json.loads(header_bytes.decode("utf-8"))
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        step=header["step"],
        epoch=header["epoch"],
        tensors=tensors,
        rng_state=header["rng_state"],
        config=header["config"],
        version=version,
    )

"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic            8 bytes  b"TVSGCKPT"
    version          u32
    header_length    u32
    header           JSON, UTF-8 (config echo, epoch, optimizer/schedule/weights/RNG state)
    tensor records   repeated: u32 name length, name, u32 rank, u32 extents[rank], f32 payload
    checksum         u64, first 8 bytes of BLAKE2b over everything above
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import AdaptiveWeights
from .optim import AdamState, LrSchedule

MAGIC = b"TVSGCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainState:
    config_text: str
    epoch: int
    params: dict[str, np.ndarray]
    adam: AdamState
    schedule: LrSchedule
    weights: AdaptiveWeights
    rng_state: dict
    best_val_dsc: float = -1.0
    history: list[str] = field(default_factory=list)


def _checksum(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=8).digest()


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    enc = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack(f"<I{len(enc)}sI{arr.ndim}I", len(enc), enc, arr.ndim, *arr.shape)
    return head + arr.tobytes()


def encode_checkpoint(state: TrainState) -> bytes:
    tensors = [(f"param/{n}", a) for n, a in state.params.items()]
    tensors += [(f"adam.m/{n}", a) for n, a in state.adam.m.items()]
    tensors += [(f"adam.v/{n}", a) for n, a in state.adam.v.items()]
    header = {
        "config": state.config_text,
        "epoch": state.epoch,
        "adam": {"beta1": state.adam.beta1, "beta2": state.adam.beta2,
                 "eps": state.adam.eps, "step": state.adam.step},
        "schedule": asdict(state.schedule),
        "weights": asdict(state.weights),
        "rng_state": state.rng_state,
        "best_val_dsc": state.best_val_dsc,
        "history": state.history,
        "tensor_count": len(tensors),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes]
    parts += [_tensor_record(n, a) for n, a in tensors]
    body = b"".join(parts)
    return body + _checksum(body)


def decode_checkpoint(blob: bytes) -> TrainState:
    if len(blob) < len(MAGIC) + 16 or blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, tail = blob[:-8], blob[-8:]
    version, hlen = struct.unpack_from("<II", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    if _checksum(body) != tail:
        raise CheckpointError("checksum mismatch: checkpoint is truncated or corrupted")
    pos = len(MAGIC) + 8
    header = json.loads(body[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    tensors = {}
    for _ in range(header["tensor_count"]):
        (nlen,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        tensors[name] = arr.astype(np.float32)
    if pos != len(body):
        raise CheckpointError(f"trailing bytes after tensor records ({len(body) - pos})")

    def group(prefix):
        return {n[len(prefix):]: a for n, a in tensors.items() if n.startswith(prefix)}

    a = header["adam"]
    adam = AdamState(a["beta1"], a["beta2"], a["eps"], a["step"], group("adam.m/"), group("adam.v/"))
    return TrainState(
        config_text=header["config"],
        epoch=header["epoch"],
        params=group("param/"),
        adam=adam,
        schedule=LrSchedule(**header["schedule"]),
        weights=AdaptiveWeights(**header["weights"]),
        rng_state=header["rng_state"],
        best_val_dsc=header["best_val_dsc"],
        history=list(header["history"]),
    )


def save_checkpoint(state: TrainState, path) -> Path:
    """Write atomically (temp file + rename) so a crash never leaves a half file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(state))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())

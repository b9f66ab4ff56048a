"""Single-file tensor container.

Layout (all integers little-endian):

    bytes 0..3    magic "TDCK"
    4..5          format version (u16)
    6..9          metadata length (u32)
    ...           metadata, canonical JSON (sorted keys, compact separators)
    u32           tensor count
    per tensor    name length (u16), name utf-8, dtype code (u8, 0 = float32),
                  ndim (u8), dims (u32 each), payload offset (u64)
    ...           payload, raw little-endian float32, concatenated in entry order

Entries are written in dict insertion order and returned in the same order, so
a load followed by a save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"TDCK"
VERSION = 1
DTYPE_FLOAT32 = 0


class ContainerError(Exception):
    """Malformed container; ``byte_offset`` locates the first bad byte."""

    def __init__(self, message: str, byte_offset: int) -> None:
        super().__init__(f"{message} (byte offset {byte_offset})")
        self.byte_offset = byte_offset


def _canonical_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 arrays plus a JSON metadata block."""
    entries = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise TypeError(f"tensor {name!r} must be float32, got {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append((name, arr.shape, len(payload)))
        payload.extend(raw)

    meta_bytes = _canonical_meta(meta or {})
    blob = bytearray()
    blob += struct.pack("<4sHI", MAGIC, VERSION, len(meta_bytes))
    blob += meta_bytes
    blob += struct.pack("<I", len(entries))
    for name, shape, offset in entries:
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes))
        blob += name_bytes
        blob += struct.pack("<BB", DTYPE_FLOAT32, len(shape))
        blob += struct.pack(f"<{len(shape)}I", *shape) if shape else b""
        blob += struct.pack("<Q", offset)
    blob += payload
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back; tensor order matches the order it was written."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}", 4)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_start = r.pos
    meta_bytes = r.take(meta_len, "metadata")
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"metadata is not valid JSON: {exc}", meta_start) from exc

    (count,) = r.unpack("<I", "tensor count")
    entries = []
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        dtype_code, ndim = r.unpack("<BB", "dtype/ndim")
        if dtype_code != DTYPE_FLOAT32:
            raise ContainerError(f"unknown dtype code {dtype_code}", r.pos - 2)
        shape = r.unpack(f"<{ndim}I", "dims") if ndim else ()
        (offset,) = r.unpack("<Q", "payload offset")
        entries.append((name, shape, offset))

    payload_start = r.pos
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        start = payload_start + offset
        if start + n_bytes > len(data):
            raise ContainerError(f"payload for {name!r} runs past end of file", start)
        if name in tensors:
            raise ContainerError(f"duplicate tensor name {name!r}", payload_start)
        arr = np.frombuffer(data, dtype="<f4", count=n_bytes // 4, offset=start)
        tensors[name] = arr.reshape(shape).astype(np.float32, copy=True)
    return tensors, meta


def describe_container(path) -> dict:
    tensors, meta = load_tensors(path)
    return {
        "path": str(path),
        "format": "tensor-container-v1",
        "tensor_count": len(tensors),
        "total_elements": int(sum(int(a.size) for a in tensors.values())),
        "tensors": {name: list(a.shape) for name, a in tensors.items()},
        "meta": meta,
    }


def save_model(model, path, extra_meta: dict | None = None) -> None:
    """Serialize a denoiser: architecture, partition names, and all weights."""
    from .backbone import DenoiserModel, partition_parameters

    if not isinstance(model, DenoiserModel):
        raise TypeError("save_model expects a DenoiserModel")
    partition = partition_parameters(model)
    meta = {
        "kind": "denoiser",
        "config": model.config.to_dict(),
        "num_timesteps": model.num_timesteps,
        "trainable": list(partition.trainable),
        "provenance": extra_meta or {},
    }
    tensors = {
        name: p.detach().cpu().to(torch.float32).numpy()
        for name, p in model.state_dict().items()
    }
    save_tensors(path, tensors, meta)


def load_model(path):
    """Rebuild a saved denoiser; returns (model, provenance metadata)."""
    from .backbone import DenoiserConfig, build_model

    tensors, meta = load_tensors(path)
    if meta.get("kind") != "denoiser":
        raise ContainerError("container does not hold a denoiser checkpoint", 0)
    config = DenoiserConfig.from_dict(
        {**meta["config"], "channel_mults": tuple(meta["config"]["channel_mults"]),
         "attention_resolutions": tuple(meta["config"]["attention_resolutions"])}
    )
    model = build_model(config, seed=0, num_timesteps=int(meta["num_timesteps"]))
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    model.load_state_dict(state, strict=True)
    return model, meta

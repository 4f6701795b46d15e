"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic           9 bytes  b"ASTRALAB1"
    version         u32
    config_len      u64      followed by the UTF-8 config snapshot
    meta_len        u64      followed by UTF-8 key=value metadata lines
                             (stage, step, rng_state hex, array count)
    array data      concatenated raw little-endian buffers
    index           UTF-8 lines "name dtype shape offset nbytes"
    index_len       u64      last 8 bytes of the file

Round-tripping a checkpoint reproduces forward outputs bit-exactly: arrays
are written from and restored into the exact parameter dtypes.
"""

from __future__ import annotations

import binascii
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ASTRALAB1"
VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
}


@dataclass
class Checkpoint:
    """In-memory image of the container."""

    config_text: str
    stage: str  # pretrain | align | downstream
    step: int
    arrays: dict[str, np.ndarray]
    rng_state: bytes = b""
    version: int = VERSION
    extra_meta: dict[str, str] = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    meta_pairs = [
        ("stage", ckpt.stage),
        ("step", str(ckpt.step)),
        ("rng_state", binascii.hexlify(ckpt.rng_state).decode("ascii")),
        ("arrays", str(len(ckpt.arrays))),
    ]
    meta_pairs += sorted(ckpt.extra_meta.items())
    meta_text = "".join(f"{k} = {v}\n" for k, v in meta_pairs)

    index_lines = []
    blobs = []
    offset = 0
    for name in sorted(ckpt.arrays):
        arr = np.asarray(ckpt.arrays[name])
        dtype_name = str(arr.dtype)
        if dtype_name not in _DTYPES:
            raise ValueError(f"array {name!r}: unsupported dtype {dtype_name}")
        raw = arr.astype(_DTYPES[dtype_name]).tobytes()
        shape = ",".join(str(s) for s in arr.shape) or "-"
        index_lines.append(f"{name} {dtype_name} {shape} {offset} {len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    index_text = "\n".join(index_lines) + ("\n" if index_lines else "")

    config_bytes = ckpt.config_text.encode("utf-8")
    meta_bytes = meta_text.encode("utf-8")
    index_bytes = index_text.encode("utf-8")

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(ckpt.version).tobytes())
        f.write(np.uint64(len(config_bytes)).tobytes())
        f.write(config_bytes)
        f.write(np.uint64(len(meta_bytes)).tobytes())
        f.write(meta_bytes)
        for raw in blobs:
            f.write(raw)
        f.write(index_bytes)
        f.write(np.uint64(len(index_bytes)).tobytes())


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version = int(np.frombuffer(raw, dtype="<u4", count=1, offset=off)[0])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 4
    config_len = int(np.frombuffer(raw, dtype="<u8", count=1, offset=off)[0])
    off += 8
    config_text = raw[off : off + config_len].decode("utf-8")
    off += config_len
    meta_len = int(np.frombuffer(raw, dtype="<u8", count=1, offset=off)[0])
    off += 8
    meta_text = raw[off : off + meta_len].decode("utf-8")
    off += meta_len
    data_start = off

    meta = {}
    for line in meta_text.splitlines():
        if not line.strip():
            continue
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()

    index_len = int(np.frombuffer(raw, dtype="<u8", count=1, offset=len(raw) - 8)[0])
    index_text = raw[len(raw) - 8 - index_len : len(raw) - 8].decode("utf-8")

    arrays = {}
    for line in index_text.splitlines():
        name, dtype_name, shape_s, offset_s, nbytes_s = line.rsplit(" ", 4)
        shape = tuple(int(s) for s in shape_s.split(",")) if shape_s != "-" else ()
        start = data_start + int(offset_s)
        buf = raw[start : start + int(nbytes_s)]
        arr = np.frombuffer(buf, dtype=_DTYPES[dtype_name]).astype(dtype_name)
        arrays[name] = arr.reshape(shape)

    n_declared = int(meta.pop("arrays", "0"))
    if n_declared != len(arrays):
        raise ValueError(
            f"{path}: index holds {len(arrays)} arrays, metadata declares {n_declared}"
        )
    stage = meta.pop("stage")
    step = int(meta.pop("step"))
    rng_state = binascii.unhexlify(meta.pop("rng_state", ""))
    return Checkpoint(
        config_text=config_text,
        stage=stage,
        step=step,
        arrays=arrays,
        rng_state=rng_state,
        version=version,
        extra_meta=meta,
    )

"""Binary checkpoint container.

Layout (little-endian)::

    b"HNCK"  u16 version
    repeated until EOF:
        u16 name_len, name (UTF-8), u8 rank, rank * u32 dims, float32 payload
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .networks import load_state_dict

MAGIC = b"HNCK"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def encode(params: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, value in params.items():
        raw = name.encode("utf-8")
        value = np.asarray(value)
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 6:
        raise CheckpointFormatError("truncated header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    pos = 6
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise CheckpointFormatError("truncated parameter name")
            pos += n
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = pos + 4 * count
            if end > len(blob):
                raise CheckpointFormatError(
                    f"{name}: payload needs {4 * count} bytes, only {len(blob) - pos} left"
                )
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos = end
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated checkpoint: {exc}") from None
    return out


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(net_or_state, path) -> Path:
    state = net_or_state if isinstance(net_or_state, dict) else {
        name: p.data for name, p in net_or_state.named_parameters()
    }
    atomic_write_bytes(path, encode(state))
    return Path(path)


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def restore(net, path) -> None:
    load_state_dict(net, load(path))

"""Binary checkpoint files, bit-exact round trip.

Layout: magic "VLMCKPT1", u32 record count, then per parameter:
u16 name length, UTF-8 name, u8 rank, u32 per-dimension extent, u8 trainable
flag, raw little-endian float64 payload. All integers little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .params import ParameterStore

MAGIC = b"VLMCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, store: ParameterStore) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(store))]
    for name, t, trainable, _group in store.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            chunks.append(struct.pack("<I", extent))
        chunks.append(struct.pack("<B", 1 if trainable else 0))
        chunks.append(arr.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> list[tuple[str, np.ndarray, bool]]:
    """Read all records as (name, array, trainable) in file order."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = []
        for _ in range(rank):
            (e,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape.append(e)
        (flag,) = struct.unpack_from("<B", blob, off)
        off += 1
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += n * 8
        records.append((name, arr, bool(flag)))
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return records


def load_into_store(path: str | Path, store: ParameterStore) -> None:
    """Assign checkpointed values (and trainable flags) into an existing store."""
    records = load_checkpoint(path)
    names = set(store.names())
    seen = set()
    for name, arr, trainable in records:
        if name not in names:
            raise CheckpointError(f"checkpoint parameter {name!r} not present in store")
        t = store[name]
        if t.data.shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: store {t.data.shape}, file {arr.shape}"
            )
        t.data = np.ascontiguousarray(arr)
        store._trainable[name] = trainable
        seen.add(name)
    missing = names - seen
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:4]} ...")

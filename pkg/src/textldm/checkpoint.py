"""Binary checkpoint container.

Layout (little-endian)::

    b"TLDM" | u32 version | u32 n_tensors
    n_tensors x (u32 name_len | name utf-8 | u32 ndim | ndim x u32 dim)
    n_tensors x raw f32 payload (row-major)
    u32 meta_len | meta utf-8 ("key = value" lines)

Nothing may follow the metadata block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TLDM"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", self.version, len(self.tensors))]
        arrays = []
        for name, arr in self.tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
            arrays.append(arr)
        parts.extend(a.tobytes(order="C") for a in arrays)
        meta = format_kv(self.meta).encode("utf-8")
        parts.append(struct.pack("<I", len(meta)) + meta)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        reader = _Reader(buf)
        if reader.take(4, "magic") != MAGIC:
            raise CheckpointError("bad magic at offset 0: not a TLDM checkpoint")
        version, n = reader.unpack("<II", "header")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
        heads = []
        for _ in range(n):
            (name_len,) = reader.unpack("<I", "name length")
            name = reader.take(name_len, "tensor name").decode("utf-8")
            (ndim,) = reader.unpack("<I", "ndim")
            shape = reader.unpack(f"<{ndim}I", "shape") if ndim else ()
            heads.append((name, tuple(shape)))
        tensors = {}
        for name, shape in heads:
            count = int(np.prod(shape)) if shape else 1
            raw = reader.take(4 * count, f"payload of {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        (meta_len,) = reader.unpack("<I", "metadata length")
        meta = parse_kv(reader.take(meta_len, "metadata").decode("utf-8"))
        if reader.pos != len(buf):
            raise CheckpointError(f"{len(buf) - reader.pos} trailing bytes at offset {reader.pos}")
        return cls(tensors, meta, version)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: need {n} bytes for {what} at offset {self.pos}, "
                f"file has {len(self.buf)}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def format_kv(items: dict[str, str]) -> str:
    lines = []
    for k, v in items.items():
        v = str(v)
        if "\n" in v or "\n" in k or " = " in k:
            raise CheckpointError(f"metadata key/value for {k!r} must be single-line")
        lines.append(f"{k} = {v}")
    return "".join(line + "\n" for line in lines)


def parse_kv(text: str, allowed=None, source: str = "metadata") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` comments and blank lines skipped.

    With ``allowed`` given, unknown keys raise.
    """
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CheckpointError(f"{source} line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if allowed is not None and key not in allowed:
            raise CheckpointError(f"{source} line {lineno}: unknown key {key!r}")
        out[key] = value
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = ckpt.to_bytes()
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())

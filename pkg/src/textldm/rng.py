"""Seeded, counter-based random streams.

One Philox generator per named consumer ("data", "init", "noise",
"dropout", ...). Each stream's key is derived from ``(seed, name)`` so the
values a consumer sees never depend on how other consumers interleave.
"""

from __future__ import annotations

import json
import zlib

import numpy as np

from .tensor import Tensor


def make_stream(seed: int, name: str) -> np.random.Generator:
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(seq))


class RngStreams:
    """Lazily created named streams sharing one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = make_stream(self.seed, name)
        return self._streams[name]

    def state(self) -> str:
        """JSON snapshot of every stream that has been touched."""
        snap = {name: _jsonable(g.bit_generator.state) for name, g in sorted(self._streams.items())}
        return json.dumps({"seed": self.seed, "streams": snap}, sort_keys=True)

    @classmethod
    def from_state(cls, text: str) -> "RngStreams":
        blob = json.loads(text)
        out = cls(blob["seed"])
        for name, st in blob["streams"].items():
            g = out[name]
            g.bit_generator.state = _restore(st)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__array__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _restore(obj):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return np.array(obj["__array__"], dtype=obj["dtype"])
        return {k: _restore(v) for k, v in obj.items()}
    return obj


def gaussian_sample(shape, rng: np.random.Generator) -> Tensor:
    """i.i.d. standard normal tensor.

    Draws are made in float64 and then cast, so the stream of values is the
    same whatever the working precision.
    """
    return Tensor(rng.standard_normal(tuple(shape)))

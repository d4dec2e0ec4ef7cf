"""Named parameter arrays and the binary checkpoint format."""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import ConfigError

MAGIC = b"UPRL1"


class ParamStore(OrderedDict):
    """Ordered ``name -> float64 array`` mapping.

    Insertion order is the serialization order.
    """

    def __setitem__(self, name, value):
        super().__setitem__(name, np.array(value, dtype=np.float64))

    @property
    def total_count(self) -> int:
        return int(sum(v.size for v in self.values()))

    @property
    def shapes(self) -> dict:
        return {k: tuple(v.shape) for k, v in self.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            out[k] = v.copy()
        return out

    def zeros_like(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.items():
            out[k] = np.zeros_like(v)
        return out

    def to_vector(self) -> np.ndarray:
        if not self:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.values()])

    def from_vector(self, vec) -> "ParamStore":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.total_count:
            raise ConfigError(f"vector of size {vec.size} does not match {self.total_count} parameters")
        out, i = ParamStore(), 0
        for k, v in self.items():
            out[k] = vec[i : i + v.size].reshape(v.shape)
            i += v.size
        return out

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.values())))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values())


def dump_checkpoint(params: ParamStore, meta: dict | None = None) -> bytes:
    """Serialize to bytes: magic, u32 manifest length, JSON manifest, f32 LE data.

    ``meta`` carries the architecture config, training step and seed; it must
    be JSON-serializable.
    """
    manifest = dict(meta or {})
    manifest["params"] = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = b"".join(v.astype("<f4").tobytes() for v in params.values())
    return MAGIC + struct.pack("<I", len(blob)) + blob + data


def parse_checkpoint(raw: bytes) -> tuple[ParamStore, dict]:
    if raw[: len(MAGIC)] != MAGIC:
        raise ConfigError("not a checkpoint: bad magic bytes")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = json.loads(raw[off : off + n].decode("utf-8"))
    off += n
    params = ParamStore()
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        if off + nbytes > len(raw):
            raise ConfigError(f"checkpoint truncated in parameter {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += nbytes
    if off != len(raw):
        raise ConfigError(f"checkpoint has {len(raw) - off} trailing bytes")
    return params, manifest


def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    Path(path).write_bytes(dump_checkpoint(params, meta))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    return parse_checkpoint(Path(path).read_bytes())

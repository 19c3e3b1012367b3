"""WeightArchive: a small binary container for named float32 tensors.

Layout::

    b"WARC" | 0x01 | uint32 LE header length | UTF-8 JSON header | payloads

The header is ``{"entries": [{"name", "shape", "dtype": "f32"}, ...], "meta": {...}}``
and payloads are little-endian IEEE-754 float32, row-major, concatenated in
header order. ``meta`` carries JSON-serializable scalars (architecture name,
training counters) that do not belong in a tensor.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from .errors import CheckpointError, NotFoundError

MAGIC = b"WARC"
VERSION = 1
_LE_F32 = np.dtype("<f4")


@dataclass
class WeightArchive:
    """Ordered name -> float32 array mapping plus free-form metadata."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def add(self, name: str, array) -> None:
        if name in self.entries:
            raise ValueError(f"duplicate archive entry {name!r}")
        self.entries[name] = np.ascontiguousarray(array, dtype=np.float32)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise NotFoundError(f"archive has no entry {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def to_bytes(self) -> bytes:
        header = {
            "entries": [{"name": k, "shape": list(v.shape), "dtype": "f32"}
                        for k, v in self.entries.items()],
            "meta": self.meta,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(hbytes)), hbytes]
        parts.extend(v.astype(_LE_F32, copy=False).tobytes(order="C")
                     for v in self.entries.values())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "WeightArchive":
        if len(blob) < 9 or blob[:4] != MAGIC:
            raise CheckpointError("not a WeightArchive (bad magic)")
        if blob[4] != VERSION:
            raise CheckpointError(f"unsupported WeightArchive version {blob[4]}")
        (hlen,) = struct.unpack("<I", blob[5:9])
        if 9 + hlen > len(blob):
            raise CheckpointError("truncated WeightArchive header")
        try:
            header = json.loads(blob[9:9 + hlen].decode("utf-8"))
            specs = header["entries"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CheckpointError(f"corrupt WeightArchive header: {exc}") from None

        arc = cls(meta=header.get("meta", {}))
        offset = 9 + hlen
        for spec in specs:
            if spec.get("dtype") != "f32":
                raise CheckpointError(f"entry {spec.get('name')!r}: unsupported dtype {spec.get('dtype')!r}")
            shape = tuple(int(d) for d in spec["shape"])
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(blob):
                raise CheckpointError(f"truncated payload for entry {spec['name']!r}")
            arr = np.frombuffer(blob, dtype=_LE_F32, count=nbytes // 4, offset=offset)
            arc.add(spec["name"], arr.reshape(shape))
            offset += nbytes
        if offset != len(blob):
            raise CheckpointError(f"{len(blob) - offset} trailing bytes after last payload")
        return arc

    def save(self, path) -> None:
        """Write atomically: temp file in the target directory, then rename."""
        path = os.fspath(path)
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".warc-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "WeightArchive":
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise CheckpointError(f"cannot read {path}: {exc}") from None
        return cls.from_bytes(blob)

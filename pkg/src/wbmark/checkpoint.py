"""Portable checkpoints: manifest.json + one contiguous weights.bin.

The manifest lists every tensor as {name, shape, dtype:"f32", offset,
length} into a single little-endian float32 blob, plus the architecture
tag and training metadata. Round-trips are bitwise exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wbmark.errors import CheckpointError

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"


@dataclass
class Checkpoint:
    """Named float32 tensors plus architecture tag and training metadata."""

    arch: str
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for name, t in self.tensors.items():
            arr = np.ascontiguousarray(np.asarray(t), dtype=np.float32)
            if not np.isfinite(arr).all():
                raise CheckpointError(f"tensor {name!r} contains non-finite values")
            clean[name] = arr
        self.tensors = clean

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                          dict(self.meta))

    def num_params(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries = []
        offset = 0
        chunks = []
        for name in sorted(self.tensors):
            arr = self.tensors[name]
            raw = arr.astype("<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                            "offset": offset, "length": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        manifest = {"arch": self.arch, "meta": self.meta, "tensors": entries}
        (path / WEIGHTS_NAME).write_bytes(b"".join(chunks))
        with open(path / MANIFEST_NAME, "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        mpath, wpath = path / MANIFEST_NAME, path / WEIGHTS_NAME
        if not mpath.is_file():
            raise CheckpointError(f"missing {mpath}")
        if not wpath.is_file():
            raise CheckpointError(f"missing {wpath}")
        try:
            manifest = json.loads(mpath.read_text())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"unreadable manifest {mpath}: {e}") from e
        blob = wpath.read_bytes()
        tensors = {}
        total = 0
        for entry in manifest.get("tensors", []):
            name, shape = entry["name"], tuple(entry["shape"])
            off, length = int(entry["offset"]), int(entry["length"])
            if entry.get("dtype") != "f32":
                raise CheckpointError(f"tensor {name!r}: unsupported dtype {entry.get('dtype')!r}")
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            if length != 4 * n:
                raise CheckpointError(
                    f"tensor {name!r}: manifest shape {shape} needs {4*n} bytes, lists {length}")
            if off + length > len(blob):
                raise CheckpointError(
                    f"tensor {name!r}: blob truncated ({len(blob)} bytes, need {off + length})")
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            tensors[name] = arr.copy()
            total += length
        if total != len(blob):
            raise CheckpointError(
                f"blob size {len(blob)} does not match manifest total {total}")
        return cls(arch=manifest.get("arch", ""), tensors=tensors,
                   meta=manifest.get("meta", {}))

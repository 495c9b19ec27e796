"""Key serialization: one JSON manifest plus one float32 blob file.

The manifest carries the scheme id, seed, payload length, latent-space
parameters and scheme-specific fields (index arrays, layer index, net
widths); matrices and network parameters live in a sibling .bin file of
contiguous little-endian float32 values, each listed in the manifest
with name/shape/offset/length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from wbmark.core import LatentSpaceSpec
from wbmark.errors import InputError

SCHEMES = ("uchida", "riga", "deepsigns", "diction")


@dataclass
class KeyBundle:
    scheme: str
    rng_seed: int
    payload_bits: int
    latent_spec: LatentSpaceSpec | None = None
    meta: dict = field(default_factory=dict)
    blobs: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise InputError(f"unknown scheme {self.scheme!r} (expected one of {SCHEMES})")
        if (self.latent_spec is not None) != (self.scheme == "diction"):
            raise InputError("latent_spec must be present iff scheme is 'diction'")
        self.blobs = {k: np.ascontiguousarray(v, dtype=np.float32)
                      for k, v in self.blobs.items()}

    def save(self, path: str | Path) -> Path:
        """Write manifest to `path` (.json) and blobs to the sibling .bin."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        bin_path = path.with_suffix(".bin")
        entries = []
        offset = 0
        chunks = []
        for name in sorted(self.blobs):
            arr = self.blobs[name]
            raw = arr.astype("<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32",
                            "offset": offset, "length": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        manifest = {
            "scheme": self.scheme,
            "rng_seed": self.rng_seed,
            "payload_bits": self.payload_bits,
            "latent_spec": None if self.latent_spec is None else {
                "mean": self.latent_spec.mean,
                "std": self.latent_spec.std,
                "sample_shape": list(self.latent_spec.sample_shape),
            },
            "meta": self.meta,
            "blob_file": bin_path.name,
            "blobs": entries,
        }
        bin_path.write_bytes(b"".join(chunks))
        with open(path, "w") as f:
            json.dump(manifest, f, indent=1, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "KeyBundle":
        path = Path(path)
        if not path.is_file():
            raise InputError(f"missing key manifest {path}")
        manifest = json.loads(path.read_text())
        bin_path = path.parent / manifest.get("blob_file", path.with_suffix(".bin").name)
        blob = bin_path.read_bytes() if manifest.get("blobs") else b""
        blobs = {}
        for entry in manifest.get("blobs", []):
            shape = tuple(entry["shape"])
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            off, length = int(entry["offset"]), int(entry["length"])
            if length != 4 * n or off + length > len(blob):
                raise InputError(f"key blob {entry['name']!r} inconsistent with {bin_path}")
            blobs[entry["name"]] = np.frombuffer(
                blob, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        latent = manifest.get("latent_spec")
        spec = None if latent is None else LatentSpaceSpec(
            latent["mean"], latent["std"], tuple(latent["sample_shape"]))
        return cls(scheme=manifest["scheme"], rng_seed=int(manifest["rng_seed"]),
                   payload_bits=int(manifest["payload_bits"]), latent_spec=spec,
                   meta=manifest.get("meta", {}), blobs=blobs)

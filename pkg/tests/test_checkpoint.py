import json

import numpy as np
import pytest

from wbmark.checkpoint import Checkpoint
from wbmark.errors import CheckpointError


def make_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(arch="bm1_mlp",
                      tensors={"a.weight": rng.standard_normal((4, 3)).astype(np.float32),
                               "a.bias": rng.standard_normal(4).astype(np.float32)},
                      meta={"seed": 1, "epochs": 2})


def test_round_trip_bitwise(tmp_path):
    ckpt = make_ckpt()
    ckpt.save(tmp_path / "c")
    loaded = Checkpoint.load(tmp_path / "c")
    assert loaded.arch == ckpt.arch
    assert loaded.meta == ckpt.meta
    assert set(loaded.tensors) == set(ckpt.tensors)
    for name in ckpt.tensors:
        assert loaded.tensors[name].dtype == np.float32
        assert np.array_equal(loaded.tensors[name], ckpt.tensors[name])
        assert loaded.tensors[name].tobytes() == ckpt.tensors[name].tobytes()


def test_rejects_non_finite():
    bad = np.array([1.0, np.nan], dtype=np.float32)
    with pytest.raises(CheckpointError):
        Checkpoint(arch="x", tensors={"t": bad})


def test_truncated_blob(tmp_path):
    path = make_ckpt().save(tmp_path / "c")
    blob = (path / "weights.bin").read_bytes()
    (path / "weights.bin").write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="truncated|size"):
        Checkpoint.load(path)


def test_manifest_shape_mismatch(tmp_path):
    path = make_ckpt().save(tmp_path / "c")
    manifest = json.loads((path / "manifest.json").read_text())
    manifest["tensors"][0]["shape"] = [5, 3]
    (path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        Checkpoint.load(path)


def test_blob_size_mismatch(tmp_path):
    path = make_ckpt().save(tmp_path / "c")
    blob = (path / "weights.bin").read_bytes()
    (path / "weights.bin").write_bytes(blob + b"\x00" * 8)
    with pytest.raises(CheckpointError, match="size"):
        Checkpoint.load(path)


def test_missing_files(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        Checkpoint.load(tmp_path / "nope")
    path = make_ckpt().save(tmp_path / "c")
    (path / "weights.bin").unlink()
    with pytest.raises(CheckpointError, match="missing"):
        Checkpoint.load(path)


def test_copy_is_deep():
    ckpt = make_ckpt()
    cp = ckpt.copy()
    cp.tensors["a.bias"][0] = 99.0
    assert ckpt.tensors["a.bias"][0] != 99.0

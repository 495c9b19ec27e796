"""Scheme-agnostic primitives: payloads, distances, thresholding, the
global loss composition and the ownership decision.

Every scheme plugs into these: a feature extraction function produces a
vector, a projection maps it into [0,1]^l, `hard_threshold` reads bits
out, `ber` compares them to the reference payload.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from wbmark.errors import InputError

# Predictions are clamped into [EPS, 1-EPS] before any logarithm; the
# cross-entropy is undefined at exactly 0/1.
BCE_EPS = 1e-7

# Default BER acceptance threshold for ownership claims. Exposed as a
# parameter everywhere; successful detection reports exactly 0.
DEFAULT_BER_THRESHOLD = 0.0


class BitString:
    """Immutable binary payload b in {0,1}^l, l >= 1."""

    __slots__ = ("_bits",)

    def __init__(self, bits):
        arr = np.asarray(bits)
        if arr.ndim != 1 or arr.size < 1:
            raise InputError(f"payload must be a non-empty 1-d sequence, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise InputError("payload elements must be exactly 0 or 1")
        arr = arr.astype(np.uint8).copy()
        arr.flags.writeable = False
        object.__setattr__(self, "_bits", arr)

    def __setattr__(self, name, value):
        raise AttributeError("BitString is immutable")

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    def __len__(self) -> int:
        return int(self._bits.size)

    def __eq__(self, other) -> bool:
        return isinstance(other, BitString) and np.array_equal(self._bits, other._bits)

    def __hash__(self) -> int:
        return hash(self._bits.tobytes())

    def __repr__(self) -> str:
        s = self.to01()
        shown = s if len(s) <= 32 else s[:29] + "..."
        return f"BitString({shown!r}, length={len(self)})"

    def to01(self) -> str:
        return "".join("1" if b else "0" for b in self._bits)

    @classmethod
    def from01(cls, text: str) -> "BitString":
        text = text.strip()
        if not text or set(text) - {"0", "1"}:
            raise InputError("payload text must be a non-empty string over {0,1}")
        return cls([int(c) for c in text])

    @classmethod
    def random(cls, length: int, rng: np.random.Generator) -> "BitString":
        if length < 1:
            raise InputError("payload length must be >= 1")
        return cls(rng.integers(0, 2, size=length))

    def complement(self) -> "BitString":
        return BitString(1 - self._bits)


@dataclass(frozen=True)
class LatentSpaceSpec:
    """Input-shaped normal distribution N(mean, std) used as a trigger source."""

    mean: float
    std: float
    sample_shape: tuple[int, ...]

    def __post_init__(self):
        if self.std <= 0:
            raise InputError(f"latent std must be > 0, got {self.std}")
        if not self.sample_shape or any(int(d) < 1 for d in self.sample_shape):
            raise InputError(f"invalid latent sample shape {self.sample_shape}")
        object.__setattr__(self, "sample_shape", tuple(int(d) for d in self.sample_shape))


@dataclass(frozen=True)
class VerificationResult:
    """Outcome of comparing an extracted payload against the reference."""

    ber: float
    extracted: BitString
    matched: bool
    threshold: float

    def __post_init__(self):
        if not (0.0 <= self.ber <= 1.0 and 0.0 <= self.threshold <= 1.0):
            raise InputError("ber and threshold must lie in [0,1]")


def _as_soft(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"expected a 1-d vector, got shape {arr.shape}")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise InputError("soft values must lie in [0,1]")
    return arr


def ber(a: BitString, b: BitString) -> float:
    """Fraction of differing bit positions (count where |a_i - b_i| > 0.5)."""
    if len(a) != len(b):
        raise InputError(f"length mismatch: {len(a)} vs {len(b)}")
    diff = np.abs(a.bits.astype(np.int16) - b.bits.astype(np.int16)) > 0.5
    return float(diff.sum()) / len(a)


def hard_threshold(values) -> BitString:
    """Map [0,1] scores to bits: 1 iff value >= 0.5 (ties go to 1)."""
    arr = _as_soft(values)
    if arr.size < 1:
        raise InputError("cannot threshold an empty vector")
    return BitString((arr >= 0.5).astype(np.uint8))


def bce_distance(pred, target: BitString) -> float:
    """Binary cross entropy -sum_j (b_j log y_j + (1-b_j) log(1-y_j)).

    Predictions are clamped to [BCE_EPS, 1-BCE_EPS] first.
    """
    arr = _as_soft(pred)
    if arr.size != len(target):
        raise InputError(f"length mismatch: {arr.size} vs {len(target)}")
    y = np.clip(arr, BCE_EPS, 1.0 - BCE_EPS)
    b = target.bits.astype(np.float64)
    return float(-(b * np.log(y) + (1.0 - b) * np.log(1.0 - y)).sum())


def mse_distance(pred, target) -> float:
    """Mean squared component difference between two equal-length real vectors."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise InputError(f"shape mismatch: {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def compose_global_loss(task_loss: float, wat_loss: float, lam: float) -> float:
    """Global embedding loss: task_loss + lam * wat_loss."""
    return task_loss + lam * wat_loss


def decide_ownership(result_ber: float, threshold: float = DEFAULT_BER_THRESHOLD) -> bool:
    """Ownership claim holds iff the measured BER is at or below the threshold."""
    if not (0.0 <= result_ber <= 1.0 and 0.0 <= threshold <= 1.0):
        raise InputError("ber and threshold must lie in [0,1]")
    return result_ber <= threshold


def verify_payload(extracted: BitString, reference: BitString,
                   threshold: float = DEFAULT_BER_THRESHOLD) -> VerificationResult:
    """Bundle extraction output, BER and the ownership decision."""
    rate = ber(extracted, reference)
    return VerificationResult(ber=rate, extracted=extracted,
                              matched=decide_ownership(rate, threshold),
                              threshold=threshold)


def derive_seed(master: int, *tags) -> int:
    """Stable 63-bit seed derived from a master seed and string/int tags.

    Used everywhere randomness branches (per-repetition seeds, key
    material, latent streams) so that repetition i's seed never depends
    on how many repetitions run.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for t in tags:
        h.update(b"\x1f")
        h.update(str(t).encode())
    return int.from_bytes(h.digest()[:8], "little") & (2**63 - 1)


def derive_rng(master: int, *tags) -> np.random.Generator:
    """Numpy generator seeded via `derive_seed`."""
    return np.random.default_rng(derive_seed(master, *tags))

"""White-box neural-network watermarking toolkit.

Embeds bit-string payloads into model weights or activation maps
(uchida / riga / deepsigns / diction schemes), extracts and verifies
them, attacks them (pruning, fine-tuning, overwriting, distribution
inspection, property inference), and reproduces the benchmark tables
and figures through a config-driven harness.
"""

from wbmark.core import (
    BitString,
    VerificationResult,
    ber,
    bce_distance,
    compose_global_loss,
    decide_ownership,
    hard_threshold,
    mse_distance,
)

__all__ = [
    "BitString",
    "VerificationResult",
    "ber",
    "bce_distance",
    "compose_global_loss",
    "decide_ownership",
    "hard_threshold",
    "mse_distance",
]

__version__ = "0.1.0"

"""Mutually-constrained monotonic multihead attention: alignment calculus, adjoints and head-synchronous decoding."""

from .align import (
    ConstraintConfig,
    chunk_attention,
    constrain,
    expected_alignment,
    expected_context,
    mutually_constrained,
    remainder_B,
    self_constrained,
)
from .decode import DecodePolicy, DecodeTrace, decode_sequence, hsd_step
from .metrics import LatencyReport, relative_latency

__version__ = "0.1.0"

__all__ = [
    "ConstraintConfig",
    "DecodePolicy",
    "DecodeTrace",
    "LatencyReport",
    "chunk_attention",
    "constrain",
    "decode_sequence",
    "expected_alignment",
    "expected_context",
    "hsd_step",
    "mutually_constrained",
    "relative_latency",
    "remainder_B",
    "self_constrained",
]

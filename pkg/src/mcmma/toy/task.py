"""Synthetic monotonic transduction: each output token is smeared over ``upsample`` noisy frames."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class SyntheticTask:
    vocab_size: int = 10
    T: int = 32
    L: int = 8
    upsample: int = 4
    d_in: int = 8
    noise_std: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2 or self.L < 1 or self.upsample < 1 or self.d_in < 1:
            raise ValueError(f"invalid task {self}")
        if self.T != self.L * self.upsample:
            raise ValueError(f"T={self.T} must equal L * upsample = {self.L * self.upsample}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticData:
    inputs: np.ndarray  # (N, T, d_in)
    targets: np.ndarray  # (N, L) token ids
    boundaries: np.ndarray  # (N, L) gold boundary frames, 1-based

    def __len__(self):
        return len(self.targets)


def token_table(task: SyntheticTask) -> np.ndarray:
    """Fixed token embeddings shared by every split of a task."""
    return np.random.default_rng(task.seed).normal(size=(task.vocab_size, task.d_in))


def gen_synthetic(task: SyntheticTask, n: int, stream: int = 0) -> SyntheticData:
    """``n`` samples; frame ``t`` carries the embedding of token ``ceil(t / upsample)`` plus noise.

    ``stream`` separates splits (train/validation/test) drawn from the same task.
    """
    table = token_table(task)
    rng = np.random.default_rng([task.seed, stream + 1])
    targets = rng.integers(0, task.vocab_size, size=(n, task.L))
    frames = np.repeat(table[targets], task.upsample, axis=1)
    if task.noise_std > 0:
        frames = frames + task.noise_std * rng.normal(size=frames.shape)
    gold = np.tile(np.arange(1, task.L + 1) * task.upsample, (n, 1))
    return SyntheticData(frames, targets, gold)

"""Frame-index samplers and the PK batch composer.

All samplers return exactly N one-based frame indices within [1, L].
The non-cyclic sampler never wraps from the end of a sequence back to
its start; short sequences are padded by duplicating frames in order,
front to back, so temporal locality survives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("uniform", "cyclic", "noncyclic")


@dataclass(frozen=True)
class SamplerConfig:
    strategy: str = "noncyclic"
    frames: int = 30

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(
                f"SamplerConfig: strategy must be one of {STRATEGIES}, "
                f"got {self.strategy!r}")
        if self.frames < 1:
            raise ValueError(
                f"SamplerConfig: frames must be >= 1, got {self.frames}")


@dataclass(frozen=True)
class BatchSpec:
    p: int = 32
    k: int = 4

    def __post_init__(self):
        if self.p < 2 or self.k < 2:
            raise ValueError(
                f"BatchSpec: need p >= 2 and k >= 2 for triplet batches, "
                f"got p={self.p}, k={self.k}")


def _check_len(label: str, length: int, n: int) -> None:
    if length < 1:
        raise ValueError(f"{label}: sequence length must be >= 1, got {length}")
    if n < 1:
        raise ValueError(f"{label}: sample length must be >= 1, got {n}")


def _duplication_counts(length: int, n: int) -> np.ndarray:
    """Copies per frame when padding a short sequence to n samples.

    Each pass duplicates frames front to back until the deficit is gone,
    so counts are front-loaded and the output stays sorted.
    """
    counts = np.ones(length, dtype=np.int64)
    deficit = n - length
    while deficit > 0:
        take = min(deficit, length)
        counts[:take] += 1
        deficit -= take
    return counts


def noncyclic_sample(length: int, n: int, t: int = 0) -> list[int]:
    """Contiguous window for long sequences, in-order duplication for short.

    For length >= n the result is the window [t+1, t+n] with
    t in [0, length-n]. For length < n the first frames are duplicated,
    repeating passes front to back when the deficit exceeds the length;
    the result is nondecreasing and never wraps end to start.
    """
    _check_len("noncyclic_sample", length, n)
    if length >= n:
        if not 0 <= t <= length - n:
            raise ValueError(
                f"noncyclic_sample: start {t} outside [0, {length - n}]")
        return list(range(t + 1, t + n + 1))
    counts = _duplication_counts(length, n)
    return list(np.repeat(np.arange(1, length + 1), counts))


def cyclic_sample(length: int, n: int, t: int = 0) -> list[int]:
    """Contiguous window that wraps past the end back to the first frame."""
    _check_len("cyclic_sample", length, n)
    hi = length - n if length >= n else length - 1
    if not 0 <= t <= hi:
        raise ValueError(f"cyclic_sample: start {t} outside [0, {hi}]")
    return [(t + i) % length + 1 for i in range(n)]


def uniform_sample(length: int, n: int) -> list[int]:
    """Equal-interval sampling with floor spacing, starting at frame 1.

    The stride is floor(length / n); no random phase is applied. A
    sequence shorter than n falls back to the non-cyclic duplication rule.
    """
    _check_len("uniform_sample", length, n)
    if length < n:
        return noncyclic_sample(length, n)
    step = length // n
    return [1 + i * step for i in range(n)]


def sample_indices(strategy: str, length: int, n: int,
                   rng: np.random.Generator) -> list[int]:
    """Draw one index list, letting the generator pick the window start."""
    if strategy == "uniform":
        return uniform_sample(length, n)
    if length >= n:
        t = int(rng.integers(0, length - n + 1))
    elif strategy == "cyclic":
        t = int(rng.integers(0, length))
    else:
        t = 0
    if strategy == "cyclic":
        return cyclic_sample(length, n, t)
    if strategy == "noncyclic":
        return noncyclic_sample(length, n, t)
    raise ValueError(f"sample_indices: unknown strategy {strategy!r}")


def pk_batch(sequences_by_subject: dict[str, list[str]], spec: BatchSpec,
             rng: np.random.Generator) -> list[tuple[str, str]]:
    """Compose a batch of spec.p subjects with spec.k sequences each.

    Subjects are drawn without replacement; a subject with fewer than k
    sequences is padded by resampling its own sequences with
    replacement. Deterministic given the generator state.
    """
    subjects = sorted(sequences_by_subject)
    if len(subjects) < spec.p:
        raise ValueError(
            f"pk_batch: need at least {spec.p} subjects, dataset has "
            f"{len(subjects)}")
    chosen = rng.choice(len(subjects), size=spec.p, replace=False)
    batch: list[tuple[str, str]] = []
    for si in chosen:
        subject = subjects[int(si)]
        seqs = sorted(sequences_by_subject[subject])
        if not seqs:
            raise ValueError(f"pk_batch: subject {subject} has no sequences")
        if len(seqs) >= spec.k:
            picks = rng.choice(len(seqs), size=spec.k, replace=False)
        else:
            picks = rng.integers(0, len(seqs), size=spec.k)
        batch.extend((subject, seqs[int(i)]) for i in picks)
    return batch

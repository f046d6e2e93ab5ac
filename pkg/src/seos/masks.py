"""Minibatch projection masks and their closed-form moments.

Sampling a minibatch of size B out of D examples (without replacement)
acts on residual vectors as a random diagonal 0/1 projection with exactly
B ones.  The second-moment dynamics downstream only ever need the first
two moments of these projections, which have closed forms in terms of the
batch fractions beta = B/D and beta_tilde = (B-1)/(D-1).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class BatchFractions:
    """First- and second-order inclusion probabilities of a minibatch.

    beta is the probability that a given example is in the batch;
    beta_tilde is the probability that a second given example is also in
    the batch, conditioned on the first being in.
    """

    beta: float
    beta_tilde: float

    @classmethod
    def from_counts(cls, dataset_size: int, batch_size: int) -> "BatchFractions":
        _check_counts(dataset_size, batch_size)
        return cls(
            beta=batch_size / dataset_size,
            beta_tilde=(batch_size - 1) / (dataset_size - 1),
        )

    def __post_init__(self) -> None:
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if not (0.0 <= self.beta_tilde <= self.beta):
            raise ValueError(
                f"need 0 <= beta_tilde <= beta, got {self.beta_tilde}, {self.beta}"
            )


@dataclass(frozen=True)
class MinibatchMask:
    """A diagonal projection selecting `batch_size` of `dataset_size` coordinates."""

    indices: np.ndarray  # sorted, unique ints in [0, dataset_size)
    dataset_size: int
    batch_size: int

    def __post_init__(self) -> None:
        _check_counts(self.dataset_size, self.batch_size)
        idx = np.asarray(self.indices, dtype=np.intp)
        if idx.ndim != 1 or idx.size != self.batch_size:
            raise ValueError("mask must hold exactly batch_size indices")
        if np.unique(idx).size != idx.size:
            raise ValueError("mask indices must be distinct")
        if idx.size and (idx.min() < 0 or idx.max() >= self.dataset_size):
            raise ValueError("mask indices out of range")
        object.__setattr__(self, "indices", np.sort(idx))

    @property
    def fractions(self) -> BatchFractions:
        return BatchFractions.from_counts(self.dataset_size, self.batch_size)

    def apply(self, z: np.ndarray) -> np.ndarray:
        """Return P z: zero everywhere except the selected coordinates."""
        z = np.asarray(z, dtype=float)
        if z.shape[0] != self.dataset_size:
            raise ValueError("vector length does not match dataset size")
        out = np.zeros_like(z)
        out[self.indices] = z[self.indices]
        return out

    def as_diagonal(self) -> np.ndarray:
        """Dense 0/1 diagonal vector; for tests and small-D oracles only."""
        d = np.zeros(self.dataset_size)
        d[self.indices] = 1.0
        return d


def sample_mask(
    dataset_size: int, batch_size: int, rng: np.random.Generator
) -> MinibatchMask:
    """Draw a uniformly random B-subset of [0, D) as a projection mask.

    Implemented as a partial Fisher-Yates shuffle (permutation prefix), so
    every subset is exactly equally likely for any B, including B close
    to D.
    """
    _check_counts(dataset_size, batch_size)
    idx = rng.permutation(dataset_size)[:batch_size]
    return MinibatchMask(idx, dataset_size, batch_size)


def enumerate_masks(dataset_size: int, batch_size: int) -> Iterator[MinibatchMask]:
    """All C(D, B) masks, in lexicographic index order.  Small D only."""
    _check_counts(dataset_size, batch_size)
    for combo in combinations(range(dataset_size), batch_size):
        yield MinibatchMask(np.array(combo, dtype=np.intp), dataset_size, batch_size)


def mask_second_moment(
    matrix: np.ndarray, batch_size: int, dataset_size: int
) -> np.ndarray:
    """E[P M P] for one mask P: beta*beta_tilde*M with diagonal beta*diag(M).

    The off-diagonal entries survive only when both coordinates are in the
    batch (probability beta*beta_tilde); diagonal entries survive whenever
    the single coordinate is in (probability beta).
    """
    m = _check_square(matrix, dataset_size)
    fr = BatchFractions.from_counts(dataset_size, batch_size)
    out = fr.beta * fr.beta_tilde * m
    np.fill_diagonal(out, fr.beta * np.diag(m))
    return out


def mask_cross_moment(
    matrix: np.ndarray, batch_size: int, dataset_size: int
) -> np.ndarray:
    """E[P M P'] for two independent masks: beta^2 M."""
    m = _check_square(matrix, dataset_size)
    fr = BatchFractions.from_counts(dataset_size, batch_size)
    return fr.beta**2 * m


def _check_counts(dataset_size: int, batch_size: int) -> None:
    if dataset_size < 2:
        raise ValueError(f"dataset size must be >= 2, got {dataset_size}")
    if not (1 <= batch_size <= dataset_size):
        raise ValueError(
            f"batch size must be in [1, {dataset_size}], got {batch_size}"
        )


def _check_square(matrix: np.ndarray, dataset_size: int) -> np.ndarray:
    m = np.array(matrix, dtype=float)
    if m.shape != (dataset_size, dataset_size):
        raise ValueError(
            f"expected a {dataset_size}x{dataset_size} matrix, got shape {m.shape}"
        )
    return m

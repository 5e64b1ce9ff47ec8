"""k-nearest-neighbor frame matching baseline.

The stored "style" is simply every target frame, so memory grows linearly
with target length; matching is exhaustive, which keeps the implementation
exact and trustworthy as a retrieval oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_K = 4
_EPS = 1e-12


@dataclass
class TargetBank:
    """All target frames as a (T_tgt, D) float32 matrix."""

    frames: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2:
            raise ValueError(f"bank must be 2-D, got shape {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def knn_indices(bank: TargetBank, source: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest bank frames per source frame, cosine distance.

    Ties break toward the lowest bank index. Returns (T_src, k) indices in
    ascending-rank order.
    """
    if bank.num_frames == 0:
        raise ValueError("target bank is empty")
    if not 1 <= k <= bank.num_frames:
        raise ValueError(f"k must be in [1, {bank.num_frames}], got {k}")
    source = np.asarray(source, dtype=np.float64)
    if source.ndim != 2 or source.shape[1] != bank.dim:
        raise ValueError(f"source shape {source.shape} incompatible with bank dim {bank.dim}")

    bank_f = bank.frames.astype(np.float64)
    bank_unit = bank_f / np.maximum(np.linalg.norm(bank_f, axis=1, keepdims=True), _EPS)
    src_unit = source / np.maximum(np.linalg.norm(source, axis=1, keepdims=True), _EPS)
    similarity = src_unit @ bank_unit.T
    # stable sort on negated similarity: equal scores keep index order
    order = np.argsort(-similarity, axis=1, kind="stable")
    return order[:, :k]


def knn_match(bank: TargetBank, source: np.ndarray, k: int = DEFAULT_K) -> np.ndarray:
    """Replace each source frame with the unweighted mean of its k nearest
    bank frames. Output rows therefore lie in the convex hull of the bank.

    The mean is accumulated in ascending bank-index order, so with k equal to
    the bank size every output row is exactly the bank mean.
    """
    idx = np.sort(knn_indices(bank, source, k), axis=1)
    return bank.frames.astype(np.float64)[idx].mean(axis=1)


def bank_memory_bytes(bank: TargetBank) -> int:
    """Bytes needed to store the bank as float32: T_tgt * D * 4."""
    return bank.num_frames * bank.dim * 4

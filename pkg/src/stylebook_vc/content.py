"""Content discretization and encoding.

Frames are quantized against a k-means codebook, which strips per-frame style
variation and keeps only the cluster identity; the unit sequence is then
re-embedded by a transformer encoder shared between source and target speech.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .blocks import TransformerEncoder, sinusoidal_positions


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, dim) float64
    distortion_history: list[float] = field(default_factory=list)

    @property
    def num_units(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (N, K); computed directly so symmetric configurations tie exactly
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _assign(points: np.ndarray, centers: np.ndarray, chunk: int = 4096):
    """Nearest-center assignment (ties to the lowest index) and distortion."""
    n = points.shape[0]
    assignment = np.empty(n, dtype=np.int64)
    distortion = 0.0
    for start in range(0, n, chunk):
        d = _squared_distances(points[start : start + chunk], centers)
        idx = np.argmin(d, axis=1)
        assignment[start : start + chunk] = idx
        distortion += float(d[np.arange(len(idx)), idx].sum())
    return assignment, distortion


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws after a uniform first center."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=points.dtype)
    first = int(rng.integers(0, n))
    centers[0] = points[first]
    closest = _squared_distances(points, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with a center; spread over distinct rows
            remaining = np.flatnonzero(closest > -1)
            centers[i] = points[int(rng.choice(remaining))]
            continue
        probs = closest / total
        choice = int(rng.choice(n, p=probs))
        centers[i] = points[choice]
        closest = np.minimum(closest, _squared_distances(points, centers[i : i + 1])[:, 0])
    return centers


def fit_codebook(features: np.ndarray, num_units: int, iters: int = 25, seed: int = 0) -> Codebook:
    """Lloyd's algorithm with k-means++ initialization.

    Deterministic given the seed. The per-iteration distortion (sum of squared
    distances to the assigned centroid) is recorded and is non-increasing.

    Raises:
        ValueError: fewer than `num_units` distinct frames.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be (frames, dim), got shape {features.shape}")
    if num_units < 2:
        raise ValueError(f"num_units must be >= 2, got {num_units}")
    distinct = np.unique(features, axis=0).shape[0]
    if distinct < num_units:
        raise ValueError(f"need at least {num_units} distinct frames, found {distinct}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(features, num_units, rng)
    history = []
    prev_assignment = None
    for _ in range(iters):
        assignment, distortion = _assign(features, centers)
        history.append(distortion)
        if prev_assignment is not None and np.array_equal(assignment, prev_assignment):
            break
        prev_assignment = assignment
        for k in range(num_units):
            members = features[assignment == k]
            if len(members):  # empty clusters keep their previous centroid
                centers[k] = members.mean(axis=0)
    return Codebook(centroids=centers, distortion_history=history)


def quantize(codebook: Codebook, features: np.ndarray) -> np.ndarray:
    """Map each frame to its nearest centroid (Euclidean, ties to lowest index)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != codebook.dim:
        raise ValueError(
            f"features shape {features.shape} incompatible with codebook dim {codebook.dim}"
        )
    assignment, _ = _assign(features, codebook.centroids)
    return assignment


class ContentEncoder(nn.Module):
    """Unit embeddings + sinusoidal positions + transformer stack.

    The same instance encodes both source and target unit sequences, so the
    two sides share one content space by construction.
    """

    def __init__(
        self,
        num_units: int,
        model_dim: int = 256,
        num_layers: int = 4,
        num_heads: int = 4,
        ff_dim: int = 1024,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        self.num_units = num_units
        self.model_dim = model_dim
        self.unit_embedding = nn.Parameter(
            torch.randn(num_units, model_dim, generator=generator) / model_dim**0.5
        )
        self.encoder = TransformerEncoder(num_layers, model_dim, num_heads, ff_dim, generator)

    def forward(self, units: torch.Tensor, position_offset: int = 0) -> torch.Tensor:
        if units.dtype not in (torch.int64, torch.int32):
            raise ValueError("units must be an integer tensor")
        if units.numel() and (units.min() < 0 or units.max() >= self.num_units):
            raise ValueError(
                f"unit ids must be in [0, {self.num_units}), got range "
                f"[{int(units.min())}, {int(units.max())}]"
            )
        emb = self.unit_embedding[units]
        pos = sinusoidal_positions(
            units.shape[-1], self.model_dim, dtype=emb.dtype, offset=position_offset
        )
        return self.encoder(emb + pos)


def encode_content(encoder: ContentEncoder, units, position_offset: int = 0) -> torch.Tensor:
    """Encode a unit sequence (or batch of them) into content embeddings."""
    if not torch.is_tensor(units):
        units = torch.as_tensor(np.asarray(units), dtype=torch.int64)
    return encoder(units, position_offset=position_offset)

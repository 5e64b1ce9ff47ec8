"""Transposed dual attention: style summarization and retrieval.

Stage one compresses an arbitrary-length target utterance set into a
fixed-size stylebook: a learned query set attends over content embeddings
(keys) and style-encoder outputs (values), so each query row collects the
style evidence for one region of content space. Stage two transposes the
roles: source content embeddings become the queries, the same query set
becomes the keys, and the stylebook rows are the values, yielding one
content-matched style embedding per source frame at O(Q) cost per frame no
matter how much target material was enrolled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .attention import MultiHeadAttention, mha_forward
from .blocks import MLP, ConvStack
from . import fileio


class MelEncoder(MLP):
    """3-layer MLP applied per frame to mel input."""

    def __init__(self, mel_dim: int, hidden: int = 256, generator=None):
        super().__init__([mel_dim, hidden, hidden, hidden], generator=generator)


class StyleEncoder(ConvStack):
    """3-layer kernel-3 CNN over the (mel encoding, content embedding) concat.

    Padding preserves length; the receptive field is +-3 frames.
    """

    def __init__(self, in_dim: int, hidden: int = 256, generator=None):
        super().__init__([in_dim, hidden, hidden, hidden], generator=generator)


def encode_style(
    mel_encoder: MelEncoder,
    style_encoder: StyleEncoder,
    target_mel: torch.Tensor,
    target_content_emb: torch.Tensor,
) -> torch.Tensor:
    """Per-frame style features for a target utterance, length preserved."""
    if target_mel.shape[-2] != target_content_emb.shape[-2]:
        raise ValueError(
            f"mel length {target_mel.shape[-2]} != content length {target_content_emb.shape[-2]}"
        )
    encoded = mel_encoder(target_mel)
    return style_encoder(torch.cat([encoded, target_content_emb], dim=-1))


class QuerySet(nn.Module):
    """Trainable Q x d_q embedding matrix; fixed size for the model lifetime."""

    def __init__(self, num_queries: int = 128, dim: int = 256, generator=None):
        super().__init__()
        self.values = nn.Parameter(
            torch.randn(num_queries, dim, generator=generator) / dim**0.5
        )

    @property
    def num_queries(self) -> int:
        return self.values.shape[0]

    def forward(self):
        return self.values


def build_stylebook(
    summarize_attn: MultiHeadAttention,
    query_set: QuerySet,
    target_content_emb: torch.Tensor,
    target_style_seq: torch.Tensor,
) -> torch.Tensor:
    """Summarize a target's style into Q rows, independent of target length.

    Multiple target utterances are concatenated along the frame axis before
    this call. Output shape is (Q, d_s) (batched inputs get a leading batch
    dim) for any number of target frames.
    """
    if target_content_emb.shape[-2] < 1:
        raise ValueError("cannot build a stylebook from an empty target set")
    if target_content_emb.shape[-2] != target_style_seq.shape[-2]:
        raise ValueError(
            f"content length {target_content_emb.shape[-2]} != style length "
            f"{target_style_seq.shape[-2]}"
        )
    return mha_forward(summarize_attn, query_set(), target_content_emb, target_style_seq)


def retrieve_styles(
    retrieve_attn: MultiHeadAttention,
    source_content_emb: torch.Tensor,
    query_set: QuerySet,
    stylebook: torch.Tensor,
) -> torch.Tensor:
    """Per-frame style lookup: source content queries the fixed stylebook.

    The query/key roles are transposed relative to summarization: the query
    set now serves as keys and the stylebook rows as values. Cost per source
    frame is O(Q), independent of how much target speech was summarized.
    """
    if stylebook.shape[-2] != query_set.num_queries:
        raise ValueError(
            f"stylebook has {stylebook.shape[-2]} rows, query set has {query_set.num_queries}"
        )
    return mha_forward(retrieve_attn, source_content_emb, query_set(), stylebook)


@dataclass
class AttentionProfile:
    """Per-class retrieval-attention statistics over a labeled corpus."""

    class_ids: list[int]  # classes present, ascending
    profiles: np.ndarray  # (C, Q) mean attention weight per class
    similarity: np.ndarray  # (C, C) cosine similarity between class profiles
    empty_classes: list[int]  # classes with no frames, omitted from profiles


def attention_profile(
    retrieve_attn: MultiHeadAttention,
    source_content_embs,
    query_set: QuerySet,
    phone_labels,
    num_classes: int | None = None,
) -> AttentionProfile:
    """Average head-mean retrieval weights per phone class.

    Accepts a single (T, d) embedding tensor with (T,) labels, or parallel
    lists of them. The retrieval pass runs with a placeholder value matrix;
    attention weights depend only on queries and keys, so any value matrix
    with the right row count yields the same map. When `num_classes` is
    given, label values with no frames are reported in `empty_classes`.
    """
    if torch.is_tensor(source_content_embs):
        source_content_embs = [source_content_embs]
        phone_labels = [phone_labels]
    if len(source_content_embs) != len(phone_labels):
        raise ValueError("need one label sequence per embedding sequence")

    q = query_set.num_queries
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    placeholder = torch.zeros(q, retrieve_attn.value_dim, dtype=query_set.values.dtype)
    for emb, labels in zip(source_content_embs, phone_labels):
        labels = np.asarray(labels)
        if emb.shape[-2] != len(labels):
            raise ValueError(f"labels length {len(labels)} != frames {emb.shape[-2]}")
        with torch.no_grad():
            _, weights = retrieve_attn(emb, query_set(), placeholder, return_weights=True)
        mean_heads = weights.mean(dim=-3).cpu().numpy()  # (T, Q)
        for cls in np.unique(labels):
            key = int(cls)
            mask = labels == cls
            if key not in sums:
                sums[key] = np.zeros(q)
                counts[key] = 0
            sums[key] += mean_heads[mask].sum(axis=0)
            counts[key] += int(mask.sum())

    class_ids = sorted(sums)
    profiles = np.stack([sums[c] / counts[c] for c in class_ids]) if class_ids else np.zeros((0, q))
    norms = np.linalg.norm(profiles, axis=1, keepdims=True)
    unit = profiles / np.maximum(norms, 1e-12)
    similarity = unit @ unit.T
    empty = [c for c in range(num_classes or 0) if c not in sums]
    return AttentionProfile(
        class_ids=class_ids,
        profiles=profiles,
        similarity=similarity,
        empty_classes=empty,
    )


@dataclass
class Stylebook:
    """Enrollment artifact: the fixed style summary for one target speaker."""

    values: np.ndarray  # (Q, d_s) float32
    provenance: str = ""

    @property
    def num_rows(self) -> int:
        return self.values.shape[0]

    def save(self, path) -> None:
        fileio.write_stylebook_file(path, self.values, self.provenance)

    @classmethod
    def load(cls, path) -> "Stylebook":
        values, provenance = fileio.read_stylebook_file(path)
        return cls(values=values, provenance=provenance)

    def as_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(self.values, dtype=dtype)

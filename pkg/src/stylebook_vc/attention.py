"""Scaled dot-product multi-head attention with explicit per-head projections.

Query, key, and value inputs may live in different spaces, and the output
projection may change dimensionality; both are needed because the style
summarization and retrieval layers attend across mismatched feature sets.
No positional encoding is applied to keys or values, so the attention output
is invariant under any joint permutation of key/value rows.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def softmax_rows(logits: torch.Tensor) -> torch.Tensor:
    """Row-stabilized softmax over the last axis. Rejects non-finite input."""
    if not torch.isfinite(logits).all():
        raise ValueError("softmax_rows: input contains non-finite values")
    shifted = logits - logits.amax(dim=-1, keepdim=True)
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=-1, keepdim=True)


def _init_projection(shape, fan_in: int, generator, dtype) -> nn.Parameter:
    std = 1.0 / math.sqrt(fan_in)
    return nn.Parameter(torch.randn(*shape, generator=generator, dtype=dtype) * std)


class MultiHeadAttention(nn.Module):
    """Multi-head attention parameterized by per-head projection matrices.

    Args:
        num_heads: number of attention heads; must divide model_dim.
        model_dim: total attention width (num_heads * head_dim).
        query_dim / key_dim / value_dim: input widths of each stream
            (default model_dim).
        out_dim: width after the output projection (default model_dim).
    """

    def __init__(
        self,
        num_heads: int,
        model_dim: int,
        query_dim: int | None = None,
        key_dim: int | None = None,
        value_dim: int | None = None,
        out_dim: int | None = None,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if num_heads < 1:
            raise ValueError(f"num_heads must be >= 1, got {num_heads}")
        if model_dim % num_heads != 0:
            raise ValueError(f"model_dim {model_dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.model_dim = model_dim
        self.head_dim = model_dim // num_heads
        self.query_dim = query_dim or model_dim
        self.key_dim = key_dim or model_dim
        self.value_dim = value_dim or model_dim
        self.out_dim = out_dim or model_dim

        h, hd = num_heads, self.head_dim
        self.w_query = _init_projection((h, self.query_dim, hd), self.query_dim, generator, dtype)
        self.w_key = _init_projection((h, self.key_dim, hd), self.key_dim, generator, dtype)
        self.w_value = _init_projection((h, self.value_dim, hd), self.value_dim, generator, dtype)
        self.w_out = _init_projection((h * hd, self.out_dim), h * hd, generator, dtype)

    def forward(
        self,
        queries: torch.Tensor,
        keys: torch.Tensor,
        values: torch.Tensor,
        return_weights: bool = False,
    ):
        """Attend queries over keys/values.

        Inputs are (..., rows, dim); leading batch dims broadcast against each
        other, so an unbatched query set can attend over batched keys.
        Returns (..., query_rows, out_dim), plus the per-head attention
        weights (..., heads, query_rows, key_rows) when requested.
        """
        if queries.shape[-1] != self.query_dim:
            raise ValueError(f"query dim {queries.shape[-1]} != expected {self.query_dim}")
        if keys.shape[-1] != self.key_dim:
            raise ValueError(f"key dim {keys.shape[-1]} != expected {self.key_dim}")
        if values.shape[-1] != self.value_dim:
            raise ValueError(f"value dim {values.shape[-1]} != expected {self.value_dim}")
        if keys.shape[-2] != values.shape[-2]:
            raise ValueError(f"key rows {keys.shape[-2]} != value rows {values.shape[-2]}")
        if keys.shape[-2] < 1:
            raise ValueError("attention needs at least one key/value row")

        q = torch.einsum("...rd,hde->...hre", queries, self.w_query)
        k = torch.einsum("...td,hde->...hte", keys, self.w_key)
        v = torch.einsum("...td,hde->...hte", values, self.w_value)
        scores = torch.einsum("...hre,...hte->...hrt", q, k) / math.sqrt(self.head_dim)
        weights = softmax_rows(scores)
        context = torch.einsum("...hrt,...hte->...hre", weights, v)
        merged = context.movedim(-3, -2).flatten(-2)  # (..., rows, heads * head_dim)
        out = merged @ self.w_out
        if return_weights:
            return out, weights
        return out


def mha_forward(
    params: MultiHeadAttention,
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
) -> torch.Tensor:
    """Functional entry point: one attention pass, output rows = query rows."""
    return params(queries, keys, values)

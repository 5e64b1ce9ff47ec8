"""Small differentiable building blocks shared across the model.

Every trainable weight is drawn from N(0, 1/fan_in) using an explicit torch
generator, so model construction is reproducible from a seed alone. Biases
start at zero. Activations are GELU throughout (smooth, so finite-difference
gradient checks are clean).
"""

from __future__ import annotations

import math

import torch
from torch import nn
import torch.nn.functional as F


def init_linear_(module: nn.Linear | nn.Conv1d, generator: torch.Generator | None) -> None:
    """Re-initialize a torch layer with the package-wide scheme."""
    weight = module.weight
    fan_in = weight.shape[1] * (weight.shape[2] if weight.dim() == 3 else 1)
    with torch.no_grad():
        weight.copy_(torch.randn(weight.shape, generator=generator) / math.sqrt(fan_in))
        if module.bias is not None:
            module.bias.zero_()


def make_linear(in_dim: int, out_dim: int, generator=None) -> nn.Linear:
    layer = nn.Linear(in_dim, out_dim)
    init_linear_(layer, generator)
    return layer


def make_conv1d(in_ch: int, out_ch: int, kernel_size: int, generator=None, padding=0) -> nn.Conv1d:
    layer = nn.Conv1d(in_ch, out_ch, kernel_size, padding=padding)
    init_linear_(layer, generator)
    return layer


class ChannelNorm(nn.Module):
    """Per-frame normalization over the channel axis of (B, C, T) input.

    Well-defined for any batch size and sequence length, including T=1.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels, 1))
        self.bias = nn.Parameter(torch.zeros(channels, 1))

    def forward(self, x):
        mean = x.mean(dim=-2, keepdim=True)
        var = x.var(dim=-2, keepdim=True, unbiased=False)
        return (x - mean) / torch.sqrt(var + self.eps) * self.gain + self.bias


class MLP(nn.Module):
    """Stack of linear layers with GELU between them (none after the last)."""

    def __init__(self, dims: list[int], generator=None):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("MLP needs at least an input and an output dim")
        self.layers = nn.ModuleList(
            make_linear(dims[i], dims[i + 1], generator) for i in range(len(dims) - 1)
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class ConvStack(nn.Module):
    """Kernel-3, length-preserving 1-D convolution stack over (..., T, C) input."""

    def __init__(self, channels: list[int], generator=None):
        super().__init__()
        if len(channels) < 2:
            raise ValueError("ConvStack needs at least input and output channels")
        self.convs = nn.ModuleList(
            make_conv1d(channels[i], channels[i + 1], 3, generator, padding=1)
            for i in range(len(channels) - 1)
        )

    def forward(self, x):
        # conv1d wants (batch, channels, time)
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        h = x.movedim(-1, -2)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.gelu(h)
        h = h.movedim(-2, -1)
        return h.squeeze(0) if squeeze else h


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32, offset: int = 0) -> torch.Tensor:
    """Fixed transformer positional table for positions offset..offset+length-1."""
    positions = torch.arange(offset, offset + length, dtype=dtype).unsqueeze(1)
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=dtype) * (-math.log(10000.0) / max(half - 1, 1)))
    angles = positions * freqs
    table = torch.zeros(length, dim, dtype=dtype)
    table[:, 0::2] = torch.sin(angles)
    table[:, 1::2] = torch.cos(angles[:, : dim - half])
    return table


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Embed diffusion times t in (0, 1] as (batch, dim) sinusoidal features."""
    t = torch.as_tensor(t)
    if t.dim() == 0:
        t = t.unsqueeze(0)
    half = dim // 2
    freqs = torch.exp(
        torch.arange(half, dtype=t.dtype) * (-math.log(10000.0) / max(half - 1, 1))
    )
    angles = t.unsqueeze(-1) * 1000.0 * freqs
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def softmax_cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of row-softmax logits against integer targets."""
    log_norm = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (log_norm - picked).mean()


class TransformerEncoderLayer(nn.Module):
    """Pre-norm transformer layer: self-attention then a GELU feed-forward."""

    def __init__(self, model_dim: int, num_heads: int, ff_dim: int, generator=None):
        super().__init__()
        from .attention import MultiHeadAttention

        self.attn_norm = nn.LayerNorm(model_dim)
        self.self_attn = MultiHeadAttention(num_heads, model_dim, generator=generator)
        self.ff_norm = nn.LayerNorm(model_dim)
        self.ff = MLP([model_dim, ff_dim, model_dim], generator=generator)

    def forward(self, x):
        h = self.attn_norm(x)
        x = x + self.self_attn(h, h, h)
        x = x + self.ff(self.ff_norm(x))
        return x


class TransformerEncoder(nn.Module):
    def __init__(self, num_layers: int, model_dim: int, num_heads: int, ff_dim: int, generator=None):
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerEncoderLayer(model_dim, num_heads, ff_dim, generator)
            for _ in range(num_layers)
        )
        self.final_norm = nn.LayerNorm(model_dim)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)

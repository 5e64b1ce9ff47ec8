"""The full conversion model: one bundle wiring every trainable piece.

Submodules are constructed in a fixed order from a single generator, so a
seed fully determines the initial parameters.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import fileio
from .attention import MultiHeadAttention
from .blocks import make_linear
from .content import Codebook, ContentEncoder
from .diffusion import ScoreNetwork
from .stylebook import MelEncoder, QuerySet, StyleEncoder, encode_style


@dataclass(frozen=True)
class ModelConfig:
    """Architecture dimensions; defaults match the reference configuration."""

    num_units: int = 100
    content_dim: int = 256
    content_layers: int = 4
    content_heads: int = 4
    content_ff_dim: int = 1024
    query_count: int = 128
    query_dim: int = 256
    style_dim: int = 64
    dual_attention_heads: int = 2
    dual_attention_dim: int = 256
    mel_hidden: int = 256
    style_hidden: int = 256
    unet_base_dim: int = 128
    unet_levels: int = 3
    time_dim: int = 128
    mel_dim: int = 64

    def validate(self) -> None:
        for field in dataclasses.fields(self):
            if getattr(self, field.name) < 1:
                raise ValueError(f"{field.name} must be >= 1")
        if self.query_dim != self.content_dim:
            raise ValueError("query_dim must equal content_dim (queries meet content keys)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ConversionModel(nn.Module):
    """Content encoder, style summarization/retrieval, and diffusion decoder."""

    def __init__(self, config: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        config.validate()
        self.config = config
        c = config
        self.content_encoder = ContentEncoder(
            c.num_units, c.content_dim, c.content_layers, c.content_heads, c.content_ff_dim, generator
        )
        self.mel_encoder = MelEncoder(c.mel_dim, c.mel_hidden, generator)
        self.style_encoder = StyleEncoder(c.mel_hidden + c.content_dim, c.style_hidden, generator)
        self.query_set = QuerySet(c.query_count, c.query_dim, generator)
        self.summarize_attn = MultiHeadAttention(
            c.dual_attention_heads,
            c.dual_attention_dim,
            query_dim=c.query_dim,
            key_dim=c.content_dim,
            value_dim=c.style_hidden,
            out_dim=c.style_dim,
            generator=generator,
        )
        self.retrieve_attn = MultiHeadAttention(
            c.dual_attention_heads,
            c.dual_attention_dim,
            query_dim=c.content_dim,
            key_dim=c.query_dim,
            value_dim=c.style_dim,
            out_dim=c.style_dim,
            generator=generator,
        )
        self.prior_proj = make_linear(c.content_dim, c.mel_dim, generator)
        self.score_net = ScoreNetwork(
            c.mel_dim, c.content_dim, c.style_dim, c.unet_base_dim, c.unet_levels, c.time_dim, generator
        )
        self.uncond_style = nn.Parameter(
            torch.randn(c.style_dim, generator=generator) / c.style_dim**0.5
        )

    def style_path(self, mel: torch.Tensor, content_emb: torch.Tensor) -> torch.Tensor:
        """Training-time style route: each element summarizes itself.

        Builds a per-element stylebook from (mel, content) and retrieves one
        style embedding per frame with the transposed attention pass.
        """
        from .stylebook import build_stylebook, retrieve_styles

        style_seq = encode_style(self.mel_encoder, self.style_encoder, mel, content_emb)
        book = build_stylebook(self.summarize_attn, self.query_set, content_emb, style_seq)
        return retrieve_styles(self.retrieve_attn, content_emb, self.query_set, book)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {
            name: param.detach().cpu().numpy().astype(np.float32)
            for name, param in self.state_dict().items()
        }

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = {name: torch.as_tensor(arr) for name, arr in arrays.items()}
        self.load_state_dict(state)


def save_checkpoint(
    path,
    model: ConversionModel,
    codebook: Codebook,
    meta: dict | None = None,
) -> None:
    """Store model weights, the codebook, and run metadata in one container."""
    tensors = {f"model.{k}": v for k, v in model.state_arrays().items()}
    tensors["codebook.centroids"] = codebook.centroids.astype(np.float32)
    full_meta = {"model_config": model.config.to_dict()}
    full_meta.update(meta or {})
    fileio.save_tensors(path, tensors, full_meta)


def load_checkpoint(path) -> tuple[ConversionModel, Codebook, dict]:
    tensors, meta = fileio.load_tensors(path)
    config = ModelConfig.from_dict(meta["model_config"])
    model = ConversionModel(config)
    model.load_state_arrays(
        {k[len("model.") :]: v for k, v in tensors.items() if k.startswith("model.")}
    )
    codebook = Codebook(centroids=tensors["codebook.centroids"].astype(np.float64))
    return model, codebook, meta

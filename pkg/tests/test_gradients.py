"""Finite-difference validation of every trainable block's gradients."""

import pytest
import torch
from torch import nn

from stylebook_vc.attention import MultiHeadAttention
from stylebook_vc.blocks import make_linear, softmax_cross_entropy
from stylebook_vc.diffusion import DiffusionSchedule, forward_perturb, training_loss
from stylebook_vc.gradcheck import grad_check, nonzero_gradient_fractions
from stylebook_vc.model import ConversionModel, ModelConfig
from stylebook_vc.stylebook import MelEncoder, StyleEncoder, encode_style

GRAD_MODEL = ModelConfig(
    num_units=6,
    content_dim=8,
    content_layers=1,
    content_heads=2,
    content_ff_dim=16,
    query_count=4,
    query_dim=8,
    style_dim=4,
    dual_attention_heads=2,
    dual_attention_dim=8,
    mel_hidden=8,
    style_hidden=8,
    unet_base_dim=4,
    unet_levels=2,
    time_dim=4,
    mel_dim=4,
)


class _SoftmaxXent(nn.Module):
    def __init__(self, targets):
        super().__init__()
        self.register_buffer("targets", targets)

    def forward(self, logits):
        return softmax_cross_entropy(logits, self.targets)


class _EncodeStyle(nn.Module):
    def __init__(self, mel_dim, content_dim, hidden, generator):
        super().__init__()
        self.mel_encoder = MelEncoder(mel_dim, hidden, generator)
        self.style_encoder = StyleEncoder(hidden + content_dim, hidden, generator)

    def forward(self, mel, cemb):
        return encode_style(self.mel_encoder, self.style_encoder, mel, cemb)


class _FrozenTotalLoss(nn.Module):
    """Full training objective with the sampling randomness frozen in buffers."""

    def __init__(self, model, schedule, units, t, noise):
        super().__init__()
        self.model = model
        self.schedule = schedule
        self.register_buffer("units", units)
        self.register_buffer("t", t)
        self.register_buffer("noise", noise)

    def forward(self, mel):
        model = self.model
        cemb = model.content_encoder(self.units)
        mu = model.prior_proj(cemb)
        style = model.style_path(mel, cemb)
        x_t = forward_perturb(mel, mu, self.t, self.noise.to(mel.dtype), self.schedule)
        eps_hat = model.score_net(x_t, cemb, style, self.t, mu)
        loss_diff = ((eps_hat - self.noise.to(mel.dtype)) ** 2).mean()
        loss_enc = ((mu - mel) ** 2).mean()
        return loss_diff + loss_enc


def test_linear_layer_gradients_are_exact():
    layer = make_linear(5, 3, torch.Generator().manual_seed(0))
    x = torch.randn(4, 5, generator=torch.Generator().manual_seed(1))
    assert grad_check(layer, (x,)) < 1e-7


def test_softmax_cross_entropy_gradients():
    gen = torch.Generator().manual_seed(2)
    logits = torch.randn(6, 5, generator=gen)
    targets = torch.randint(0, 5, (6,), generator=gen)
    assert grad_check(_SoftmaxXent(targets), (logits,)) < 1e-5


def test_mha_block_gradients():
    gen = torch.Generator().manual_seed(3)
    mha = MultiHeadAttention(2, 8, generator=gen)
    q = torch.randn(3, 8, generator=gen)
    k = torch.randn(5, 8, generator=gen)
    v = torch.randn(5, 8, generator=gen)
    assert grad_check(mha, (q, k, v)) < 1e-4


def test_style_encoder_gradients():
    gen = torch.Generator().manual_seed(4)
    block = _EncodeStyle(mel_dim=4, content_dim=6, hidden=8, generator=gen)
    mel = torch.randn(5, 4, generator=gen)
    cemb = torch.randn(5, 6, generator=gen)
    assert grad_check(block, (mel, cemb)) < 1e-4


def test_full_training_loss_gradients():
    gen = torch.Generator().manual_seed(5)
    model = ConversionModel(GRAD_MODEL, gen)
    units = torch.randint(0, GRAD_MODEL.num_units, (2, 6), generator=gen)
    mel = torch.randn(2, 6, GRAD_MODEL.mel_dim, generator=gen)
    t = torch.tensor([0.7, 0.3])
    noise = torch.randn(2, 6, GRAD_MODEL.mel_dim, generator=gen)
    block = _FrozenTotalLoss(model, DiffusionSchedule(), units, t, noise)
    assert grad_check(block, (mel,)) < 1e-4


def test_grad_check_epsilon_domain():
    layer = make_linear(2, 2, torch.Generator().manual_seed(0))
    x = torch.randn(1, 2)
    with pytest.raises(ValueError, match="epsilon"):
        grad_check(layer, (x,), epsilon=1e-2)


def test_no_dead_parameters_in_stylebook_path():
    # with style dropout off, every stylebook-path parameter must receive a
    # nonzero gradient from the end-to-end loss on a random batch
    gen = torch.Generator().manual_seed(6)
    model = ConversionModel(GRAD_MODEL, gen)
    schedule = DiffusionSchedule(uncond_drop_prob=0.0)
    batch = {
        "mel": torch.randn(2, 8, GRAD_MODEL.mel_dim, generator=gen),
        "units": torch.randint(0, GRAD_MODEL.num_units, (2, 8), generator=gen),
    }
    total, _, _ = training_loss(model, batch, schedule, gen)
    path_modules = {
        "query_set": model.query_set,
        "summarize_attn": model.summarize_attn,
        "retrieve_attn": model.retrieve_attn,
        "mel_encoder": model.mel_encoder,
        "style_encoder": model.style_encoder,
    }
    named = [
        (f"{prefix}.{name}", param)
        for prefix, module in path_modules.items()
        for name, param in module.named_parameters()
    ]
    fractions = nonzero_gradient_fractions(total, named)
    dead = {name: frac for name, frac in fractions.items() if frac == 0.0}
    assert not dead, f"dead parameters: {sorted(dead)}"


def test_unconditional_embedding_trains_when_dropped():
    gen = torch.Generator().manual_seed(7)
    model = ConversionModel(GRAD_MODEL, gen)
    schedule = DiffusionSchedule(uncond_drop_prob=1.0)
    batch = {
        "mel": torch.randn(2, 8, GRAD_MODEL.mel_dim, generator=gen),
        "units": torch.randint(0, GRAD_MODEL.num_units, (2, 8), generator=gen),
    }
    total, _, _ = training_loss(model, batch, schedule, gen)
    fractions = nonzero_gradient_fractions(total, [("uncond_style", model.uncond_style)])
    assert fractions["uncond_style"] > 0.0

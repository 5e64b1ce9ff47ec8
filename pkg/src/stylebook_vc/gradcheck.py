"""Finite-difference validation of the analytic (autograd) gradients.

Every trainable block in this package is checked by comparing its reverse-mode
gradients against central differences in double precision. The probe loss is a
fixed pseudo-random weighting of the block output, so non-scalar blocks are
covered coordinate-by-coordinate without a separate loss definition.
"""

from __future__ import annotations

import copy

import torch
from torch import nn


def _probe_weights(shape, dtype) -> torch.Tensor:
    gen = torch.Generator().manual_seed(0x5EED)
    return torch.randn(shape, generator=gen, dtype=torch.float64).to(dtype)


def _scalar_loss(block: nn.Module, inputs: tuple) -> torch.Tensor:
    out = block(*inputs)
    if out.dim() == 0:
        return out
    return (out * _probe_weights(out.shape, out.dtype)).sum()


def grad_check(
    block: nn.Module,
    inputs: tuple | list,
    epsilon: float = 1e-5,
    wrt_inputs: bool = True,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    The block and inputs are copied to float64 before checking; the original
    objects are untouched. Relative error is normalized per tensor by the
    largest gradient magnitude, so coordinates with near-zero gradients are
    judged against the tensor's own scale.

    Args:
        block: module whose forward is differentiable at the given inputs;
            scalar outputs are used directly, others through a fixed probe.
        inputs: tensors to call the block with.
        epsilon: central-difference step, in [1e-7, 1e-3].
        wrt_inputs: also check gradients with respect to the inputs.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must be in [1e-7, 1e-3], got {epsilon}")

    block = copy.deepcopy(block).double()
    inputs = tuple(
        x.detach().double().requires_grad_(x.is_floating_point()) if torch.is_tensor(x) else x
        for x in inputs
    )

    loss = _scalar_loss(block, inputs)
    params = [p for p in block.parameters() if p.requires_grad]
    diff_inputs = [x for x in inputs if torch.is_tensor(x) and x.requires_grad] if wrt_inputs else []
    grads = torch.autograd.grad(loss, params + diff_inputs, allow_unused=True)

    max_rel = 0.0
    for tensor, grad in zip(params + diff_inputs, grads):
        analytic = torch.zeros_like(tensor) if grad is None else grad
        numeric = torch.empty_like(tensor)
        flat = tensor.data.view(-1)
        num_flat = numeric.view(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + epsilon
            hi = _scalar_loss(block, inputs).item()
            flat[j] = orig - epsilon
            lo = _scalar_loss(block, inputs).item()
            flat[j] = orig
            num_flat[j] = (hi - lo) / (2.0 * epsilon)
        scale = max(analytic.abs().max().item(), numeric.abs().max().item(), 1e-6)
        rel = (analytic - numeric).abs().max().item() / scale
        max_rel = max(max_rel, rel)
    return max_rel


def nonzero_gradient_fractions(loss: torch.Tensor, named_params) -> dict[str, float]:
    """Fraction of nonzero gradient entries per parameter for a scalar loss."""
    named_params = list(named_params)
    grads = torch.autograd.grad(
        loss, [p for _, p in named_params], allow_unused=True, retain_graph=True
    )
    out = {}
    for (name, param), grad in zip(named_params, grads):
        if grad is None:
            out[name] = 0.0
        else:
            out[name] = (grad != 0).double().mean().item()
    return out

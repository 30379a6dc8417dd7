"""Differentiable operators used by the network, and a finite-difference gradient checker.

Tensors are ``N x C x H x W``. Analytic gradients come from torch autograd; the checker
below is an independent central-difference estimate.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError

SPARSE_EPS = 1e-8

relu = torch.relu
sigmoid = torch.sigmoid


def concat(*tensors: torch.Tensor) -> torch.Tensor:
    return torch.cat(tensors, dim=1)


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1) -> torch.Tensor:
    """Convolution with 'same' zero padding for odd kernels."""
    return F.conv2d(x, weight, bias, stride=stride, padding=weight.shape[-1] // 2)


def sparse_conv(x: torch.Tensor, mask: torch.Tensor, weight: torch.Tensor,
                bias: torch.Tensor | None = None, eps: float = SPARSE_EPS):
    """Sparsity-invariant convolution.

    ``y = (K * (x . m)) / (ones * m + eps) + bias`` and the output mask is the max-pool
    of ``m`` over the kernel footprint. Returns ``(y, mask_out)``.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    k = weight.shape[-1]
    num = conv2d(x * mask, weight)
    ones = torch.ones((1, 1, k, k), dtype=mask.dtype, device=mask.device)
    den = conv2d(mask, ones) + eps
    y = num / den
    if bias is not None:
        y = y + bias.view(1, -1, 1, 1)
    mask_out = F.max_pool2d(mask, k, stride=1, padding=k // 2)
    return y, mask_out


def avg_pool_stride(c: torch.Tensor, stride: int) -> torch.Tensor:
    """Mean over non-overlapping ``stride x stride`` blocks."""
    h, w = c.shape[-2:]
    if h % stride or w % stride:
        raise ConfigError(f"stride {stride} does not divide grid {h}x{w}")
    if stride == 1:
        return c
    return F.avg_pool2d(c, kernel_size=stride, stride=stride)


def upsample2x(x: torch.Tensor) -> torch.Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class ResidualBlock(nn.Module):
    """conv-relu-conv with an identity skip, followed by relu."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return relu(x + self.conv2(relu(self.conv1(x))))


class SparseConv(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, eps: float = SPARSE_EPS):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.eps = eps

    def forward(self, x, mask):
        return sparse_conv(x, mask, self.weight, self.bias, self.eps)


def grad_check(fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
               params: Mapping[str, torch.Tensor], eps: float = 1e-6,
               n_coords: int | None = None, seed: int = 0) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``fn`` maps the parameter dict to a scalar and must be deterministic. Parameters are
    perturbed in place and restored. With ``n_coords`` a random subsample of all
    coordinates is checked. Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ConfigError(f"eps={eps} outside [1e-7, 1e-4]")
    names = list(params)
    tensors = [params[n] for n in names]
    for t in tensors:
        t.requires_grad_(True)

    value = fn(params)
    if not torch.isfinite(value):
        raise NumericError("non-finite function value at the base point")
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    grads = [torch.zeros(t.numel(), dtype=t.dtype) if g is None else g.detach().reshape(-1)
             for t, g in zip(tensors, grads)]

    sizes = np.array([t.numel() for t in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    coords = np.arange(total)
    if n_coords is not None and n_coords < total:
        coords = np.sort(np.random.default_rng(seed).choice(total, size=n_coords, replace=False))

    worst = 0.0
    with torch.no_grad():
        for c in coords:
            k = int(np.searchsorted(offsets, c, side="right") - 1)
            j = int(c - offsets[k])
            flat = tensors[k].view(-1)
            orig = flat[j].item()
            flat[j] = orig + eps
            f_plus = fn(params)
            flat[j] = orig - eps
            f_minus = fn(params)
            flat[j] = orig
            if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                raise NumericError(f"non-finite function value perturbing {names[k]}[{j}]")
            numeric = (f_plus.item() - f_minus.item()) / (2.0 * eps)
            analytic = grads[k][j].item()
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
            worst = max(worst, rel)
    return worst

"""
Binarization primitives: sign with a clipped straight-through gradient,
channel-wise weight normalization, the learnable Bi-Transformation of the
k x k weight patch, simulated XNOR convolution, ReActNet RSign / RPReLU and
the LSQ 8-bit quantizer used by the stem.
"""
import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import NasBnnError

WN_EPS = 1e-5


class BinOpsError(NasBnnError):
    """Shape or divisibility error in a binary primitive."""
    pass


class SignSTE(torch.autograd.Function):
    """sign(x) with 0 -> +1; gradient passes where |x| <= 1."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return torch.where(x >= 0, torch.ones_like(x), -torch.ones_like(x))

    @staticmethod
    def backward(ctx, grad_output):
        x, = ctx.saved_tensors
        return grad_output * (x.abs() <= 1).to(grad_output.dtype)


def sign_ste(x: torch.Tensor) -> torch.Tensor:
    return SignSTE.apply(x)


def weight_normalize(weight: torch.Tensor, eps: float = WN_EPS) -> torch.Tensor:
    """Standardize each output channel: (W - mean) / sqrt(var + eps), population variance."""
    if weight.dim() < 2:
        raise BinOpsError(f"weight must have an output-channel axis, got shape {tuple(weight.shape)}")
    flat = weight.reshape(weight.shape[0], -1)
    if flat.shape[1] < 2:
        raise BinOpsError("weight normalization needs at least 2 elements per output channel")
    mean = flat.mean(dim=1, keepdim=True)
    var = flat.var(dim=1, unbiased=False, keepdim=True)
    return ((flat - mean) / torch.sqrt(var + eps)).reshape(weight.shape)


def bi_transform(weight: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    """
    Map every flattened k x k patch through the top-left k^2 x k^2 block of theta.

    Args:
        weight: [out, in / groups, k, k]
        theta: square matrix with side >= k^2

    Returns:
        Tensor of the same shape as weight
    """
    if weight.dim() != 4 or weight.shape[-1] != weight.shape[-2]:
        raise BinOpsError(f"expected a [out, in, k, k] weight, got shape {tuple(weight.shape)}")
    n = weight.shape[-1] ** 2
    if theta.dim() != 2 or theta.shape[0] != theta.shape[1] or theta.shape[0] < n:
        raise BinOpsError(f"theta of shape {tuple(theta.shape)} cannot transform {n}-element patches")
    return (weight.reshape(-1, n) @ theta[:n, :n].contiguous()).reshape(weight.shape)


def binary_conv(x_b: torch.Tensor, w_pre: torch.Tensor, groups: int = 1, stride: int = 1,
                padding: Optional[int] = None, scale: bool = True) -> torch.Tensor:
    """
    Simulated XNOR convolution of ±1 activations with sign(w_pre).

    With scale=True each output channel is multiplied by alpha = mean|w_pre|
    (detached); with scale=False outputs are the exact ±1 dot-product sums.
    """
    c_in = x_b.shape[1]
    if groups <= 0 or c_in % groups or w_pre.shape[0] % groups:
        raise BinOpsError(f"groups {groups} must divide input channels {c_in} and filters {w_pre.shape[0]}")
    if w_pre.shape[1] * groups != c_in:
        raise BinOpsError(f"weight expects {w_pre.shape[1] * groups} input channels, got {c_in}")
    if padding is None:
        padding = w_pre.shape[-1] // 2
    out = F.conv2d(x_b, sign_ste(w_pre), stride=stride, padding=padding, groups=groups)
    if scale:
        alpha = w_pre.abs().mean(dim=(1, 2, 3)).detach()
        out = out * alpha.view(1, -1, 1, 1)
    return out


class RSign(nn.Module):
    """Sign with a learnable per-channel threshold, sized at max width and sliced by input width."""

    def __init__(self, channels: int):
        super().__init__()
        self.shift = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor, detach: bool = False) -> torch.Tensor:
        shift = self.shift[:x.shape[1]]
        if detach:
            shift = shift.detach()
        return sign_ste(x + shift.view(1, -1, 1, 1))


class RPReLU(nn.Module):
    """PReLU with learnable input and output shifts: prelu(x - gamma, beta) + zeta."""

    def __init__(self, channels: int, init_slope: float = 0.25):
        super().__init__()
        self.shift_in = nn.Parameter(torch.zeros(channels))
        self.slope = nn.Parameter(torch.full((channels,), init_slope))
        self.shift_out = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor, detach: bool = False) -> torch.Tensor:
        c = x.shape[1]
        shift_in, slope, shift_out = self.shift_in[:c], self.slope[:c], self.shift_out[:c]
        if detach:
            shift_in, slope, shift_out = shift_in.detach(), slope.detach(), shift_out.detach()
        return F.prelu(x - shift_in.view(1, -1, 1, 1), slope) + shift_out.view(1, -1, 1, 1)


def _grad_scale(x: torch.Tensor, scale: float) -> torch.Tensor:
    y = x * scale
    return (x - y).detach() + y


def _round_ste(x: torch.Tensor) -> torch.Tensor:
    return (x.round() - x).detach() + x


class LsqQuantizer(nn.Module):
    """Signed fake quantizer with a learnable step size (LSQ)."""

    def __init__(self, bits: int = 8, init_step: float = 1.0):
        super().__init__()
        self.bits = bits
        self.qn = -(2 ** (bits - 1))
        self.qp = 2 ** (bits - 1) - 1
        self.step = nn.Parameter(torch.tensor(float(init_step)))

    @torch.no_grad()
    def init_from(self, x: torch.Tensor) -> None:
        self.step.copy_(2 * x.abs().mean() / math.sqrt(self.qp))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g = 1.0 / math.sqrt(x.numel() * self.qp)
        step = _grad_scale(self.step, g)
        return _round_ste(torch.clamp(x / step, self.qn, self.qp)) * step

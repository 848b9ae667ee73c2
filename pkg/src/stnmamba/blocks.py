"""Composite blocks: VSSB, MS-VSSB, CA-VSSB, ECA and the patch layers.

All modules take and return channels-last maps ``(B, H, W, C)``.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError
from .ssm import SS2D


def _check_channels(x, c):
    if x.shape[-1] != c:
        raise ShapeError("channels", "expected %d, got %d" % (c, x.shape[-1]))


class DWConv(nn.Module):
    """Depth-wise ``k x k`` convolution with same padding on channels-last maps."""

    def __init__(self, channels, kernel_size=3, bias=True):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2,
                              groups=channels, bias=bias)

    def forward(self, x):
        return self.conv(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)


class VSSB(nn.Module):
    """Visual state-space block.

    ``x + out(silu(gate(x)) * LN(SS2D(silu(dwconv(proj(x))))))``
    """

    def __init__(self, dim, expand=2, d_state=16, conv_kernel=3):
        super().__init__()
        inner = int(expand * dim)
        self.dim = dim
        self.gate_proj = nn.Linear(dim, inner)
        self.in_proj = nn.Linear(dim, inner)
        self.dwconv = DWConv(inner, conv_kernel)
        self.ss2d = SS2D(inner, d_state)
        self.norm = nn.LayerNorm(inner)
        self.out_proj = nn.Linear(inner, dim)

    def forward(self, x):
        _check_channels(x, self.dim)
        x1 = F.silu(self.gate_proj(x))
        x2 = self.norm(self.ss2d(F.silu(self.dwconv(self.in_proj(x)))))
        return x + self.out_proj(x1 * x2)


class MSVSSB(nn.Module):
    """Multi-scale VSSB: parallel 1/3/5 depth-wise convs ahead of a VSSB."""

    kernels = (1, 3, 5)

    def __init__(self, dim, expand=2, d_state=16, conv_kernel=3):
        super().__init__()
        inner = int(expand * dim)
        self.dim = dim
        self.ms_in = nn.Linear(dim, inner)
        self.ms_convs = nn.ModuleList(DWConv(inner, k, bias=False) for k in self.kernels)
        self.ms_out = nn.Linear(inner, dim)
        self.vssb = VSSB(dim, expand, d_state, conv_kernel)

    def multiscale(self, x):
        h = F.gelu(self.ms_in(x))
        return self.ms_out(sum(conv(h) for conv in self.ms_convs))

    def forward(self, x):
        _check_channels(x, self.dim)
        return self.vssb(x + self.multiscale(x))


class CAVSSB(nn.Module):
    """Channel-aware VSSB: VSSB followed by a pooled channel-attention residual."""

    def __init__(self, dim, expand=2, d_state=16, conv_kernel=3):
        super().__init__()
        self.dim = dim
        self.vssb = VSSB(dim, expand, d_state, conv_kernel)
        self.att_proj = nn.Linear(dim, dim)
        self.att_norm = nn.LayerNorm(dim)

    def gate(self, xp):
        """Per-channel gate in (0, 1) from global average + max pooling, ``(B, 1, 1, C)``."""
        avg = xp.mean(dim=(1, 2), keepdim=True)
        mx = xp.amax(dim=(1, 2), keepdim=True)
        return torch.sigmoid(avg + mx)

    def forward(self, x):
        _check_channels(x, self.dim)
        x1 = self.vssb(x)
        xp = self.att_norm(self.att_proj(x1))
        return x1 + xp * self.gate(xp)


def eca_kernel_size(channels, gamma=2, b=1):
    t = int(abs((math.log2(channels) + b) / gamma))
    k = t if t % 2 else t + 1
    return max(k, 3)


class ECA(nn.Module):
    """Efficient channel attention: a 1D conv across pooled channel means."""

    def __init__(self, channels):
        super().__init__()
        k = eca_kernel_size(channels)
        self.conv = nn.Conv1d(1, 1, k, padding=k // 2, bias=False)

    def gate(self, x):
        y = x.mean(dim=(1, 2))  # (B, C)
        return torch.sigmoid(self.conv(y.unsqueeze(1)).squeeze(1))

    def forward(self, x):
        return x * self.gate(x)[:, None, None, :]


class PatchEmbed(nn.Module):
    """Non-overlapping ``patch x patch`` tiles mapped linearly to ``dim`` tokens, then LN."""

    def __init__(self, in_chans, dim, patch=4):
        super().__init__()
        self.patch = patch
        self.in_chans = in_chans
        self.proj = nn.Conv2d(in_chans, dim, patch, stride=patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        H, W, c = x.shape[-3:]
        if H % self.patch or W % self.patch:
            raise ShapeError("spatial", "%dx%d is not divisible by %d; resize the frames"
                             % (H, W, self.patch))
        _check_channels(x, self.in_chans)
        y = self.proj(x.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        return self.norm(y)


class PatchMerge(nn.Module):
    """Concatenate each 2x2 neighbourhood (4C), LN, reduce to 2C."""

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise ShapeError("spatial", "patch merge needs even dims, got %dx%d" % (H, W))
        _check_channels(x, self.dim)
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 4, 2, 5)
        x = x.reshape(B, H // 2, W // 2, 4 * C)
        return self.reduction(self.norm(x))


class PatchExpand(nn.Module):
    """Linear ``C -> f*C`` then channel-to-space rearrange to ``(fH, fW, C/f)``, then LN."""

    def __init__(self, dim, factor=2):
        super().__init__()
        if dim % factor:
            raise ShapeError("channels", "%d is not divisible by expand factor %d" % (dim, factor))
        self.dim = dim
        self.factor = factor
        self.expand = nn.Linear(dim, factor * dim, bias=False)
        self.norm = nn.LayerNorm(dim // factor)

    def forward(self, x):
        _check_channels(x, self.dim)
        B, H, W, _ = x.shape
        f, c = self.factor, self.dim // self.factor
        x = self.expand(x).reshape(B, H, W, f, f, c).permute(0, 1, 3, 2, 4, 5)
        return self.norm(x.reshape(B, H * f, W * f, c))


class FinalProjection(nn.Module):
    """4x patch expand followed by a linear map to RGB."""

    def __init__(self, dim, out_chans=3, tanh=False):
        super().__init__()
        self.expand = PatchExpand(dim, 4)
        self.proj = nn.Linear(dim // 4, out_chans)
        self.tanh = tanh

    def forward(self, x):
        y = self.proj(self.expand(x))
        return torch.tanh(y) if self.tanh else y

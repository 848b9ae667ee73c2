"""Spatial-temporal fusion blocks and the four-level interaction module."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import DWConv, ECA
from .errors import ShapeError
from .memory import MemoryBank
from .ssm import SS2D


class STFB(nn.Module):
    """Fuse same-shaped spatial and temporal maps through a shared SS2D.

    The spatial and temporal streams each get a LayerNorm, a projection to
    the hidden space followed by a depth-wise conv, and a SiLU gate branch.
    The two projections are mixed as ``Ds * Dt + Ds + Dt``, scanned once, and
    gated by each stream; the sum goes back to ``dim`` channels, joins both
    inputs as a residual, and passes through ECA.
    """

    def __init__(self, dim, expand=2, d_state=16, conv_kernel=3):
        super().__init__()
        hidden = int(expand * dim)
        self.dim = dim
        self.norm_s = nn.LayerNorm(dim)
        self.norm_t = nn.LayerNorm(dim)
        self.proj_s = nn.Linear(dim, hidden)
        self.proj_t = nn.Linear(dim, hidden)
        self.dw_s = DWConv(hidden, conv_kernel)
        self.dw_t = DWConv(hidden, conv_kernel)
        self.gate_s = nn.Linear(dim, hidden)
        self.gate_t = nn.Linear(dim, hidden)
        self.ss2d = SS2D(hidden, d_state)
        self.scan_norm = nn.LayerNorm(hidden)
        self.out_proj = nn.Linear(hidden, dim)
        self.eca = ECA(dim)

    def mix(self, F_s, F_t):
        ns, nt = self.norm_s(F_s), self.norm_t(F_t)
        Ds = self.dw_s(self.proj_s(ns))
        Dt = self.dw_t(self.proj_t(nt))
        return Ds * Dt + Ds + Dt, ns, nt

    def forward(self, F_s, F_t):
        if F_s.shape != F_t.shape:
            raise ShapeError("streams", "spatial %s vs temporal %s"
                             % (tuple(F_s.shape), tuple(F_t.shape)))
        Hmix, ns, nt = self.mix(F_s, F_t)
        scanned = self.scan_norm(self.ss2d(Hmix))
        H_s = scanned * F.silu(self.gate_s(ns))
        H_t = scanned * F.silu(self.gate_t(nt))
        return self.eca(self.out_proj(H_s + H_t) + F_s + F_t)


class ConcatFuse(nn.Module):
    """Ablation fuse: ``Linear(concat(F_s, F_t))``."""

    def __init__(self, dim):
        super().__init__()
        self.proj = nn.Linear(2 * dim, dim)

    def forward(self, F_s, F_t):
        if F_s.shape != F_t.shape:
            raise ShapeError("streams", "spatial %s vs temporal %s"
                             % (tuple(F_s.shape), tuple(F_t.shape)))
        return self.proj(torch.cat([F_s, F_t], dim=-1))


@dataclass
class LevelOutput:
    """What one fusion level hands to the decoder, losses and scoring.

    ``queries``/``weights``/``mask`` are ``None`` when the level has no bank.
    """

    fused: torch.Tensor
    raw: torch.Tensor
    queries: torch.Tensor | None = None
    weights: torch.Tensor | None = None
    mask: torch.Tensor | None = None
    bank: MemoryBank | None = field(default=None, repr=False)


class STIM(nn.Module):
    """Per-level fusion plus memory, for up to four levels.

    ``fused_levels`` lists the 0-based levels that get a fusion block; the
    other levels pass ``F_s + F_t`` straight through. ``memory_levels`` lists
    the fused levels that also carry a memory bank.
    """

    def __init__(self, dims, mem_sizes, k_percent=60.0, expand=2, d_state=16,
                 conv_kernel=3, use_stfb=True, fused_levels=(0, 1, 2, 3),
                 memory_levels=(0, 1, 2, 3)):
        super().__init__()
        self.dims = tuple(dims)
        self.fused_levels = tuple(fused_levels)
        self.memory_levels = tuple(l for l in memory_levels if l in self.fused_levels)
        fusers, banks = {}, {}
        for i in self.fused_levels:
            fusers[str(i)] = (STFB(dims[i], expand, d_state, conv_kernel) if use_stfb
                              else ConcatFuse(dims[i]))
        for i in self.memory_levels:
            banks[str(i)] = MemoryBank(mem_sizes[i], dims[i], k_percent)
        self.fusers = nn.ModuleDict(fusers)
        self.banks = nn.ModuleDict(banks)

    def forward(self, spatial, temporal, write=False):
        """Fuse every level.

        With ``write=True`` each bank is updated from its queries right after
        the read. The training loop instead calls :meth:`write` after the
        optimizer step, since an in-place update before backward would
        invalidate the graph.
        """
        if len(spatial) != len(self.dims) or len(temporal) != len(self.dims):
            raise ShapeError("levels", "expected %d levels, got %d spatial / %d temporal"
                             % (len(self.dims), len(spatial), len(temporal)))
        out = []
        for i, (F_s, F_t) in enumerate(zip(spatial, temporal)):
            key = str(i)
            if key not in self.fusers:
                out.append(LevelOutput(fused=F_s + F_t, raw=F_s + F_t))
                continue
            F_st = self.fusers[key](F_s, F_t)
            if key not in self.banks:
                out.append(LevelOutput(fused=F_st, raw=F_st))
                continue
            bank = self.banks[key]
            fused, Q, weights, mask = bank(F_st)
            if write:
                bank.write(Q)
            out.append(LevelOutput(fused, F_st, Q, weights, mask, bank))
        return out

    @torch.no_grad()
    def write(self, levels):
        """Update each bank from the queries of a previous forward pass."""
        for lvl in levels:
            if lvl.bank is not None:
                lvl.bank.write(lvl.queries)

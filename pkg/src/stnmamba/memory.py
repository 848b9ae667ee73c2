"""Prototype memory bank: cosine addressing, top-k sparse read, normalized write.

Queries are the rows of a feature map flattened row-major: ``(B, H, W, C)``
becomes ``(B, H*W, C)`` with query index ``r * W + c``.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ModeError

EPS = 1e-8


def cosine_similarity(Q, M, eps=EPS):
    """``(..., Nq, C) x (N, C) -> (..., Nq, N)``; entry ``q.m / (|q||m| + eps)``."""
    num = Q @ M.transpose(-1, -2)
    den = Q.norm(dim=-1, keepdim=True) * M.norm(dim=-1).unsqueeze(-2) + eps
    return num / den


def topk_count(n_items, k_percent):
    if not 0 < k_percent <= 100:
        raise ConfigError("k_percent must be in (0, 100], got %r" % (k_percent,))
    # round first so 60% of 5 is 3, not 4 from 60/100*5 = 3.0000000000000004
    return max(1, math.ceil(round(k_percent * n_items / 100.0, 9)))


def topk_mask(w_hat, k_percent):
    """0/1 mask over the last axis marking the top ``ceil(k% * N)`` entries per row."""
    k = topk_count(w_hat.shape[-1], k_percent)
    idx = w_hat.detach().topk(k, dim=-1).indices
    return torch.zeros_like(w_hat).scatter_(-1, idx, 1.0)


def topk_softmax(w_hat, k_percent):
    """Zero all but the top-k% entries, then softmax over every position.

    Dropped entries take part in the softmax with value 0 (not -inf), so every
    weight is positive. The mask is constant under differentiation.
    """
    return torch.softmax(w_hat * topk_mask(w_hat, k_percent), dim=-1)


def nearest_two(Q, M):
    """Indices and squared distances of the two nearest items per query.

    Returns ``(idx, d2)`` with shapes ``(..., Nq, 2)``; ties go to the lower index.
    """
    if M.shape[0] < 2:
        raise ConfigError("need at least two memory items, got %d" % M.shape[0])
    d2 = squared_distances(Q, M)
    # stable sort keeps the lower index first on ties
    idx = torch.sort(d2.detach(), dim=-1, stable=True).indices[..., :2]
    return idx, torch.gather(d2, -1, idx)


def squared_distances(Q, M):
    """``(..., Nq, N)`` matrix of ``|q_i - m_j|^2`` (differentiable in both)."""
    diff = Q.unsqueeze(-2) - M
    return (diff * diff).sum(-1)


def nearest_distance(Q, M):
    """Squared distance from each query to its nearest item, ``(..., Nq)``."""
    d2 = squared_distances(Q, M)
    idx = d2.detach().argmin(dim=-1, keepdim=True)
    return torch.gather(d2, -1, idx).squeeze(-1)


class MemoryBank(nn.Module):
    """``N x C`` learnable prototypes plus a per-channel balance vector ``s``."""

    def __init__(self, n_items, dim, k_percent=60.0):
        super().__init__()
        topk_count(n_items, k_percent)
        self.n_items = n_items
        self.dim = dim
        self.k_percent = k_percent
        self.items = nn.Parameter(F.normalize(torch.rand(n_items, dim) * 2 - 1, dim=-1, eps=EPS))
        self.scale = nn.Parameter(torch.ones(dim))

    def read(self, Q):
        """Return ``(Q_hat, weights, mask)`` for queries ``(..., Nq, C)``."""
        w_hat = cosine_similarity(Q, self.items)
        mask = topk_mask(w_hat, self.k_percent)
        weights = torch.softmax(w_hat * mask, dim=-1)
        return weights @ self.items, weights, mask

    @torch.no_grad()
    def write(self, Q):
        """Move every item toward its softmax-weighted queries and renormalize.

        ``Q`` is ``(..., Nq, C)``; all leading axes are pooled into one query set.
        """
        if not self.training:
            raise ModeError("memory write is only allowed in training mode")
        Q = Q.detach().reshape(-1, self.dim)
        self.items.copy_(write_items(self.items, Q))

    def forward(self, F_st):
        """Memory-augmented map ``F_m + s * F_st`` plus queries and read weights."""
        B, H, W, C = F_st.shape
        Q = F_st.reshape(B, H * W, C)
        Q_hat, weights, mask = self.read(Q)
        out = Q_hat.reshape(B, H, W, C) + self.scale * F_st
        return out, Q, weights, mask


def write_items(M, Q, eps=EPS):
    """``L2(m_j + softmax_over_queries(cos(m_j, Q)) @ Q)`` for every item row."""
    w = torch.softmax(cosine_similarity(M, Q, eps), dim=-1)  # (N, Nq)
    return F.normalize(M + w @ Q, dim=-1, eps=eps)

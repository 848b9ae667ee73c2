"""Selective-scan state-space primitives.

Tensors are channels-last throughout. The scan kernel works on arbitrary
leading batch dimensions: ``u`` is ``(..., L, D)`` and the state has ``N``
entries per channel.

Scan order (fixed; checkpoints depend on it). For a map with rows ``r`` and
columns ``c`` flattened to ``L = H * W``::

    direction 0: row-major forward     index r * W + c, ascending
    direction 1: row-major reverse     direction 0 flipped
    direction 2: column-major forward  index c * H + r, ascending
    direction 3: column-major reverse  direction 2 flipped
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._scan_kernel import CompiledScan
from .errors import ShapeError

# Largest accumulated decay (in nats) allowed inside one scan chunk. The
# chunked kernel multiplies by exp(+decay), so this bounds intermediate
# magnitudes to ~1e26, comfortably inside float32 range.
MAX_CHUNK_DECAY = 60.0


def _check_scan_shapes(u, delta, A, B, C, D):
    if u.dim() < 2:
        raise ShapeError("u", "expected (..., L, D) input, got shape %s" % (tuple(u.shape),))
    L, d = u.shape[-2:]
    if L < 1:
        raise ShapeError("L", "sequence length must be >= 1")
    if delta.shape != u.shape:
        raise ShapeError("delta", "expected %s, got %s" % (tuple(u.shape), tuple(delta.shape)))
    if A.dim() < 2 or A.shape[-2] != d:
        raise ShapeError("A", "expected (..., D=%d, N), got %s" % (d, tuple(A.shape)))
    n = A.shape[-1]
    for name, t in (("B", B), ("C", C)):
        if t.shape[-2:] != (L, n):
            raise ShapeError(name, "expected (..., L=%d, N=%d), got %s" % (L, n, tuple(t.shape)))
    if D is not None and D.shape[-1] != d:
        raise ShapeError("D_skip", "expected (..., D=%d), got %s" % (d, tuple(D.shape)))


def selective_scan(u, delta, A, B, C, D=None, backend="compiled"):
    """Diagonal selective scan.

    Computes ``h_l = exp(delta_l * A) * h_{l-1} + delta_l * B_l * u_l`` with
    ``h_0 = 0`` and ``y_l = <C_l, h_l> + D * u_l``.

    Args:
        u: input, ``(..., L, D)``.
        delta: positive step sizes, same shape as ``u``.
        A: diagonal state matrix, ``(..., D, N)``, broadcast over batch dims.
        B, C: input/output projections, ``(..., L, N)``.
        D: optional skip coefficient, ``(..., D)``.
        backend: ``"compiled"`` (sequential numba kernel with an analytic
            backward) or ``"chunked"`` (pure torch, see
            :func:`selective_scan_chunked`).
    """
    if backend == "chunked":
        return selective_scan_chunked(u, delta, A, B, C, D)
    if backend != "compiled":
        raise ValueError("unknown scan backend %r" % (backend,))
    _check_scan_shapes(u, delta, A, B, C, D)
    L, d = u.shape[-2:]
    n = A.shape[-1]
    if D is None:
        D = torch.zeros(d, dtype=u.dtype, device=u.device)
    batch = torch.broadcast_shapes(u.shape[:-2], delta.shape[:-2], A.shape[:-2],
                                   B.shape[:-2], C.shape[:-2], D.shape[:-1])
    G = math.prod(batch)
    y = CompiledScan.apply(
        u.expand(*batch, L, d).reshape(G, L, d),
        delta.expand(*batch, L, d).reshape(G, L, d),
        A.expand(*batch, d, n).reshape(G, d, n),
        B.expand(*batch, L, n).reshape(G, L, n),
        C.expand(*batch, L, n).reshape(G, L, n),
        D.expand(*batch, d).reshape(G, d),
    )
    return y.reshape(*batch, L, d)


def selective_scan_chunked(u, delta, A, B, C, D=None, chunk_size=None):
    """Pure-torch selective scan, same contract as :func:`selective_scan`.

    The sequence is split into chunks; inside a chunk the recurrence is solved
    in closed form with cumulative sums of the log-decay, and chunks are
    chained with a short sequential loop. The chunk length adapts so the
    accumulated decay inside a chunk stays below ``MAX_CHUNK_DECAY``.
    """
    _check_scan_shapes(u, delta, A, B, C, D)
    L = u.shape[-2]

    dA = delta.unsqueeze(-1) * A.unsqueeze(-3)  # (..., L, D, N), <= 0
    x = (delta * u).unsqueeze(-1) * B.unsqueeze(-2)  # (..., L, D, N)
    batch = torch.broadcast_shapes(dA.shape[:-3], x.shape[:-3])
    dA = dA.expand(*batch, *dA.shape[-3:])
    x = x.expand(*batch, *x.shape[-3:])

    if chunk_size is None:
        peak = float(dA.detach().abs().amax()) if dA.numel() else 0.0
        chunk_size = L if peak == 0.0 else max(1, min(L, int(MAX_CHUNK_DECAY / peak)))
    T = int(chunk_size)
    nc = math.ceil(L / T)
    pad = nc * T - L
    if pad:
        dA = F.pad(dA, (0, 0, 0, 0, 0, pad))
        x = F.pad(x, (0, 0, 0, 0, 0, pad))
    dA = dA.reshape(*batch, nc, T, *dA.shape[-2:])
    x = x.reshape(*batch, nc, T, *x.shape[-2:])

    S = torch.cumsum(dA, dim=-3)  # log-decay from chunk start, non-increasing
    local = torch.exp(S) * torch.cumsum(torch.exp(-S) * x, dim=-3)

    if nc > 1:
        decay_end = torch.exp(S[..., -1, :, :])  # (..., nc, D, N)
        local_end = local[..., -1, :, :]
        carries = [torch.zeros_like(local_end[..., 0, :, :])]
        for c in range(nc - 1):
            carries.append(decay_end[..., c, :, :] * carries[-1] + local_end[..., c, :, :])
        carry = torch.stack(carries, dim=-3).unsqueeze(-3)  # (..., nc, 1, D, N)
        h = local + torch.exp(S) * carry
    else:
        h = local

    h = h.reshape(*batch, nc * T, *h.shape[-2:])[..., :L, :, :]
    y = (h * C.unsqueeze(-2)).sum(-1)
    if D is not None:
        y = y + D.unsqueeze(-2) * u
    return y


def cross_scan(x):
    """Flatten ``(..., H, W, D)`` into the four scan orders, ``(..., 4, H*W, D)``."""
    if x.dim() < 3:
        raise ShapeError("x", "expected (..., H, W, D), got %s" % (tuple(x.shape),))
    H, W, d = x.shape[-3:]
    rows = x.reshape(*x.shape[:-3], H * W, d)
    cols = x.transpose(-3, -2).reshape(*x.shape[:-3], H * W, d)
    return torch.stack([rows, rows.flip(-2), cols, cols.flip(-2)], dim=-3)


def cross_merge(dirs, H, W):
    """Undo each scan order of ``(..., 4, H*W, D)`` and sum into ``(..., H, W, D)``."""
    if dirs.dim() < 3 or dirs.shape[-3] != 4:
        raise ShapeError("directions", "expected (..., 4, L, D), got %s" % (tuple(dirs.shape),))
    if dirs.shape[-2] != H * W:
        raise ShapeError("L", "sequence length %d does not match %dx%d" % (dirs.shape[-2], H, W))
    lead, d = dirs.shape[:-3], dirs.shape[-1]
    rows = dirs[..., 0, :, :] + dirs[..., 1, :, :].flip(-2)
    cols = dirs[..., 2, :, :] + dirs[..., 3, :, :].flip(-2)
    cols = cols.reshape(*lead, W, H, d).transpose(-3, -2)
    return rows.reshape(*lead, H, W, d) + cols


class SS2D(nn.Module):
    """Four-direction 2D selective scan with independent S6 parameters per direction.

    ``A_log`` stores ``log(-A)``; the effective state matrix is ``-exp(A_log)``.
    Step sizes are ``softplus(dt_proj(x) + dt_bias)``.
    """

    n_dirs = 4

    def __init__(self, d_model, d_state=16, dt_rank=None, dt_min=1e-3, dt_max=1e-1):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.dt_rank = dt_rank or math.ceil(d_model / 16)
        K, D, N, R = self.n_dirs, d_model, d_state, self.dt_rank

        self.x_proj_weight = nn.Parameter(torch.empty(K, R + 2 * N, D))
        self.dt_proj_weight = nn.Parameter(torch.empty(K, D, R))
        self.dt_bias = nn.Parameter(torch.empty(K, D))
        self.A_log = nn.Parameter(torch.log(torch.arange(1, N + 1, dtype=torch.float32)).repeat(K, D, 1))
        self.D_skip = nn.Parameter(torch.ones(K, D))

        bound = D ** -0.5
        nn.init.uniform_(self.x_proj_weight, -bound, bound)
        nn.init.uniform_(self.dt_proj_weight, -(R ** -0.5), R ** -0.5)
        # inverse softplus of a log-uniform draw in [dt_min, dt_max]
        dt = torch.exp(torch.rand(K, D) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        with torch.no_grad():
            self.dt_bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def scan_params(self, seqs):
        """Project direction sequences ``(B, 4, L, D)`` to ``(delta, A, B, C)``."""
        R, N = self.dt_rank, self.d_state
        proj = torch.einsum("bkld,kcd->bklc", seqs, self.x_proj_weight)
        dt_low, Bs, Cs = torch.split(proj, [R, N, N], dim=-1)
        dt = torch.einsum("bklr,kdr->bkld", dt_low, self.dt_proj_weight)
        delta = F.softplus(dt + self.dt_bias.unsqueeze(-2))
        A = -torch.exp(self.A_log)
        return delta, A, Bs, Cs

    def forward(self, x):
        if x.shape[-1] != self.d_model:
            raise ShapeError("channels", "expected %d, got %d" % (self.d_model, x.shape[-1]))
        H, W = x.shape[-3:-1]
        seqs = cross_scan(x)
        delta, A, Bs, Cs = self.scan_params(seqs)
        y = selective_scan(seqs, delta, A, Bs, Cs, self.D_skip)
        return cross_merge(y, H, W)

"""Compiled sequential scan for the diagonal linear recurrence.

Decay factors ``a = exp(delta * A)`` are computed once with (vectorized)
torch and handed to the loops, which then only multiply and add. Inputs are
flattened to a single group axis ``G``::

    u, delta: (G, L, D)   A: (G, D, N)   B, C: (G, L, N)   D: (G, D)

    h_l = a_l * h_{l-1} + delta_l * B_l * u_l,   y_l = <C_l, h_l> + D * u_l
"""

import numba
import numpy as np
import torch


@numba.njit(cache=True, fastmath=True)
def _forward(u, delta, a, B, C, D, y, hs):
    G, L, Dd = u.shape
    N = a.shape[3]
    for g in range(G):
        h = np.zeros((Dd, N), dtype=u.dtype)
        for l in range(L):
            for d in range(Dd):
                du = delta[g, l, d] * u[g, l, d]
                acc = D[g, d] * u[g, l, d]
                for n in range(N):
                    hv = a[g, l, d, n] * h[d, n] + du * B[g, l, n]
                    h[d, n] = hv
                    hs[g, l, d, n] = hv
                    acc += C[g, l, n] * hv
                y[g, l, d] = acc


@numba.njit(cache=True, fastmath=True)
def _backward(u, delta, a, A, B, C, D, hs, gy, gu, gdelta, gA, gB, gC, gD):
    G, L, Dd = u.shape
    N = a.shape[3]
    for g in range(G):
        gh = np.zeros((Dd, N), dtype=u.dtype)
        for l in range(L - 1, -1, -1):
            for d in range(Dd):
                dl = delta[g, l, d]
                ud = u[g, l, d]
                gyd = gy[g, l, d]
                gbu = 0.0
                gda = 0.0
                for n in range(N):
                    ghv = gh[d, n] + C[g, l, n] * gyd
                    if l > 0:
                        # d h_l / d(delta*A) = a_l * h_{l-1}
                        gz = ghv * hs[g, l - 1, d, n] * a[g, l, d, n]
                        gda += gz * A[g, d, n]
                        gA[g, d, n] += gz * dl
                    gbu += ghv * B[g, l, n]
                    gB[g, l, n] += ghv * dl * ud
                    gC[g, l, n] += gyd * hs[g, l, d, n]
                    gh[d, n] = ghv * a[g, l, d, n]
                gu[g, l, d] = gbu * dl + D[g, d] * gyd
                gdelta[g, l, d] = gbu * ud + gda
                gD[g, d] += gyd * ud


def _np(t):
    return np.ascontiguousarray(t.detach().cpu().numpy())


class CompiledScan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, u, delta, A, B, C, D):
        with torch.no_grad():
            a = _np(torch.exp(delta.unsqueeze(-1) * A.unsqueeze(-3)))
        arrs = [_np(t) for t in (u, delta, A, B, C, D)]
        G, L, Dd = arrs[0].shape
        y = np.empty((G, L, Dd), dtype=arrs[0].dtype)
        hs = np.empty(a.shape, dtype=arrs[0].dtype)
        u_, delta_, A_, B_, C_, D_ = arrs
        _forward(u_, delta_, a, B_, C_, D_, y, hs)
        ctx.saved = (arrs, a, hs)
        return torch.from_numpy(y).to(u.device)

    @staticmethod
    def backward(ctx, gy):
        arrs, a, hs = ctx.saved
        u_, delta_, A_, B_, C_, D_ = arrs
        grads = [np.zeros_like(x) for x in arrs]
        _backward(u_, delta_, a, A_, B_, C_, D_, hs, _np(gy), *grads)
        return tuple(torch.from_numpy(g).to(gy.device) for g in grads)

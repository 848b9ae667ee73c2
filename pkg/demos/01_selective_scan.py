"""Selective scan and the four-direction 2D scan, step by step.

Run: python3 demos/01_selective_scan.py
"""

import time

import torch

from stnmamba.ssm import SS2D, cross_merge, cross_scan, selective_scan

torch.manual_seed(0)

# A one-channel, one-state scan is a leaky accumulator: each step decays the
# state by exp(delta * A) and adds delta * B * u.
L = 8
u = torch.ones(L, 1, dtype=torch.float64)
delta = torch.full((L, 1), 0.5, dtype=torch.float64)
A = torch.tensor([[-1.0]], dtype=torch.float64)
ones = torch.ones(L, 1, dtype=torch.float64)
y = selective_scan(u, delta, A, ones, ones)
print("leaky accumulator:", [round(v, 4) for v in y[:, 0].tolist()])
print("fixed point 0.5 / (1 - exp(-0.5)) =", round(0.5 / (1 - torch.exp(torch.tensor(-0.5)).item()), 4))

# The compiled kernel and the pure-torch chunked kernel agree.
u, delta = torch.randn(2, 4, 256, 16), torch.rand(2, 4, 256, 16) * 0.2
A, B, C = -torch.rand(4, 16, 8) - 0.1, torch.randn(2, 4, 256, 8), torch.randn(2, 4, 256, 8)
for backend in ("compiled", "chunked"):
    t = time.perf_counter()
    out = selective_scan(u, delta, A, B, C, backend=backend)
    print("%-8s backend: %.1f ms" % (backend, 1e3 * (time.perf_counter() - t)))
print("max difference between backends:",
      (selective_scan(u, delta, A, B, C) - selective_scan(u, delta, A, B, C, backend="chunked")).abs().max().item())

# Cross scan lays a map out in four orders; merging sums them back in place.
x = torch.arange(6.0).reshape(2, 3, 1)
print("row-major order:   ", cross_scan(x)[0, :, 0].tolist())
print("column-major order:", cross_scan(x)[2, :, 0].tolist())
print("merge(scan(x)) == 4x:", torch.equal(cross_merge(cross_scan(x), 2, 3), 4 * x))

# SS2D wraps all of this with input-dependent delta, B and C per direction.
m = SS2D(d_model=8, d_state=4)
print("SS2D output shape:", tuple(m(torch.randn(1, 5, 7, 8)).shape))

"""How a memory bank reads, writes and scores queries.

Run: python3 demos/02_memory_bank.py
"""

import torch

from stnmamba.memory import MemoryBank, nearest_distance, topk_count

torch.manual_seed(0)
bank = MemoryBank(n_items=10, dim=4, k_percent=60)
print("items kept per read at 60%% of 10: %d" % topk_count(10, 60))

# Queries close to item 3 concentrate their read weight on it.
q = bank.items.detach()[3:4] * 2.0 + 0.01 * torch.randn(1, 4)
_, w, mask = bank.read(q)
print("read weights:", [round(v, 3) for v in w[0].tolist()])
print("entries inside the top-k mask:", int(mask.sum()))

# Writing pulls items toward the queries they match and keeps rows unit-length.
bank.train()
far = torch.randn(64, 4) + torch.tensor([3.0, 0.0, 0.0, 0.0])
before = nearest_distance(far, bank.items.detach()).mean().item()
for _ in range(20):
    bank.write(far)
after = nearest_distance(far, bank.items.detach()).mean().item()
print("mean nearest-item distance of a foreign cluster: %.3f -> %.3f" % (before, after))
print("row norms after writing:", [round(v, 6) for v in bank.items.norm(dim=-1).tolist()[:3]], "...")

# In eval mode the bank is read-only.
bank.eval()
try:
    bank.write(far)
except RuntimeError as exc:
    print("eval-mode write refused:", exc)

"""Training objectives: prediction, memory compactness and memory sparsity."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import ShapeError
from .memory import nearest_distance, nearest_two

LAMBDA_COMPACT = 0.1
LAMBDA_SPARSE = 0.01


def prediction_loss(pred, target):
    """Mean squared error over all pixels and channels."""
    if pred.shape != target.shape:
        raise ShapeError("frame", "prediction %s vs target %s" % (tuple(pred.shape), tuple(target.shape)))
    return ((pred - target) ** 2).mean()


def compactness_loss(Q, M):
    """Sum over queries of the squared distance to the nearest item (mean over any batch axis)."""
    per_query = nearest_distance(Q, M)
    return per_query.sum(-1).mean()


def sparsity_loss(Q, M):
    """Mean over queries of ``|q - m1|^2 - |q - m2|^2`` for the two nearest items; never positive."""
    _, d2 = nearest_two(Q, M)
    return (d2[..., 0] - d2[..., 1]).mean()


@dataclass
class LossBreakdown:
    prediction: torch.Tensor
    compactness: list = field(default_factory=list)
    sparsity: list = field(default_factory=list)
    lambda_compact: float = LAMBDA_COMPACT
    lambda_sparse: float = LAMBDA_SPARSE
    use_compactness: bool = True
    use_sparsity: bool = True

    @property
    def compactness_total(self):
        return sum(self.compactness, torch.zeros(()))

    @property
    def sparsity_total(self):
        return sum(self.sparsity, torch.zeros(()))

    @property
    def total(self):
        return total_loss(self)

    def row(self):
        """Plain floats for logging."""
        return {
            "L_p": float(self.prediction.detach()),
            "L_c_total": float(self.compactness_total.detach()),
            "L_s_total": float(self.sparsity_total.detach()),
            "total": float(self.total.detach()),
        }


def total_loss(b: LossBreakdown):
    """``L_p + lambda_c * sum(L_c) + lambda_s * sum(L_s)``; disabled terms contribute nothing."""
    total = b.prediction
    if b.use_compactness and b.compactness:
        total = total + b.lambda_compact * b.compactness_total
    if b.use_sparsity and b.sparsity:
        total = total + b.lambda_sparse * b.sparsity_total
    return total


def compute_losses(prediction, target, lambda_compact=LAMBDA_COMPACT, lambda_sparse=LAMBDA_SPARSE,
                   use_compactness=True, use_sparsity=True):
    """Loss terms for a model output; levels without a memory bank are skipped."""
    b = LossBreakdown(prediction_loss(prediction.frame, target), lambda_compact=lambda_compact,
                      lambda_sparse=lambda_sparse, use_compactness=use_compactness,
                      use_sparsity=use_sparsity)
    for lvl in prediction.levels:
        if lvl.bank is None:
            continue
        b.compactness.append(compactness_loss(lvl.queries, lvl.bank.items))
        b.sparsity.append(sparsity_loss(lvl.queries, lvl.bank.items))
    return b

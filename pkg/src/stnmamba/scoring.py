"""Frame scores, their fusion into an anomaly score, and frame-level ROC AUC."""

from __future__ import annotations

import numpy as np
import torch
from scipy.stats import rankdata

from .errors import DataError, ShapeError
from .memory import nearest_distance

EPS = 1e-8
TAU = 0.8


def psnr_score(pred, target, eps=EPS):
    """PSNR in dB, ``10 log10(max(pred) / mse)``, per frame.

    Both frames are mapped from [-1, 1] to [0, 1] first. Inputs are ``(..., H, W, 3)``;
    the result has the leading shape.
    """
    if pred.shape != target.shape:
        raise ShapeError("frame", "prediction %s vs target %s" % (tuple(pred.shape), tuple(target.shape)))
    p = (pred + 1) / 2
    t = (target + 1) / 2
    mse = ((p - t) ** 2).mean(dim=(-3, -2, -1)).clamp_min(eps)
    peak = p.amax(dim=(-3, -2, -1)).clamp_min(eps)
    return 10 * torch.log10(peak / mse)


def memory_distance_score(Q, M):
    """Mean over queries of the squared distance to the nearest item; ``(..., Nq, C) -> (...)``."""
    return nearest_distance(Q, M).mean(-1)


def minmax_normalize(v, eps=EPS):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise DataError("cannot normalize an empty score sequence")
    return (v - v.min()) / (v.max() - v.min() + eps)


def fuse_scores(g_psnr, g_memory, tau=TAU):
    """``tau * (1 - g_psnr) + (1 - tau) * g_memory`` on already-normalized sequences."""
    return tau * (1.0 - np.asarray(g_psnr)) + (1.0 - tau) * np.asarray(g_memory)


def anomaly_scores(psnr, distances=(), tau=TAU):
    """Fuse one video's scores; returns ``(S, N_s)``.

    ``psnr`` is the per-frame PSNR sequence and ``distances`` holds one
    per-frame memory-distance sequence per bank. Without banks the memory
    term is dropped and ``S = 1 - g(psnr)``.
    """
    g = minmax_normalize
    psnr = np.asarray(psnr, dtype=np.float64)
    if psnr.size == 0:
        raise DataError("empty video")
    for d in distances:
        if len(d) != len(psnr):
            raise ShapeError("frames", "%d memory distances vs %d PSNR values" % (len(d), len(psnr)))
    if len(distances) == 0:
        S = 1.0 - g(psnr)
    else:
        S = fuse_scores(g(psnr), g(sum(g(d) for d in distances)), tau)
    return S, 1.0 - S


def frame_level_auc(scores, labels):
    """ROC AUC of anomaly ``scores`` against 0/1 ``labels`` (1 = anomalous).

    Uses the Mann-Whitney rank statistic, so tied scores count one half.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ShapeError("labels", "%d scores vs %d labels" % (scores.size, labels.size))
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("frame-level AUC is undefined: labels contain a single class")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))

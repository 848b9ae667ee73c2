"""Per-frame scoring of videos, score CSVs, and frame-level AUC over a test split."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import ClipDataset
from .errors import DataError
from .scoring import TAU, anomaly_scores, frame_level_auc, memory_distance_score, psnr_score

SCORE_COLUMNS = ("frame", "S_p", "S_d1", "S_d2", "S_d3", "S_d4", "S", "N_s", "label")


@dataclass
class VideoScores:
    """Raw per-frame scores for the predictable frames ``k..T-1`` of one video."""

    name: str
    frames: np.ndarray  # target frame indices
    psnr: np.ndarray
    distances: dict  # level (0-based) -> per-frame memory distance
    labels: np.ndarray | None = None
    S: np.ndarray | None = None
    N_s: np.ndarray | None = None

    def fuse(self, tau=TAU):
        levels = sorted(self.distances)
        self.S, self.N_s = anomaly_scores(self.psnr, [self.distances[l] for l in levels], tau)
        return self


@torch.no_grad()
def score_frames(model, frames, batch_size=8, on_prediction=None):
    """Score every predictable frame of a ``(T, H, W, 3)`` array in [-1, 1].

    Returns ``(target_indices, psnr, {level: distances})``. ``on_prediction``
    receives ``(target_index, predicted_frame, true_frame)`` numpy arrays.
    """
    model.eval()
    k = model.config.frames
    T = len(frames)
    if T < k + 1:
        raise DataError("need at least %d frames to score, got %d" % (k + 1, T))
    targets = np.arange(k, T)
    psnr, dists = [], {}
    for s in range(0, len(targets), batch_size):
        chunk = targets[s:s + batch_size]
        clip = torch.from_numpy(np.stack([frames[t - k:t] for t in chunk]))
        truth = torch.from_numpy(np.stack([frames[t] for t in chunk]))
        pred = model(clip)
        psnr.append(psnr_score(pred.frame, truth).numpy())
        for i, lvl in enumerate(pred.levels):
            if lvl.bank is not None:
                dists.setdefault(i, []).append(memory_distance_score(lvl.queries, lvl.bank.items).numpy())
        if on_prediction is not None:
            for t, p, y in zip(chunk, pred.frame.numpy(), truth.numpy()):
                on_prediction(int(t), p, y)
    return (targets, np.concatenate(psnr).astype(np.float64),
            {i: np.concatenate(v).astype(np.float64) for i, v in dists.items()})


@dataclass
class EvalResult:
    videos: list
    auc: float
    tau: float
    extra: dict = field(default_factory=dict)


def score_split(model, index, batch_size=8, k_percent=None):
    """Raw scores for every video of a labelled test split."""
    if k_percent is not None:
        for bank in model.stim.banks.values():
            bank.k_percent = k_percent
    ds = ClipDataset(index, model.config.frames, model.config.image_size, cache=False)
    out = []
    for name in index.videos:
        frames = ds.video_frames(name)
        targets, psnr, dists = score_frames(model, frames, batch_size)
        labels = index.labels[name][targets] if name in index.labels else None
        out.append(VideoScores(name, targets, psnr, dists, labels))
    return out


def fuse_and_auc(videos, tau=TAU, global_norm=False):
    """Fuse scores per video (or over the whole split) and compute AUC on ``S``."""
    if global_norm:
        lengths = [len(v.psnr) for v in videos]
        psnr = np.concatenate([v.psnr for v in videos])
        levels = sorted(videos[0].distances)
        dists = [np.concatenate([v.distances[l] for v in videos]) for l in levels]
        S, N_s = anomaly_scores(psnr, dists, tau)
        for v, part_S, part_N in zip(videos, np.split(S, np.cumsum(lengths)[:-1]),
                                     np.split(N_s, np.cumsum(lengths)[:-1])):
            v.S, v.N_s = part_S, part_N
    else:
        for v in videos:
            v.fuse(tau)
    scores = np.concatenate([v.S for v in videos])
    labels = np.concatenate([v.labels for v in videos])
    return frame_level_auc(scores, labels)


def evaluate(model, index, tau=TAU, k_percent=None, global_norm=False, batch_size=8):
    videos = score_split(model, index, batch_size, k_percent)
    auc = fuse_and_auc(videos, tau, global_norm)
    return EvalResult(videos, auc, tau)


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return "%d" % v
    return "%.9g" % v


def write_score_csv(path, video: VideoScores):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        for j, t in enumerate(video.frames):
            d = [video.distances[l][j] if l in video.distances else None for l in range(4)]
            label = None if video.labels is None else int(video.labels[j])
            w.writerow([_cell(int(t)), _cell(video.psnr[j]), *map(_cell, d),
                        _cell(video.S[j]), _cell(video.N_s[j]), _cell(label)])


def read_score_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def sweep_values(text):
    """Parse ``start:stop:step`` (inclusive) or a comma list into floats."""
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(x) for x in text.split(",")]


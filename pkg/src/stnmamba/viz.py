"""Normality-curve plots and prediction error maps.

Error maps use a fixed scale so images are comparable across runs: pixel
brightness is ``clip(mean_c |pred - true| / ERROR_SCALE, 0, 1)`` mapped
through matplotlib's ``inferno`` colormap (monotone in brightness).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

ERROR_SCALE = 0.5
ERROR_CMAP = "inferno"


def error_map(pred, truth):
    """RGB uint8 ``(H, W, 3)`` error image for two ``(H, W, 3)`` frames in [-1, 1]."""
    err = np.abs(np.asarray(pred) - np.asarray(truth)).mean(-1)
    level = np.clip(err / ERROR_SCALE, 0.0, 1.0)
    rgba = matplotlib.colormaps[ERROR_CMAP](level)
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def save_error_map(path, pred, truth, size=None):
    """Write the error image; ``size=(W, H)`` resizes it to the source frame size."""
    img = Image.fromarray(error_map(pred, truth))
    if size is not None and tuple(size) != img.size:
        img = img.resize(tuple(size), Image.BILINEAR)
    img.save(path, format="PNG")


def _intervals(labels):
    out, start = [], None
    for i, v in enumerate(labels):
        if v and start is None:
            start = i
        elif not v and start is not None:
            out.append((start, i - 1))
            start = None
    if start is not None:
        out.append((start, len(labels) - 1))
    return out


def save_normality_curve(path, frames, normality, labels=None, title=None):
    """Normality score vs frame index, anomalous intervals shaded."""
    frames = np.asarray(frames)
    fig, ax = plt.subplots(figsize=(6, 2.5), dpi=100)
    if labels is not None:
        for a, b in _intervals(np.asarray(labels)):
            ax.axvspan(frames[a] - 0.5, frames[b] + 0.5, color="tab:red", alpha=0.2, lw=0)
    ax.plot(frames, normality, color="tab:blue", lw=1.5)
    ax.set_ylim(-0.05, 1.05)
    ax.set_xlabel("frame")
    ax.set_ylabel("normality score")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

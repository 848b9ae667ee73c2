"""Frame-folder datasets, clip windows, and a synthetic moving-sprites generator.

On-disk layout::

    root/training/frames/<video>/<frame>.<ext>
    root/testing/frames/<video>/<frame>.<ext>
    root/testing/labels/<video>.txt         one 0/1 per line, one line per frame
    root/testing/labels/<video>.intervals   "start-end" per line, 1-based inclusive

Frames are ordered lexicographically by file name within each video folder.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
SPLIT_DIRS = {"train": "training", "test": "testing"}


def load_frame(path, size=None):
    """Decode ``path`` to float32 ``(H, W, 3)`` in [-1, 1], bilinear-resized to ``size``.

    Grayscale images are replicated to three channels.
    """
    try:
        with Image.open(path) as img:
            img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float32)
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError("cannot read frame %s: %s" % (path, exc)) from exc
    return arr * (2.0 / 255.0) - 1.0


def save_frame(path, frame):
    """Write a [-1, 1] frame as an 8-bit PNG."""
    arr = np.clip(np.rint((np.asarray(frame) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def rgb_difference(frames):
    """Forward differences ``frames[j+1] - frames[j]`` along the first axis."""
    if len(frames) < 2:
        raise DataError("need at least 2 frames for differences, got %d" % len(frames))
    return frames[1:] - frames[:-1]


def parse_labels(path, n_frames):
    """Read a per-line 0/1 file or a ``start-end`` interval file into a 0/1 array."""
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines() if ln.strip()]
    if path.suffix == ".intervals":
        labels = np.zeros(n_frames, dtype=np.int64)
        for ln in lines:
            try:
                start, end = (int(v) for v in ln.split("-"))
            except ValueError as exc:
                raise DataError("%s: bad interval %r" % (path, ln)) from exc
            if not 1 <= start <= end <= n_frames:
                raise DataError("%s: interval %r outside 1..%d" % (path, ln, n_frames))
            labels[start - 1:end] = 1
        return labels
    try:
        labels = np.array([int(v) for v in lines], dtype=np.int64)
    except ValueError as exc:
        raise DataError("%s: labels must be 0/1 per line" % path) from exc
    if len(labels) != n_frames:
        raise DataError("%s: %d labels for %d frames" % (path, len(labels), n_frames))
    if not np.isin(labels, (0, 1)).all():
        raise DataError("%s: labels must be 0 or 1" % path)
    return labels


@dataclass
class DatasetIndex:
    root: Path
    split: str
    videos: dict  # name -> list[Path]
    labels: dict = field(default_factory=dict)  # name -> np.ndarray (test only)

    def windows(self, k):
        """``(video, start)`` pairs; a window uses frames ``start..start+k-1`` and target ``start+k``."""
        return [(name, s) for name, paths in self.videos.items() for s in range(len(paths) - k)]

    def report(self, k=None):
        lines = ["%s split at %s: %d videos, %d frames" % (
            self.split, self.root, len(self.videos), sum(len(p) for p in self.videos.values()))]
        for name, paths in self.videos.items():
            extra = ""
            if name in self.labels:
                extra = ", %d anomalous" % int(self.labels[name].sum())
            if k is not None:
                extra += ", %d windows" % max(0, len(paths) - k)
            lines.append("  %s: %d frames%s" % (name, len(paths), extra))
        return "\n".join(lines)


def index_frames(folder):
    folder = Path(folder)
    frames = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not frames:
        raise DataError("no frames in %s" % folder)
    return frames


def index_dataset(root, split="train"):
    """Scan ``root`` for one split (``"train"`` or ``"test"``)."""
    root = Path(root)
    if split not in SPLIT_DIRS:
        raise DataError("split must be 'train' or 'test', got %r" % (split,))
    base = root / SPLIT_DIRS[split]
    frame_root = base / "frames"
    if not frame_root.is_dir():
        raise DataError("missing %s" % frame_root)
    videos = {d.name: index_frames(d) for d in sorted(frame_root.iterdir()) if d.is_dir()}
    if not videos:
        raise DataError("no video folders under %s" % frame_root)
    labels = {}
    if split == "test":
        for name, paths in videos.items():
            txt = base / "labels" / (name + ".txt")
            intervals = base / "labels" / (name + ".intervals")
            if txt.exists():
                labels[name] = parse_labels(txt, len(paths))
            elif intervals.exists():
                labels[name] = parse_labels(intervals, len(paths))
            else:
                raise DataError("no labels for test video %s (expected %s or %s)"
                                % (name, txt, intervals))
    return DatasetIndex(root, split, videos, labels)


@dataclass
class ClipSample:
    frames: np.ndarray  # (k, H, W, 3)
    diffs: np.ndarray  # (k-1, H, W, 3)
    target: np.ndarray  # (H, W, 3)
    video: str
    index: int  # frame index of the target


class ClipDataset:
    """Sliding windows of ``k`` frames plus the next frame as target.

    Frames are decoded on first use and cached per video.
    """

    def __init__(self, index, k, size, cache=True):
        self.index = index
        self.k = k
        self.size = size
        self.cache = cache
        self.items = index.windows(k)
        self._frames = {}

    def __len__(self):
        return len(self.items)

    def video_frames(self, name):
        if name in self._frames:
            return self._frames[name]
        arr = np.stack([load_frame(p, self.size) for p in self.index.videos[name]])
        if self.cache:
            self._frames[name] = arr
        return arr

    def __getitem__(self, i):
        name, s = self.items[i]
        vid = self.video_frames(name)
        frames = vid[s:s + self.k]
        return ClipSample(frames, rgb_difference(frames), vid[s + self.k], name, s + self.k)

    def batch(self, indices):
        """Stack samples into ``(frames, target)`` tensors of shape ``(B, k, H, W, 3)`` / ``(B, H, W, 3)``."""
        samples = [self[i] for i in indices]
        frames = torch.from_numpy(np.stack([s.frames for s in samples]))
        target = torch.from_numpy(np.stack([s.target for s in samples]))
        return frames, target


# ---------------------------------------------------------------------------
# synthetic data

PALETTE = np.array([
    [230, 80, 60], [70, 200, 90], [80, 120, 240], [240, 210, 60], [200, 90, 220], [60, 210, 220],
], dtype=np.float64)


@dataclass
class SynthSpec:
    """Parameters of the moving-sprites generator (speeds in pixels per frame)."""

    size: int = 64
    n_train: int = 8
    n_test: int = 4
    n_frames: int = 60
    n_objects: int = 2
    radius: tuple = (5.0, 7.0)
    v_max: float = 1.5
    fast_factor: float = 4.0
    anomaly_types: tuple = ("fast", "square", "flicker")
    anomaly_length: tuple = (14, 20)
    anomalies: bool = True

    def validate(self):
        if self.size < 2 * self.radius[1] + 4:
            raise ConfigError("frame size %d too small for sprites of radius %g" % (self.size, self.radius[1]))
        if self.n_frames < 2 or self.n_train < 1 or self.n_test < 1:
            raise ConfigError("need n_frames >= 2 and at least one train and one test video")
        lo, hi = self.anomaly_length
        if self.anomalies and not (1 <= lo <= hi and self.n_frames // 4 < self.n_frames - hi - 2):
            raise ConfigError("anomalies of length %d-%d do not fit in %d frames"
                              % (lo, hi, self.n_frames))
        unknown = set(self.anomaly_types) - {"fast", "square", "flicker"}
        if unknown:
            raise ConfigError("unknown anomaly type(s): %s" % ", ".join(sorted(unknown)))
        return self

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("radius", "anomaly_types", "anomaly_length"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError("unknown synth spec keys: %s" % ", ".join(sorted(unknown)))
        return cls(**d)


def _background(rng, size):
    """Static low-contrast texture shared by every video of a dataset."""
    coarse = rng.uniform(0.0, 1.0, size=(size // 8 + 2, size // 8 + 2, 3))
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
    tex = np.asarray(img, dtype=np.float64) / 255.0
    stripes = 0.5 + 0.5 * np.sin(np.arange(size) * 2 * np.pi / 16.0)
    tex = 0.7 * tex + 0.3 * stripes[None, :, None]
    return 50.0 + 60.0 * tex


def _render(background, sprites):
    frame = background.copy()
    size = frame.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for sp in sprites:
        if not sp["visible"]:
            continue
        dx, dy = xx - sp["x"], yy - sp["y"]
        r = sp["radius"]
        if sp["shape"] == "square":
            dist = np.maximum(np.abs(dx), np.abs(dy))
        else:
            dist = np.hypot(dx, dy)
        cover = np.clip(r + 0.5 - dist, 0.0, 1.0)[..., None]
        frame = frame * (1 - cover) + np.asarray(sp["color"]) * cover
    return np.clip(np.rint(frame), 0, 255).astype(np.uint8)


def _bounce(pos, vel, lo, hi):
    pos = pos + vel
    for j in range(2):
        if pos[j] < lo:
            pos[j], vel[j] = 2 * lo - pos[j], -vel[j]
        elif pos[j] > hi:
            pos[j], vel[j] = 2 * hi - pos[j], -vel[j]
    return pos, vel


def _random_velocity(rng, v_lo, v_hi):
    speed = rng.uniform(v_lo, v_hi)
    ang = rng.uniform(0, 2 * np.pi)
    return np.array([speed * np.cos(ang), speed * np.sin(ang)])


def _simulate(rng, spec, anomaly):
    """Sprite states per frame; ``anomaly`` is ``None`` or ``(kind, start, end)`` 0-based inclusive."""
    lo_r, hi_r = spec.radius
    objs = []
    for _ in range(spec.n_objects):
        r = rng.uniform(lo_r, hi_r)
        objs.append({
            "pos": rng.uniform(r + 1, spec.size - r - 1, size=2),
            "vel": _random_velocity(rng, 0.5 * spec.v_max, spec.v_max),
            "radius": r,
            "color": PALETTE[rng.integers(len(PALETTE))].tolist(),
        })
    extra = None
    if anomaly is not None and anomaly[0] in ("square", "flicker"):
        r = hi_r + 1.0 if anomaly[0] == "square" else rng.uniform(lo_r, hi_r)
        extra = {
            "pos": rng.uniform(r + 1, spec.size - r - 1, size=2),
            "vel": _random_velocity(rng, 0.5 * spec.v_max, spec.v_max),
            "radius": r,
            "color": PALETTE[rng.integers(len(PALETTE))].tolist(),
        }

    states = []
    for t in range(spec.n_frames):
        active = anomaly is not None and anomaly[1] <= t <= anomaly[2]
        sprites = []
        for i, o in enumerate(objs):
            sprites.append({"id": i, "x": o["pos"][0], "y": o["pos"][1], "radius": o["radius"],
                            "shape": "circle", "color": o["color"], "visible": True})
        if extra is not None and active:
            visible = anomaly[0] == "square" or (t - anomaly[1]) % 4 < 2
            sprites.append({"id": len(objs), "x": extra["pos"][0], "y": extra["pos"][1],
                            "radius": extra["radius"],
                            "shape": "square" if anomaly[0] == "square" else "circle",
                            "color": extra["color"], "visible": bool(visible)})
        states.append(sprites)

        for i, o in enumerate(objs):
            vel = o["vel"]
            if active and anomaly[0] == "fast" and i == 0:
                vel = vel / np.linalg.norm(vel) * spec.fast_factor * spec.v_max
            r = o["radius"]
            pos, vel = _bounce(o["pos"], vel.copy(), r, spec.size - r)
            o["pos"] = pos
            # keep the heading after a bounce but restore the normal speed
            o["vel"] = vel / np.linalg.norm(vel) * np.linalg.norm(o["vel"])
        if extra is not None and active:
            r = extra["radius"]
            extra["pos"], extra["vel"] = _bounce(extra["pos"], extra["vel"].copy(), r, spec.size - r)
    return states


def _plain_states(states):
    # float() keeps full precision; json writes the shortest round-tripping repr
    return [[{k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in sp.items()}
             for sp in sprites] for sprites in states]


def synthesize_dataset(root, spec=None, seed=0):
    """Write a synthetic dataset in the standard layout; returns the metadata dict.

    Normal videos show circles drifting at most ``v_max`` px/frame over a fixed
    textured background. Each test video (when ``spec.anomalies``) holds one
    anomalous interval, cycling through ``spec.anomaly_types``:

    * ``fast``: one circle moves at ``fast_factor * v_max``;
    * ``square``: an extra square sprite is present;
    * ``flicker``: an extra circle appears and disappears every two frames.
    """
    spec = (spec or SynthSpec()).validate()
    root = Path(root)
    rng = np.random.default_rng(seed)
    background = _background(rng, spec.size)
    meta = {"spec": asdict(spec), "seed": seed, "videos": {}}

    for split, count in (("train", spec.n_train), ("test", spec.n_test)):
        base = root / SPLIT_DIRS[split]
        for v in range(count):
            name = "%02d" % (v + 1)
            anomaly = None
            if split == "test" and spec.anomalies and spec.anomaly_types:
                kind = spec.anomaly_types[v % len(spec.anomaly_types)]
                length = int(rng.integers(spec.anomaly_length[0], spec.anomaly_length[1] + 1))
                start = int(rng.integers(spec.n_frames // 4, spec.n_frames - length - 2))
                anomaly = (kind, start, start + length - 1)
            states = _simulate(rng, spec, anomaly)
            vdir = base / "frames" / name
            vdir.mkdir(parents=True, exist_ok=True)
            for t, sprites in enumerate(states):
                Image.fromarray(_render(background, sprites)).save(vdir / ("%04d.png" % t), format="PNG")
            entry = {"split": split, "n_frames": spec.n_frames, "sprites": _plain_states(states)}
            if split == "test":
                labels = np.zeros(spec.n_frames, dtype=np.int64)
                ldir = base / "labels"
                ldir.mkdir(parents=True, exist_ok=True)
                if anomaly is not None:
                    labels[anomaly[1]:anomaly[2] + 1] = 1
                    (ldir / (name + ".intervals")).write_text("%d-%d\n" % (anomaly[1] + 1, anomaly[2] + 1))
                    entry["anomaly"] = {"kind": anomaly[0], "start": anomaly[1], "end": anomaly[2]}
                (ldir / (name + ".txt")).write_text("".join("%d\n" % x for x in labels))
            meta["videos"]["%s/%s" % (split, name)] = entry

    (root / "metadata.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return meta


def render_from_metadata(meta, video):
    """Re-render one video's frames from saved sprite trajectories, ``(T, H, W, 3)`` uint8."""
    spec = SynthSpec.from_dict(meta["spec"])
    background = _background(np.random.default_rng(meta["seed"]), spec.size)
    return np.stack([_render(background, sprites) for sprites in meta["videos"][video]["sprites"]])

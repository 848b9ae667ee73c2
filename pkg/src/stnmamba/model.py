"""Full network: dual encoders, fusion/memory levels, decoder; config and checkpoints.

Checkpoint file layout (all integers little-endian)::

    bytes 0..7    magic b"STNMCKPT"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 header length n
    next n bytes  UTF-8 JSON header:
                    {"config": {...}, "step": int, "extra": {...},
                     "tensors": [{"name", "shape", "offset", "count"}, ...]}
    remainder     tensor data, float32 little-endian, row-major (C order);
                  ``offset`` is in bytes from the start of this region.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .blocks import CAVSSB, MSVSSB, VSSB, FinalProjection, PatchEmbed, PatchExpand, PatchMerge
from .errors import ConfigError, ShapeError
from .fusion import STIM, LevelOutput

CONFIG_VERSION = 1
CKPT_MAGIC = b"STNMCKPT"
CKPT_VERSION = 1

ABLATIONS = {
    "memory_off": {"memory_levels": ()},
    "bottleneck_only": {"multi_level": False},
    "stfb_off": {"stfb": False},
    "ms_off": {"ms_vssb": False},
    "ca_off": {"ca_vssb": False},
    # memory-bank table: drop banks from the bottleneck down
    "no_m4": {"memory_levels": (0, 1, 2)},
    "no_m34": {"memory_levels": (0, 1)},
    "no_m234": {"memory_levels": (0,)},
    # all components off: plain VSSB encoders, concat fusion at the bottleneck only
    "baseline": {"ms_vssb": False, "ca_vssb": False, "stfb": False,
                 "memory_levels": (), "multi_level": False},
}


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    frames: int = 4
    image_size: int = 256
    mem_sizes: tuple = (80, 60, 40, 20)
    k_percent: float = 60.0
    expand: int = 2
    d_state: int = 16
    conv_kernel: int = 3
    depths: tuple = (2, 2, 2, 2)
    ms_vssb: bool = True
    ca_vssb: bool = True
    stfb: bool = True
    memory_levels: tuple = (0, 1, 2, 3)
    multi_level: bool = True
    output_tanh: bool = False
    seed: int = 0
    version: int = CONFIG_VERSION

    def __post_init__(self):
        for name in ("mem_sizes", "depths", "memory_levels"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.image_size % 32:
            raise ConfigError("image_size must be divisible by 32, got %d" % self.image_size)
        if self.frames < 2:
            raise ConfigError("need at least 2 input frames, got %d" % self.frames)
        if self.dim % 4 or self.dim < 8:
            # the final 4x expand leaves dim/4 channels under a LayerNorm; one channel normalizes to 0
            raise ConfigError("dim must be a multiple of 4 and at least 8, got %d" % self.dim)
        if len(self.mem_sizes) != 4 or len(self.depths) != 4:
            raise ConfigError("mem_sizes and depths need one entry per level")
        if any(l not in range(4) for l in self.memory_levels):
            raise ConfigError("memory_levels must be within 0..3")
        if self.version != CONFIG_VERSION:
            raise ConfigError("unsupported config version %r" % (self.version,))

    @property
    def dims(self):
        return tuple(self.dim * 2 ** i for i in range(4))

    @property
    def strides(self):
        return (4, 8, 16, 32)

    @property
    def fused_levels(self):
        return (0, 1, 2, 3) if self.multi_level else (3,)

    @property
    def active_memory_levels(self):
        return tuple(l for l in self.memory_levels if l in self.fused_levels)

    def with_ablation(self, *names):
        changes = {}
        for name in names:
            if name not in ABLATIONS:
                raise ConfigError("unknown ablation %r (known: %s)" % (name, ", ".join(ABLATIONS)))
            changes.update(ABLATIONS[name])
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError("unknown config keys: %s" % ", ".join(sorted(unknown)))
        return cls(**d)

    @classmethod
    def desk(cls, **kw):
        """Small configuration for CPU-scale experiments (C=16, 64x64)."""
        return cls(**{"dim": 16, "image_size": 64, **kw})


def stack_frames(frames):
    """``(B, k, H, W, 3) -> (B, H, W, 3k)``, frame-major channels."""
    B, k, H, W, c = frames.shape
    return frames.permute(0, 2, 3, 1, 4).reshape(B, H, W, k * c)


class Encoder(nn.Module):
    """Patch embed + blocks, then (patch merge + blocks) x 3; returns all four stage maps."""

    def __init__(self, in_chans, dim, depths, block, expand, d_state, conv_kernel):
        super().__init__()
        dims = [dim * 2 ** i for i in range(4)]
        self.embed = PatchEmbed(in_chans, dim)
        self.merges = nn.ModuleList(PatchMerge(dims[i]) for i in range(3))
        self.stages = nn.ModuleList(
            nn.Sequential(*(block(dims[i], expand, d_state, conv_kernel) for _ in range(depths[i])))
            for i in range(4))

    def forward(self, x):
        feats = []
        x = self.stages[0](self.embed(x))
        feats.append(x)
        for merge, stage in zip(self.merges, self.stages[1:]):
            x = stage(merge(x))
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Stages at widths ``[8C, 4C, 2C, C]``; 2x expand after the first three, skip-adds in between."""

    def __init__(self, dim, depths, expand, d_state, conv_kernel, tanh=False):
        super().__init__()
        dims = [dim * 2 ** i for i in (3, 2, 1, 0)]
        self.stages = nn.ModuleList(
            nn.Sequential(*(VSSB(dims[i], expand, d_state, conv_kernel) for _ in range(depths[::-1][i])))
            for i in range(4))
        self.expands = nn.ModuleList(PatchExpand(dims[i], 2) for i in range(3))
        self.head = FinalProjection(dim, 3, tanh=tanh)

    def forward(self, fused):
        """``fused`` is ordered shallow to deep (stride 4 first)."""
        x = fused[3]
        for i in range(3):
            x = self.expands[i](self.stages[i](x)) + fused[2 - i]
        return self.head(self.stages[3](x))


@dataclass
class Prediction:
    frame: torch.Tensor
    levels: list = field(default_factory=list)
    spatial: list = field(default_factory=list, repr=False)
    temporal: list = field(default_factory=list, repr=False)


class STNMamba(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        torch.manual_seed(config.seed)
        k, C = config.frames, config.dim
        args = (config.expand, config.d_state, config.conv_kernel)
        self.spatial_encoder = Encoder(3 * k, C, config.depths, MSVSSB if config.ms_vssb else VSSB, *args)
        self.temporal_encoder = Encoder(3 * (k - 1), C, config.depths,
                                        CAVSSB if config.ca_vssb else VSSB, *args)
        self.stim = STIM(config.dims, config.mem_sizes, config.k_percent, *args,
                         use_stfb=config.stfb, fused_levels=config.fused_levels,
                         memory_levels=config.active_memory_levels)
        self.decoder = Decoder(C, config.depths, *args, tanh=config.output_tanh)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d, nn.Conv1d)) and m.weight.dim() > 1:
                if isinstance(m, nn.Conv1d):
                    continue
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def check_input(self, frames):
        cfg = self.config
        if frames.dim() != 5 or frames.shape[1] != cfg.frames or frames.shape[-1] != 3:
            raise ShapeError("frames", "expected (B, %d, H, W, 3), got %s"
                             % (cfg.frames, tuple(frames.shape)))
        if frames.shape[2] != cfg.image_size or frames.shape[3] != cfg.image_size:
            raise ShapeError("spatial", "expected %dx%d frames, got %dx%d"
                             % (cfg.image_size, cfg.image_size, frames.shape[2], frames.shape[3]))

    def encode(self, frames, diffs=None):
        self.check_input(frames)
        if diffs is None:
            diffs = frames[:, 1:] - frames[:, :-1]
        return self.spatial_encoder(stack_frames(frames)), self.temporal_encoder(stack_frames(diffs))

    def forward(self, frames, diffs=None, write=False):
        """Predict the next frame from ``frames`` ``(B, k, H, W, 3)`` in [-1, 1]."""
        spatial, temporal = self.encode(frames, diffs)
        levels = self.stim(spatial, temporal, write=write)
        frame = self.decoder([lvl.fused for lvl in levels])
        return Prediction(frame, levels, spatial, temporal)


def count_parameters(model):
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _encode_tensors(named):
    table, chunks, offset = [], [], 0
    for name, arr in named:
        a = np.ascontiguousarray(arr, dtype="<f4")
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.nbytes
    return table, b"".join(chunks)


def write_container(path, header, named_arrays):
    table, blob = _encode_tensors(named_arrays)
    header = dict(header, tensors=table)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(raw)))
        f.write(raw)
        f.write(blob)
    tmp.replace(path)


def read_container(path):
    """Return ``(header, {name: float32 ndarray})``."""
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ConfigError("%s is not a checkpoint file" % path)
    version, n = struct.unpack("<IQ", data[8:20])
    if version != CKPT_VERSION:
        raise ConfigError("%s: unsupported checkpoint version %d" % (path, version))
    header = json.loads(data[20:20 + n].decode("utf-8"))
    base = 20 + n
    arrays = {}
    for t in header["tensors"]:
        start = base + t["offset"]
        arr = np.frombuffer(data, dtype="<f4", count=t["count"], offset=start)
        arrays[t["name"]] = arr.reshape(t["shape"]).copy()
    return header, arrays


def save_checkpoint(path, model, step=0, optimizer_arrays=None, extra=None):
    named = [(k, v.detach().cpu().numpy()) for k, v in model.state_dict().items()]
    if optimizer_arrays:
        named += list(optimizer_arrays.items())
    header = {"config": model.config.to_dict(), "step": int(step), "extra": extra or {}}
    write_container(path, header, named)


def load_checkpoint(path):
    """Rebuild a model from ``path``; returns ``(model, header, optimizer_arrays)``."""
    header, arrays = read_container(path)
    model = STNMamba(ModelConfig.from_dict(header["config"]))
    state = model.state_dict()
    missing = [k for k in state if k not in arrays]
    if missing:
        raise ConfigError("%s is missing tensors: %s" % (path, ", ".join(missing[:5])))
    model.load_state_dict({k: torch.from_numpy(arrays[k]) for k in state})
    optim = {k: v for k, v in arrays.items() if k.startswith("optim/")}
    return model, header, optim

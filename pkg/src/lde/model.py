"""Desk-scale dual-stream backbone.

Identity stream: stem conv, then four stride-2 conv blocks. A DDM follows every
block and only its identity part ``F_i+`` is passed on. Domain stream: the four
domain parts ``F_i-`` are projected onto the level-4 grid, refined by MSLS and
summed. ``f+`` and ``f-`` are the pooled outputs of the two streams.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decouple import DdmParams, ddm_forward, msls_forward, project_ur
from .expansion import ClassifierHead
from .numcore import (RunningStats, Rng, Tensor, conv2d, dump_tensor, global_avg_pool, load_tensor, parameter,
                      relu)

CHECKPOINT_MAGIC = b"LDECKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_ids: int
    in_channels: int = 3
    height: int = 64
    width: int = 64
    stem_width: int = 16
    widths: tuple[int, ...] = (16, 32, 64, 128)
    reduction: int = 4
    stem_stride: int = 1
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4:
            raise ValueError(f"need exactly four block widths, got {self.widths}")
        if any(w % 2 for w in self.widths):
            raise ValueError(f"all block widths must be even for the DDM split, got {self.widths}")
        if self.num_ids < 1:
            raise ValueError("num_ids must be >= 1")
        h, w = self.spatial_sizes()[-1]
        if h < 1 or w < 1:
            raise ValueError("input too small: spatial size after four stride-2 blocks < 1x1")
        for hh, ww in self.spatial_sizes():
            if hh % h or ww % w:
                raise ValueError(f"input {self.height}x{self.width} does not pool evenly onto the level-4 grid")

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    def spatial_sizes(self) -> list[tuple[int, int]]:
        def down(n, s):
            return (n + 2 - 3) // s + 1

        h, w = down(self.height, self.stem_stride), down(self.width, self.stem_stride)
        sizes = []
        for _ in range(4):
            h, w = down(h, 2), down(w, 2)
            sizes.append((h, w))
        return sizes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class BlockFeatures:
    F: Tensor
    F_norm: Tensor
    F_plus: Tensor
    F_minus: Tensor
    a: Tensor
    F_ur: Tensor | None = None


@dataclass
class ForwardArtifacts:
    blocks: list[BlockFeatures]
    f_plus: Tensor
    f_minus: Tensor
    logits: Tensor
    masks: list[np.ndarray] = field(default_factory=list)


def init_params(config: ModelConfig, rng: Rng) -> tuple[dict[str, Tensor], dict[str, RunningStats]]:
    """He fan-in init for conv/linear weights, unit/zero norm affines, zero MSLS scales."""
    dt = np.dtype(config.dtype)
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}

    def he(name, shape, fan_in):
        params[name] = parameter((rng.normal(shape) * np.sqrt(2.0 / fan_in)).astype(dt), name)

    def const(name, shape, value):
        params[name] = parameter(np.full(shape, value, dtype=dt), name)

    c_in = config.in_channels
    he("stem.w", (config.stem_width, c_in, 3, 3), c_in * 9)
    const("stem.b", (config.stem_width,), 0.0)
    prev = config.stem_width
    C4 = config.widths[-1]
    for i, C in enumerate(config.widths, start=1):
        he(f"block{i}.w", (C, prev, 3, 3), prev * 9)
        const(f"block{i}.b", (C,), 0.0)
        h = C // 2
        const(f"ddm{i}.in_gamma", (h,), 1.0)
        const(f"ddm{i}.in_beta", (h,), 0.0)
        const(f"ddm{i}.bn_gamma", (C - h,), 1.0)
        const(f"ddm{i}.bn_beta", (C - h,), 0.0)
        hidden = max(1, C // config.reduction)
        he(f"ddm{i}.fc1_w", (hidden, C), C)
        const(f"ddm{i}.fc1_b", (hidden,), 0.0)
        he(f"ddm{i}.fc2_w", (C, hidden), hidden)
        const(f"ddm{i}.fc2_b", (C,), 0.0)
        stats[f"ddm{i}.bn"] = RunningStats()
        if i < 4:
            he(f"proj{i}.w", (C4, C, 1, 1), C)
            const(f"proj{i}.b", (C4,), 0.0)
        const(f"msls{i}.beta", (), 0.0)
        prev = C
    he("head.W", (config.num_ids, config.embed_dim), config.embed_dim)
    const("head.b", (config.num_ids,), 0.0)
    return params, stats


class LdeModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 bn_stats: dict[str, RunningStats] | None = None, rng: Rng | None = None):
        self.config = config
        if params is None:
            params, bn_stats = init_params(config, rng or Rng(config.seed))
        self.params = params
        self.bn_stats = bn_stats

    @property
    def head(self) -> ClassifierHead:
        return ClassifierHead(self.params["head.W"], self.params["head.b"])

    def ddm(self, i: int) -> DdmParams:
        p = self.params
        return DdmParams(p[f"ddm{i}.in_gamma"], p[f"ddm{i}.in_beta"], p[f"ddm{i}.bn_gamma"], p[f"ddm{i}.bn_beta"],
                         p[f"ddm{i}.fc1_w"], p[f"ddm{i}.fc1_b"], p[f"ddm{i}.fc2_w"], p[f"ddm{i}.fc2_b"],
                         self.bn_stats[f"ddm{i}.bn"])

    def forward(self, images, mode: str = "train") -> ForwardArtifacts:
        cfg = self.config
        p = self.params
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=cfg.dtype))
        if x.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.height, cfg.width):
            raise ValueError(f"expected images [N,{cfg.in_channels},{cfg.height},{cfg.width}], got {x.shape}")
        x = relu(conv2d(x, p["stem.w"], p["stem.b"], stride=cfg.stem_stride, pad=1))
        blocks = []
        for i in range(1, 5):
            F = relu(conv2d(x, p[f"block{i}.w"], p[f"block{i}.b"], stride=2, pad=1))
            F_plus, F_minus, a, Fn = ddm_forward(F, self.ddm(i), mode)
            blocks.append(BlockFeatures(F, Fn, F_plus, F_minus, a))
            x = F_plus
        grid = blocks[-1].F.shape[2:]
        ur = []
        for i, blk in enumerate(blocks, start=1):
            w, b = (p[f"proj{i}.w"], p[f"proj{i}.b"]) if i < 4 else (None, None)
            blk.F_ur = project_ur(blk.F_minus, i, w, b, grid)
            ur.append(blk.F_ur)
        F_dom, masks = msls_forward(ur, [p[f"msls{i}.beta"] for i in range(1, 5)])
        f_plus = global_avg_pool(blocks[-1].F_plus)
        f_minus = global_avg_pool(F_dom)
        return ForwardArtifacts(blocks, f_plus, f_minus, self.head(f_plus), masks)

    __call__ = forward

    def detached(self) -> "LdeModel":
        """Same weights without gradient tracking; running stats are shared."""
        frozen = {k: Tensor(v.data) for k, v in self.params.items()}
        return LdeModel(self.config, frozen, self.bn_stats)

    def embed(self, images, batch_size: int = 64) -> np.ndarray:
        """Eval-mode ``f+`` for a stack of images."""
        net = self.detached()
        out = [net.forward(images[s:s + batch_size], mode="eval").f_plus.data
               for s in range(0, len(images), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.embed_dim))

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v.data for k, v in self.params.items()}
        for k, s in self.bn_stats.items():
            if s.initialized:
                out[f"buffer.{k}.mean"] = s.mean
                out[f"buffer.{k}.var"] = s.var
        return out

    @classmethod
    def from_state(cls, config: ModelConfig, tensors: dict[str, np.ndarray]) -> "LdeModel":
        ref_params, ref_stats = init_params(config, Rng(0))
        params = {}
        for k, ref in ref_params.items():
            key = f"param.{k}"
            if key not in tensors:
                raise ValueError(f"checkpoint is missing tensor {key!r}")
            arr = tensors[key]
            if arr.shape != ref.shape:
                raise ValueError(f"checkpoint tensor {key!r} has shape {arr.shape}, expected {ref.shape}")
            params[k] = parameter(arr.astype(config.dtype), k)
        stats = {}
        for k in ref_stats:
            m, v = tensors.get(f"buffer.{k}.mean"), tensors.get(f"buffer.{k}.var")
            # buffers are stored as f64; restore the model dtype so resumed updates round the same way
            stats[k] = RunningStats(None if m is None else m.astype(config.dtype),
                                    None if v is None else v.astype(config.dtype))
        return cls(config, params, stats)


# --------------------------------------------------------------------------
# Checkpoint container
# --------------------------------------------------------------------------

def save_checkpoint(path, config: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Magic, version, JSON header (config echo, tensor names, meta), then named tensor dumps."""
    names = list(tensors)
    header = json.dumps({"version": CHECKPOINT_VERSION, "config": config, "tensors": names, "meta": meta or {}},
                        sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for name in names:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            dump_tensor(tensors[name], fh)
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not an LDE checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        try:
            header = json.loads(fh.read(hlen))
        except ValueError as e:
            raise CheckpointError(f"{path}: corrupted header ({e})") from None
        tensors = {}
        for expected in header["tensors"]:
            try:
                (n,) = struct.unpack("<I", fh.read(4))
                name = fh.read(n).decode()
                if name != expected:
                    raise ValueError(f"found name {name!r}")
                arr = load_tensor(fh)
            except (ValueError, struct.error, UnicodeDecodeError) as e:
                raise CheckpointError(f"{path}: failed to read tensor {expected!r}: {e}") from None
            if not np.all(np.isfinite(arr)):
                raise CheckpointError(f"{path}: tensor {expected!r} contains non-finite values")
            tensors[expected] = arr
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return header["config"], tensors, header["meta"]

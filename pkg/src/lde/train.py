"""Training loop: PK batches, forward, objective, Adam step, then domain statistics.

Per-iteration randomness is drawn from ``Rng(seed).child(n)``, so a run resumed
from a checkpoint at iteration ``n`` sees exactly the batches an uninterrupted
run would have seen.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Record, domain_of, load_images
from .expansion import DomainStats, LossConfig, loss_terms, update_domain_stats
from .model import LdeModel, ModelConfig, load_checkpoint, save_checkpoint
from .numcore import NumericError, Rng

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "lr", "ce", "trace_term", "triplet", "total")


@dataclass
class TrainConfig:
    P: int = 8
    K_inst: int = 8
    base_lr: float = 3.5e-4
    final_lr: float = 7.7e-7
    iterations: int = 2000
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    lam: float = 1.0
    margin: float = 0.3
    exclude_own_domain: bool = False
    freeze_msls: bool = False
    flip: bool = True
    seed: int = 0
    dtype: str = "float32"
    scenes_per_domain: int = 1
    widths: tuple[int, ...] = (16, 32, 64, 128)
    stem_width: int = 16
    stem_stride: int = 2
    reduction: int = 4
    checkpoint_every: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.widths = tuple(self.widths)
        if self.P < 2 or self.K_inst < 2:
            raise ValueError(f"batch-hard triplets need P >= 2 and K_inst >= 2, got P={self.P}, K_inst={self.K_inst}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")

    @property
    def batch_size(self) -> int:
        return self.P * self.K_inst

    def loss_config(self) -> LossConfig:
        return LossConfig(lam=self.lam, triplet_margin=self.margin, exclude_own_domain=self.exclude_own_domain)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["widths"] = list(self.widths)
        return d


def lr_at(n: int, config: TrainConfig) -> float:
    """Cosine interpolation from ``base_lr`` (n=0) to ``final_lr`` (n=iterations)."""
    m = config.iterations
    if not 0 <= n <= max(m, 0):
        raise ValueError(f"iteration {n} outside [0, {m}]")
    t = n / m if m else 1.0
    return config.final_lr + 0.5 * (config.base_lr - config.final_lr) * (1 + math.cos(math.pi * t))


def pk_sample(records: Sequence, P: int, K_inst: int, rng: Rng) -> np.ndarray:
    """Indices of a batch with ``P`` distinct identities x ``K_inst`` instances each.

    ``records`` may be Records or plain labels. Identities with fewer than
    ``K_inst`` images are sampled with replacement.
    """
    labels = np.array([getattr(r, "pid", r) for r in records])
    ids = np.unique(labels)
    if len(ids) < P:
        raise ValueError(f"PK sampling needs >= {P} identities, only {len(ids)} available")
    chosen = rng.choice(ids, size=P, replace=False)
    out = []
    for pid in chosen:
        pool = np.flatnonzero(labels == pid)
        out.extend(rng.choice(pool, size=K_inst, replace=len(pool) < K_inst))
    return np.asarray(out, dtype=np.int64)


def augment(images: np.ndarray, rng: Rng, flip: bool = True, force: bool | None = None) -> np.ndarray:
    """Random horizontal flip with probability 0.5 per image (``[C,H,W]`` or ``[N,C,H,W]``)."""
    if not flip:
        return images
    single = images.ndim == 3
    x = images[None] if single else images
    if force is None:
        mask = rng.uniform(size=len(x)) < 0.5
    else:
        mask = np.full(len(x), bool(force))
    out = x.copy()
    out[mask] = out[mask][..., ::-1]
    return out[0] if single else out


# --------------------------------------------------------------------------
# State
# --------------------------------------------------------------------------

@dataclass
class TrainData:
    images: np.ndarray
    labels: np.ndarray  # union label space
    domains: np.ndarray
    label_map: dict[tuple[int, int], int]

    @classmethod
    def from_records(cls, records: Sequence[Record], root, scenes_per_domain: int = 1, dtype="float32",
                     images: np.ndarray | None = None) -> "TrainData":
        domains = np.array([domain_of(r, scenes_per_domain) for r in records], dtype=np.int64)
        keys = sorted({(int(d), r.pid) for d, r in zip(domains, records)})
        label_map = {k: i for i, k in enumerate(keys)}
        labels = np.array([label_map[(int(d), r.pid)] for d, r in zip(domains, records)], dtype=np.int64)
        if images is None:
            images = load_images(records, root, dtype)
        return cls(images, labels, domains, label_map)

    @property
    def num_ids(self) -> int:
        return len(self.label_map)


@dataclass
class TrainState:
    model: LdeModel
    config: TrainConfig
    iteration: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    stats: dict[int, DomainStats] = field(default_factory=dict)

    @property
    def loss_config(self) -> LossConfig:
        return self.config.loss_config()


def model_config_for(config: TrainConfig, num_ids: int, height: int, width: int) -> ModelConfig:
    return ModelConfig(num_ids=num_ids, height=height, width=width, stem_width=config.stem_width,
                       widths=config.widths, reduction=config.reduction, stem_stride=config.stem_stride,
                       dtype=config.dtype, seed=config.seed)


def init_state(config: TrainConfig, num_ids: int, height: int, width: int) -> TrainState:
    mc = model_config_for(config, num_ids, height, width)
    return TrainState(LdeModel(mc, rng=Rng(config.seed).child(0)), config)


def _trainable(state: TrainState) -> list[str]:
    names = list(state.model.params)
    if state.config.freeze_msls:
        names = [n for n in names if not n.startswith("msls")]
    return names


def adam_update(state: TrainState, lr: float) -> None:
    b1, b2 = state.config.adam_betas
    t = state.iteration + 1
    for name in _trainable(state):
        p = state.model.params[name]
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        m = state.adam_m.get(name, np.zeros(p.shape))
        v = state.adam_v.get(name, np.zeros(p.shape))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.adam_m[name], state.adam_v[name] = m, v
        step = lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + state.config.adam_eps)
        p.data = (p.data - step).astype(p.dtype)


def train_step(state: TrainState, images: np.ndarray, labels: np.ndarray, domains: np.ndarray) -> dict[str, float]:
    """One iteration; returns the logged loss parts."""
    model = state.model
    for p in model.params.values():
        p.zero_grad()
    out = model.forward(images, mode="train")
    terms = loss_terms(out.f_plus, labels, domains, model.head, state.stats, state.loss_config)
    vals = {k: float(v.data) for k, v in terms.items()}
    if not all(np.isfinite(v) for v in vals.values()):
        raise NumericError(f"non-finite loss at iteration {state.iteration}: {vals}")
    terms["total"].backward()
    grad_norms = {k: float(np.linalg.norm(p.grad)) for k, p in model.params.items() if p.grad is not None}
    if not all(np.isfinite(v) for v in grad_norms.values()):
        bad = {k: v for k, v in grad_norms.items() if not np.isfinite(v)}
        raise NumericError(f"non-finite gradients at iteration {state.iteration}: loss parts {vals}, grad norms {bad}")
    lr = lr_at(state.iteration, state.config)
    adam_update(state, lr)
    f_minus = out.f_minus.data.astype(np.float64)
    D = f_minus.shape[1]
    for d in np.unique(domains):
        st = state.stats.setdefault(int(d), DomainStats(int(d), D))
        update_domain_stats(st, f_minus[domains == d])
    state.iteration += 1
    return {"iteration": state.iteration - 1, "lr": lr, **{k: vals[k] for k in ("ce", "trace_term", "triplet", "total")}}


def next_batch(state: TrainState, data: TrainData) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = Rng(state.config.seed).child(1, state.iteration)
    idx = pk_sample(data.labels, state.config.P, state.config.K_inst, rng.child(0))
    x = augment(data.images[idx], rng.child(1), state.config.flip)
    return x, data.labels[idx], data.domains[idx]


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_train_checkpoint(state: TrainState, path, extra_meta: dict | None = None) -> None:
    tensors = state.model.state_tensors()
    for k in sorted(state.adam_m):
        tensors[f"adam.m.{k}"] = state.adam_m[k]
        tensors[f"adam.v.{k}"] = state.adam_v[k]
    for d in sorted(state.stats):
        s = state.stats[d]
        tensors[f"stats.{d}.mean"] = s.mean
        tensors[f"stats.{d}.scatter"] = s.scatter
    meta = {"iteration": state.iteration, "train_config": state.config.to_dict(),
            "stats_counts": {str(d): s.count for d, s in sorted(state.stats.items())}}
    meta.update(extra_meta or {})
    save_checkpoint(path, state.model.config.to_dict(), tensors, meta)


def load_train_checkpoint(path) -> tuple[TrainState, dict]:
    cfg, tensors, meta = load_checkpoint(path)
    mc = ModelConfig(**cfg)
    model = LdeModel.from_state(mc, tensors)
    tc = TrainConfig(**meta.get("train_config", {"dtype": mc.dtype}))
    state = TrainState(model, tc, int(meta.get("iteration", 0)))
    for k in tensors:
        if k.startswith("adam.m."):
            name = k[len("adam.m."):]
            state.adam_m[name] = tensors[k]
            state.adam_v[name] = tensors[f"adam.v.{name}"]
    for d, n in meta.get("stats_counts", {}).items():
        d = int(d)
        mean = tensors[f"stats.{d}.mean"]
        state.stats[d] = DomainStats(d, len(mean), int(n), mean.copy(), tensors[f"stats.{d}.scatter"].copy())
    return state, meta


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    checkpoint: Path | None


def moving_average(values: Sequence[float], end: int, window: int = 10) -> float:
    lo = max(0, end - window)
    return float(np.mean(values[lo:end]))


def train(config: TrainConfig, data: TrainData, outdir=None, state: TrainState | None = None,
          log_rows: list[dict] | None = None, stop_at: int | None = None, progress=None) -> TrainResult:
    """Run (or resume) training up to ``config.iterations`` (or ``stop_at``)."""
    if state is None:
        H, W = data.images.shape[2:]
        state = init_state(config, data.num_ids, H, W)
    rows = list(log_rows or [])
    out = Path(outdir) if outdir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    meta = {"label_map": [[d, p, i] for (d, p), i in sorted(data.label_map.items(), key=lambda kv: kv[1])]}
    while state.iteration < end:
        x, y, dom = next_batch(state, data)
        row = train_step(state, x, y, dom)
        rows.append(row)
        if progress is not None:
            progress(row)
        if out is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            save_train_checkpoint(state, out / f"ckpt_{state.iteration:06d}.ckpt", meta)
    ckpt = None
    if out is not None:
        ckpt = out / "model.ckpt"
        save_train_checkpoint(state, ckpt, meta)
        write_log(rows, out / "train_log.csv")
    return TrainResult(state, rows, ckpt)


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k != "iteration" else int(r[k])) for k in LOG_COLUMNS})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]

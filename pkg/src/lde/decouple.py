"""Domain decoupling (DDM) and mutual-similarity lifting/suppression (MSLS).

A DDM normalizes a block's feature map (instance norm on the first channel
half, batch norm on the second), then splits it with a channel attention
vector ``a`` into an identity part ``a*F'`` and a domain part ``(1-a)*F'``.

MSLS refines the domain parts from the four blocks. Each level's projected map
is compared channel-by-channel against itself and against the other three
levels; entries where self-similarity is at least the average cross-level
similarity are kept ("lifted") and the rest are masked out of a row softmax.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .numcore import (RunningStats, Tensor, avg_pool_to, batch_norm, concat, conv2d, global_avg_pool,
                      instance_norm, linear, matmul, relu, reshape, sigmoid, softmax_rows, sqrt, transpose)

log = logging.getLogger(__name__)

SIM_EPS = 1e-12


@dataclass
class DdmParams:
    in_gamma: Tensor
    in_beta: Tensor
    bn_gamma: Tensor
    bn_beta: Tensor
    fc1_w: Tensor  # [C/r, C]
    fc1_b: Tensor
    fc2_w: Tensor  # [C, C/r]
    fc2_b: Tensor
    bn_stats: RunningStats = field(default_factory=RunningStats)

    @property
    def channels(self) -> int:
        return self.fc2_w.shape[0]


def ddm_forward(F: Tensor, p: DdmParams, mode: str = "train") -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Return ``(F_plus, F_minus, a, F_norm)`` for a block output ``F[N,C,H,W]``."""
    N, C, H, W = F.shape
    if C % 2:
        raise ValueError(f"DDM needs an even channel count, got C={C}")
    if C != p.channels:
        raise ValueError(f"DDM built for {p.channels} channels, got input {F.shape}")
    if mode == "train" and N < 2:
        raise ValueError("DDM in train mode needs N >= 2 for the batch-norm half")
    h = C // 2
    f_in = instance_norm(F[:, :h], p.in_gamma, p.in_beta)
    f_bn = batch_norm(F[:, h:], p.bn_stats, p.bn_gamma, p.bn_beta, mode=mode)
    Fn = concat([f_in, f_bn], axis=1)
    z = relu(linear(global_avg_pool(Fn), p.fc1_w, p.fc1_b))
    a = sigmoid(linear(z, p.fc2_w, p.fc2_b))
    a4 = reshape(a, (N, C, 1, 1))
    F_plus = a4 * Fn
    F_minus = (1.0 - a4) * Fn
    return F_plus, F_minus, a, Fn


def project_ur(F_minus: Tensor, level: int, proj_w: Tensor | None, proj_b: Tensor | None,
               target_hw: tuple[int, int]) -> Tensor:
    """Map a level-1..3 domain map onto the level-4 geometry (1x1 conv + average pooling).

    Level 4 is returned unchanged.
    """
    if level == 4:
        return F_minus
    if level not in (1, 2, 3):
        raise ValueError(f"level must be in 1..4, got {level}")
    H, W = F_minus.shape[2:]
    if target_hw[0] > H or target_hw[1] > W:
        raise ValueError(f"target size {target_hw} larger than source {H}x{W}: upsampling unsupported")
    # a 1x1 conv commutes with average pooling; pooling first is cheaper
    return conv2d(avg_pool_to(F_minus, target_hw), proj_w, proj_b)


def channel_similarity(A: Tensor, B: Tensor, eps: float = SIM_EPS) -> Tensor:
    """Per-sample cosine similarity between channels: ``Q[n,i,j] = cos(A[n,i], B[n,j])``."""
    if A.shape != B.shape:
        raise ValueError(f"channel_similarity shape mismatch: {A.shape} vs {B.shape}")
    N, C = A.shape[:2]
    a = reshape(A, (N, C, -1))
    b = reshape(B, (N, C, -1))
    an = a / sqrt((a * a).sum(axis=2, keepdims=True) + eps)
    bn = b / sqrt((b * b).sum(axis=2, keepdims=True) + eps)
    return matmul(an, transpose(bn, (0, 2, 1)))


def msls_masks(Q_self, Q_mutual) -> tuple[np.ndarray, np.ndarray]:
    """Lift mask ``Q_self >= mean(Q_mutual)`` and its complement."""
    Q_self = np.asarray(getattr(Q_self, "data", Q_self))
    mutual = [np.asarray(getattr(q, "data", q)) for q in Q_mutual]
    if len(mutual) != 3:
        raise ValueError(f"expected three mutual similarity matrices, got {len(mutual)}")
    for q in mutual:
        if q.shape != Q_self.shape:
            raise ValueError(f"similarity shape mismatch: {q.shape} vs {Q_self.shape}")
    # Q_self >= mean, compared as 3*Q_self >= sum: dividing by 3 rounds and would break
    # the equality case (three copies of Q_self must lift everything)
    lift = (3.0 * Q_self >= mutual[0] + mutual[1] + mutual[2]).astype(np.int8)
    return lift, 1 - lift


def msls_refine(F_ur: Tensor, Q_self: Tensor, mask_lift: np.ndarray, beta: Tensor) -> Tensor:
    """``beta * (Q' @ flat(F_ur)) + F_ur`` with ``Q'`` the row softmax over lifted entries.

    ``Q_self`` may be per-sample ``[N,C,C]`` or shared ``[C,C]``; the mask is shared.
    """
    lift = np.asarray(mask_lift).astype(bool)
    dead = ~lift.any(axis=-1)
    if dead.any():
        rows = np.flatnonzero(dead)
        log.warning("MSLS: rows %s fully suppressed; falling back to self-only lift", rows.tolist())
        lift = lift.copy()
        lift[rows, rows] = True
    N, C, H, W = F_ur.shape
    Qp = softmax_rows(Q_self, mask=~lift)
    mixed = matmul(Qp, reshape(F_ur, (N, C, H * W)))
    return reshape(beta, (1, 1, 1, 1)) * reshape(mixed, (N, C, H, W)) + F_ur


def msls_level_masks(ur: list[Tensor]) -> list[tuple[Tensor, np.ndarray]]:
    """For each level, the per-sample self-similarity and the batch-level lift mask."""
    out = []
    for i, Fi in enumerate(ur):
        q_self = channel_similarity(Fi, Fi)
        mutual = [channel_similarity(Fi, Fj).data.mean(axis=0) for j, Fj in enumerate(ur) if j != i]
        lift, _ = msls_masks(q_self.data.mean(axis=0), mutual)
        out.append((q_self, lift))
    return out


def fuse_domain(maps: list[Tensor]) -> Tensor:
    if len(maps) != 4:
        raise ValueError(f"fuse_domain expects four maps, got {len(maps)}")
    for m in maps[1:]:
        if m.shape != maps[0].shape:
            raise ValueError(f"fuse_domain shape mismatch: {m.shape} vs {maps[0].shape}")
    return maps[0] + maps[1] + maps[2] + maps[3]


def msls_forward(ur: list[Tensor], betas: list[Tensor]) -> tuple[Tensor, list[np.ndarray]]:
    """Refine the four UR maps and sum them into the purified domain map."""
    refined, masks = [], []
    for (q_self, lift), Fi, beta in zip(msls_level_masks(ur), ur, betas):
        refined.append(msls_refine(Fi, q_self, lift, beta))
        masks.append(lift)
    return fuse_domain(refined), masks

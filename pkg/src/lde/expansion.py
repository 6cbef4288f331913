"""Implicit domain expansion.

Identity features ``f+`` are (virtually) perturbed by Gaussian directions drawn
from the covariance of the domain features ``f-`` of each source domain.
``mc_expanded_ce`` does this explicitly with K samples; ``analytic_lde_ce`` is
the K -> infinity limit truncated at second order, where the perturbation only
survives through ``tr(Sigma * Hessian(CE))``. For a softmax-linear head that
trace has the closed form ``sum_c p_c A_cc - p^T A p`` with ``A = W Sigma W^T``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numcore import (NumericError, Rng, Tensor, as_tensor, cholesky_psd, clamp_min, cross_entropy, linear,
                      matmul, relu, softmax_rows, sqrt, tmax, tmin, transpose)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Domain statistics
# --------------------------------------------------------------------------

@dataclass
class DomainStats:
    """Running mean and scatter of one domain's ``f-`` vectors."""

    domain_id: int
    dim: int
    count: int = 0
    mean: np.ndarray = None
    scatter: np.ndarray = None

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.dim)
        if self.scatter is None:
            self.scatter = np.zeros((self.dim, self.dim))

    @property
    def covariance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros((self.dim, self.dim))
        return self.scatter / self.count


def update_domain_stats(stats: DomainStats, batch) -> DomainStats:
    """Fold a chunk of vectors into ``stats`` in place (Chan et al. pairwise merge)."""
    x = np.asarray(getattr(batch, "data", batch), dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim != 2 or x.shape[1] != stats.dim:
        raise ValueError(f"domain {stats.domain_id}: expected [B, {stats.dim}] features, got {x.shape}")
    nb = x.shape[0]
    if nb == 0:
        return stats
    mb = x.mean(axis=0)
    xc = x - mb
    sb = xc.T @ xc
    na = stats.count
    n = na + nb
    delta = mb - stats.mean
    stats.mean = stats.mean + delta * (nb / n)
    stats.scatter = stats.scatter + sb + np.outer(delta, delta) * (na * nb / n)
    stats.scatter = 0.5 * (stats.scatter + stats.scatter.T)
    stats.count = n
    return stats


# --------------------------------------------------------------------------
# Heads and configs
# --------------------------------------------------------------------------

@dataclass
class ClassifierHead:
    W: Tensor  # [M, D]
    b: Tensor  # [M]

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def __call__(self, f: Tensor) -> Tensor:
        return linear(f, self.W, self.b)


@dataclass
class LossConfig:
    lam: float = 1.0
    K: int = 100_000
    triplet_margin: float = 0.3
    jitter: float = 1e-6
    exclude_own_domain: bool = False
    min_count: int | None = None  # None: D + 1


def _as_covariances(stats, dim: int, min_count: int | None) -> dict[int, np.ndarray]:
    """Normalize ``stats`` (DomainStats list/dict or id -> matrix dict) to usable covariances."""
    if isinstance(stats, Mapping) and all(not isinstance(v, DomainStats) for v in stats.values()):
        return {int(k): np.asarray(v, dtype=np.float64) for k, v in stats.items()}
    items = stats.values() if isinstance(stats, Mapping) else stats
    need = dim + 1 if min_count is None else min_count
    covs = {}
    for s in items:
        if s.count >= max(need, 2):
            covs[s.domain_id] = s.covariance
        elif s.count > 0:
            log.debug("domain %d: %d samples < %d, expansion skipped", s.domain_id, s.count, need)
    return covs


def _domain_weights(domains: np.ndarray) -> np.ndarray:
    """Per-sample weights 1/(S*N_n): each present domain contributes its mean, domains averaged."""
    uniq, inv, counts = np.unique(domains, return_inverse=True, return_counts=True)
    return 1.0 / (len(uniq) * counts[inv])


def _summed_cov(covs: dict[int, np.ndarray], own: int, exclude_own: bool, dim: int) -> np.ndarray:
    total = np.zeros((dim, dim))
    for j, c in covs.items():
        if exclude_own and j == own:
            continue
        total = total + c
    return total


# --------------------------------------------------------------------------
# Sampling and the Monte-Carlo oracle
# --------------------------------------------------------------------------

def sample_directions(cov, scale: float, K: int, rng: Rng, jitter: float = 0.0) -> np.ndarray:
    """``K`` draws of ``sqrt(scale) * L z`` with ``L L^T = cov (+ jitter)``."""
    cov = np.asarray(cov, dtype=np.float64)
    if K < 1:
        raise ValueError("K must be >= 1")
    if scale < 0:
        raise ValueError("scale must be >= 0")
    D = cov.shape[0]
    z = rng.normal((K, D))
    if scale == 0 or not np.any(cov):
        return np.zeros((K, D))
    L = cholesky_psd(cov, jitter)
    return np.sqrt(scale) * z @ L.T


def _standard_draws(K: int, D: int, rng: Rng, sampling: str) -> np.ndarray:
    if sampling == "plain":
        return rng.normal((K, D))
    if K % 2:
        raise ValueError(f"{sampling} sampling needs an even K")
    half = rng.normal((K // 2, D))
    z = np.concatenate([half, -half])
    if sampling == "antithetic":
        return z
    if sampling == "moment_matched":
        # exact zero mean (antithetic) and identity second moment
        C = z.T @ z / K
        L = np.linalg.cholesky(C)
        return np.linalg.solve(L, z.T).T
    raise ValueError(f"unknown sampling {sampling!r}")


@dataclass
class MCResult:
    value: float
    stderr: float
    per_draw: np.ndarray = field(repr=False)


def _ce_rows(logits: np.ndarray, y: int) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1))
    return lse - logits[..., y]


def mc_expanded_ce(f_plus, labels, domains, head: ClassifierHead, covs, lam: float, K: int, rng: Rng,
                   exclude_own_domain: bool = False, sampling: str = "plain", jitter: float = 0.0,
                   min_count: int | None = None) -> MCResult:
    """Brute-force K-sample expanded cross-entropy.

    Each sample of domain ``n`` is shifted by ``xi = sum_j xi_j`` with independent
    ``xi_j ~ N(0, lam * Sigma_j)``, i.e. one draw from ``N(0, lam * sum_j Sigma_j)``.
    Returns the mean over draws and its standard error.
    """
    f = np.asarray(getattr(f_plus, "data", f_plus), dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    W = np.asarray(head.W.data, dtype=np.float64)
    b = np.asarray(head.b.data, dtype=np.float64)
    B, D = f.shape
    covs = _as_covariances(covs, D, min_count)
    weights = _domain_weights(domains)
    per_draw = np.zeros(K)
    for i in range(B):
        cov = _summed_cov(covs, int(domains[i]), exclude_own_domain, D)
        base = f[i] @ W.T + b
        if lam == 0 or not np.any(cov):
            per_draw += weights[i] * _ce_rows(base[None], labels[i])[0]
            continue
        L = cholesky_psd(cov, jitter)
        z = _standard_draws(K, D, rng.child(i), sampling)
        xi = np.sqrt(lam) * z @ L.T
        logits = base + xi @ W.T
        per_draw += weights[i] * _ce_rows(logits, labels[i])
    if sampling == "plain":
        se = per_draw.std(ddof=1) / np.sqrt(K) if K > 1 else float("nan")
    else:
        pairs = 0.5 * (per_draw[: K // 2] + per_draw[K // 2:])
        se = pairs.std(ddof=1) / np.sqrt(len(pairs)) if len(pairs) > 1 else float("nan")
    return MCResult(float(per_draw.mean()), float(se), per_draw)


# --------------------------------------------------------------------------
# Closed-form second-order term
# --------------------------------------------------------------------------

def ce_hessian_trace(f, head: ClassifierHead, cov) -> Tensor:
    """``tr(Sigma * d^2 CE / df^2)`` for a softmax-linear head, per row of ``f``.

    Works on a single vector ``[D]`` (returns a scalar) or a batch ``[B, D]``.
    Differentiable in ``f``, ``W`` and ``b``; ``cov`` is a constant.
    """
    f = as_tensor(f)
    single = f.ndim == 1
    if single:
        f = f.reshape(1, -1)
    cov = np.asarray(getattr(cov, "data", cov), dtype=f.dtype)
    p = softmax_rows(head(f))
    WS = matmul(head.W, cov)
    diagA = (WS * head.W).sum(axis=1)
    A = matmul(WS, transpose(head.W))
    out = (p * diagA).sum(axis=1) - (matmul(p, A) * p).sum(axis=1)
    return out[0] if single else out


def _lde_ce_terms(f_plus: Tensor, labels, domains, head: ClassifierHead, covs, lam: float,
                  exclude_own_domain: bool = False, min_count: int | None = None) -> tuple[Tensor, Tensor]:
    f_plus = as_tensor(f_plus)
    labels = np.asarray(labels, dtype=np.int64)
    domains = np.asarray(domains, dtype=np.int64)
    B, D = f_plus.shape
    w = _domain_weights(domains).astype(f_plus.dtype)
    ce_i = cross_entropy(head(f_plus), labels, reduction="none")
    _check_rows(ce_i.data, "cross-entropy")
    ce = (ce_i * w).sum()
    trace = Tensor(np.zeros((), dtype=f_plus.dtype))
    covs = _as_covariances(covs, D, min_count) if lam != 0 else {}
    for n in np.unique(domains):
        cov = _summed_cov(covs, int(n), exclude_own_domain, D)
        if not np.any(cov):
            continue
        idx = np.flatnonzero(domains == n)
        t = ce_hessian_trace(f_plus[idx], head, cov)
        _check_rows(t.data, "trace term", idx)
        trace = trace + (t * w[idx]).sum()
    return ce, trace * (0.5 * lam)


def _check_rows(vals: np.ndarray, what: str, idx=None) -> None:
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        i = int(bad[0] if idx is None else idx[bad[0]])
        raise NumericError(f"non-finite {what} at sample {i}")


def analytic_lde_ce(f_plus, labels, domains, head: ClassifierHead, stats, lam: float,
                    exclude_own_domain: bool = False, min_count: int | None = None) -> Tensor:
    """Expanded cross-entropy in the infinite-sample limit.

    ``mean_n mean_{i in n} [CE(f_i) + lam/2 * sum_j tr(Sigma_j H_i)]`` where ``n`` runs
    over domains present in the batch and ``j`` over domains with usable statistics.
    """
    ce, trace = _lde_ce_terms(f_plus, labels, domains, head, stats, lam, exclude_own_domain, min_count)
    return ce + trace


# --------------------------------------------------------------------------
# Metric learning and the full objective
# --------------------------------------------------------------------------

def pairwise_distances(x: Tensor, eps: float = 1e-12) -> Tensor:
    diff = x.reshape(x.shape[0], 1, -1) - x.reshape(1, x.shape[0], -1)
    return sqrt(clamp_min((diff * diff).sum(axis=2), eps))


def triplet_loss(embeddings, labels, margin: float = 0.3) -> Tensor:
    """Batch-hard triplet loss; anchors without a positive are skipped."""
    x = as_tensor(embeddings)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    valid = pos.any(axis=1) & neg.any(axis=1)
    if len(np.unique(labels)) < 2 or not valid.any():
        raise ValueError("triplet_loss needs >= 2 identities and >= 2 instances of some identity in the batch")
    d = pairwise_distances(x)
    big = float(np.abs(d.data).max() + 1.0) * 4
    d_ap = tmax(d + np.where(pos, 0.0, -big).astype(d.dtype), axis=1)
    d_an = tmin(d + np.where(neg, 0.0, big).astype(d.dtype), axis=1)
    hinge = relu(d_ap - d_an + margin)
    idx = np.flatnonzero(valid)
    return hinge[idx].mean()


def loss_terms(f_plus, labels, domains, head: ClassifierHead, stats, config: LossConfig) -> dict[str, Tensor]:
    """All pieces of the training objective: ``ce``, ``trace_term``, ``triplet``, ``total``."""
    f_plus = as_tensor(f_plus)
    ce, trace = _lde_ce_terms(f_plus, labels, domains, head, stats, config.lam,
                              config.exclude_own_domain, config.min_count)
    tri = triplet_loss(f_plus, labels, config.triplet_margin)
    return {"ce": ce, "trace_term": trace, "triplet": tri, "total": tri + ce + trace}


def total_loss(f_plus, labels, domains, head: ClassifierHead, stats, config: LossConfig) -> Tensor:
    return loss_terms(f_plus, labels, domains, head, stats, config)["total"]

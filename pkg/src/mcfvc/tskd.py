"""Two-stage distillation losses between the frozen old model and the new one."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, DomainError
from .tensor import Tensor


def style_filter(S_A, mode: str = "row_mean", row_mask: np.ndarray | None = None) -> Tensor:
    """Second-order statistic of a semantic attention map (r×c) → c×c.

    ``row_mean``: s̄ s̄ᵀ / c with s̄ the mean over (unmasked) rows.
    ``gram``: S_Aᵀ S_A / (r·c), the Gram form used in style transfer.
    """
    S_A = T._wrap(S_A)
    if S_A.ndim != 2 or S_A.shape[0] < 1 or S_A.shape[1] < 1:
        raise DomainError(f"style filter needs a non-empty r×c map, got shape {S_A.shape}")
    r, c = S_A.shape
    if row_mask is not None:
        keep = np.flatnonzero(row_mask)
        if keep.size == 0:
            raise DomainError("style filter: every row is masked")
        if keep.size < r:
            S_A = S_A[keep]
            r = keep.size
    if mode == "row_mean":
        s = T.mean(S_A, axis=0, keepdims=True)  # 1×c
        return T.transpose(s) @ s * (1.0 / c)
    if mode == "gram":
        return T.transpose(S_A) @ S_A * (1.0 / (r * c))
    raise DomainError(f"unknown style mode {mode!r}")


def style_loss(s_new, s_old) -> Tensor:
    s_new, s_old = T._wrap(s_new), T._wrap(s_old)
    if s_new.shape != s_old.shape:
        raise ContractError(f"style matrices differ in shape: {s_new.shape} vs {s_old.shape}")
    return T.mse(s_new, s_old)


def batch_style_filter(S: Tensor, mask: np.ndarray, mode: str = "row_mean") -> Tensor:
    """Vectorised :func:`style_filter` over a [B, r, c] batch with a [B, r] row mask."""
    B, r, c = S.shape
    n = mask.sum(axis=1)
    if np.any(n == 0):
        raise DomainError("style filter: a sample has every row masked")
    Sm = S * mask[:, :, None]
    if mode == "row_mean":
        s = T.tsum(Sm, axis=1, keepdims=True) * (1.0 / n)[:, None, None]
        return T.transpose(s) @ s * (1.0 / c)
    if mode == "gram":
        return T.transpose(Sm) @ Sm * (1.0 / (n * c))[:, None, None]
    raise DomainError(f"unknown style mode {mode!r}")


def batch_style_loss(S_new: Tensor, S_old: Tensor, mask: np.ndarray, mode: str = "row_mean") -> Tensor:
    """Per-sample style loss averaged over the batch; PAD rows are excluded."""
    return style_loss(batch_style_filter(S_new, mask, mode), batch_style_filter(S_old, mask, mode))


@dataclass
class DistillBatch:
    z_new: Tensor
    z_old: Tensor
    tau: float = 0.5

    def __post_init__(self):
        self.z_new, self.z_old = T._wrap(self.z_new), T._wrap(self.z_old)
        if self.z_new.shape != self.z_old.shape:
            raise DimensionError(f"z_new {self.z_new.shape} and z_old {self.z_old.shape} differ")


def ntxent_distill(batch: DistillBatch) -> Tensor:
    """Contrastive distillation of text features.

    For new-model row i the positive is old-model row i; the denominator runs
    over the pooled 2·bs rows except the anchor's own position. Mean over i.
    """
    bs = batch.z_new.shape[0]
    if bs < 2:
        raise DomainError(f"contrastive distillation needs bs >= 2, got {bs}")
    if not batch.tau > 0:
        raise DomainError(f"temperature must be positive, got {batch.tau}")
    pool = T.concat([batch.z_new, batch.z_old], axis=0)  # 2bs × d
    sim = T.cosine_similarity_matrix(batch.z_new, pool) * (1.0 / batch.tau)  # bs × 2bs
    not_self = np.ones((bs, 2 * bs))
    not_self[np.arange(bs), np.arange(bs)] = 0.0
    # max-shift for stability; constant per row so it cancels in the ratio
    shift = sim.data.max(axis=1, keepdims=True)
    e = T.exp(sim - shift) * not_self
    positive = sim[np.arange(bs), np.arange(bs) + bs] - shift[:, 0]
    denom = T.tsum(e, axis=1)
    return T.mean(T.log(denom) - positive)


def total_loss(l_vc, l_style, l_c, varsigma: float, vartheta: float) -> Tensor:
    """``l_vc + ς (ϑ l_style + l_c)``."""
    return T._wrap(l_vc) + (T._wrap(l_style) * vartheta + l_c) * varsigma

"""Contrastive and intermediate-feature objectives.

* :func:`info_nce_loss` -- one positive key against a queue of negatives.
* :func:`intermediate_mse_loss` -- per-block MSE after adaptive pooling.
* :func:`cross_correlation` / :func:`barlow_twins_loss` -- redundancy reduction
  on projected block features.
* :func:`combined_loss` -- contrastive term plus scaled masked intermediate terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError
from .tensor import Tensor

PAPER_QUEUE_SIZE = 65536


@dataclass
class InfoNceConfig:
    temperature: float = 0.07
    queue_size: int = 256

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.queue_size < 1:
            raise ConfigError(f"queue_size must be >= 1, got {self.queue_size}")


@dataclass
class BarlowConfig:
    lambd: float = 5e-3
    scale: float = 5e-5

    def __post_init__(self):
        if self.lambd < 0 or self.scale < 0:
            raise ConfigError("Barlow Twins lambda and scale must be >= 0")


@dataclass
class MseConfig:
    scale: float = 0.25
    pool_sizes: Sequence[tuple[int, int]] = field(default_factory=lambda: ((8, 8), (8, 8), (2, 2), (2, 2)))

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigError(f"MSE scale must be >= 0, got {self.scale}")


def validate_block_mask(mask, num_blocks: int) -> tuple[int, ...]:
    """Return ``mask`` as a sorted tuple of 1-based block indices."""
    blocks = tuple(sorted({int(b) for b in mask}))
    if not blocks:
        raise ConfigError("block mask must name at least one block")
    bad = [b for b in blocks if not 1 <= b <= num_blocks]
    if bad:
        raise ConfigError(f"block mask references missing block(s) {bad}; encoder has {num_blocks}")
    return blocks


def info_nce_logits(q: Tensor, k_pos: Tensor, queue: Tensor, temperature: float) -> Tensor:
    """Rows ``[q·k+, q·z_1, ..., q·z_K] / tau``; positive in column 0."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if queue.shape[0] == 0:
        raise ConfigError("queue must hold at least one negative")
    if q.ndim != 2 or k_pos.shape != q.shape or queue.ndim != 2 or queue.shape[1] != q.shape[1]:
        raise DimensionError(f"info_nce: q {q.shape}, k+ {k_pos.shape}, queue {queue.shape}")
    k_pos = k_pos.detach()
    queue = queue.detach()
    pos = (q * k_pos).sum(axis=1, keepdims=True)
    neg = q @ queue.T
    return T.concat([pos, neg], axis=1) / temperature


def info_nce_loss(q: Tensor, k_pos: Tensor, queue: Tensor, temperature: float = 0.07) -> Tensor:
    """Mean InfoNCE over the batch; gradients flow through ``q`` only."""
    logits = info_nce_logits(q, k_pos, queue, temperature)
    return T.cross_entropy(logits, np.zeros(q.shape[0], dtype=np.int64))


def intermediate_mse_loss(
    taps_a: Sequence[Tensor],
    taps_b: Sequence[Tensor],
    pool_sizes: Sequence[tuple[int, int]],
    mask: Sequence[int] = (1, 2, 3, 4),
) -> tuple[list[Tensor | None], Tensor]:
    """Per-block MSE between adaptively pooled taps; ``None`` for unmasked blocks.

    Returns ``(per_block, total)`` where ``total`` sums the masked blocks.
    """
    if len(taps_a) != len(taps_b):
        raise DimensionError(f"tap lists differ in length: {len(taps_a)} vs {len(taps_b)}")
    blocks = validate_block_mask(mask, len(taps_a))
    per_block: list[Tensor | None] = [None] * len(taps_a)
    for b in blocks:
        a, c = taps_a[b - 1], taps_b[b - 1]
        if a.shape != c.shape:
            raise DimensionError(f"block {b}: tap shapes differ {a.shape} vs {c.shape}")
        oh, ow = pool_sizes[b - 1]
        pa = T.adaptive_avg_pool2d(a, oh, ow)
        pb = T.adaptive_avg_pool2d(c, oh, ow)
        per_block[b - 1] = T.mse(pa, pb)
    total = per_block[blocks[0] - 1]
    for b in blocks[1:]:
        total = total + per_block[b - 1]
    return per_block, total


def cross_correlation(za: Tensor, zb: Tensor) -> Tensor:
    """C_ij = sum_b za[b,i] zb[b,j] / (||za[:,i]|| ||zb[:,j]||), no mean-centering."""
    if za.ndim != 2 or za.shape != zb.shape:
        raise DimensionError(f"cross_correlation: shapes {za.shape} and {zb.shape} must match (b×d)")
    if za.shape[0] < 2:
        raise DimensionError("cross_correlation needs batch size >= 2")
    for name, z in (("zA", za), ("zB", zb)):
        norms = np.sqrt((z.data * z.data).sum(axis=0))
        bad = np.flatnonzero(norms <= 1e-12)
        if bad.size:
            raise NumericError(f"cross_correlation: column {int(bad[0])} of {name} has zero norm")
    norm_a = (za * za).sum(axis=0, keepdims=True).sqrt()
    norm_b = (zb * zb).sum(axis=0, keepdims=True).sqrt()
    return (za.T @ zb) / (norm_a.T @ norm_b)


def barlow_twins_loss(c: Tensor, lambd: float = 5e-3) -> Tensor:
    """sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2."""
    if lambd < 0:
        raise ConfigError(f"lambda must be >= 0, got {lambd}")
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise DimensionError(f"barlow_twins_loss needs a square matrix, got {c.shape}")
    eye = np.eye(c.shape[0], dtype=c.dtype)
    diag = (c * eye).sum(axis=1)
    on_diag = ((1.0 - diag) ** 2).sum()
    off = c * (1.0 - eye)
    return on_diag + lambd * (off * off).sum()


def combined_loss(
    contrastive: Tensor,
    intermediate_per_block: Sequence[Tensor | float | None],
    scale: float,
    mask: Sequence[int] = (1, 2, 3, 4),
) -> Tensor:
    """contrastive + scale * sum of the masked per-block terms."""
    if scale < 0:
        raise ConfigError(f"intermediate scale must be >= 0, got {scale}")
    blocks = validate_block_mask(mask, len(intermediate_per_block))
    terms = []
    for b in blocks:
        term = intermediate_per_block[b - 1]
        if term is None:
            raise ConfigError(f"block {b} is masked but has no intermediate loss")
        terms.append(T.as_tensor(term, dtype=contrastive.dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return contrastive + total * scale

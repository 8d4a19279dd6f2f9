"""Decoder attention: softmax baseline, sigmoid redistribution, and masking.

Global perturbation attention is the combination of two switches on
:class:`AttentionConfig`: ``variant="sigmoid"`` (global redistribution)
and ``self_mask=True`` with a nonzero ``attn_dropout_rate`` (global-self
masking). Neighbor-masked attention is provided as a baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, ContractError, DimensionError

SOFTMAX = "softmax"
SIGMOID = "sigmoid"
VARIANTS = (SOFTMAX, SIGMOID)
SCALE_NONE = "none"
SCALE_DIVIDE_BY_N = "divide_by_n"


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4
    variant: str = SOFTMAX
    self_mask: bool = False
    attn_dropout_rate: float = 0.0
    neighbor_mask_radius: Optional[int] = None
    output_scale_mode: str = SCALE_DIVIDE_BY_N

    def __post_init__(self):
        problems = []
        if self.n_heads < 1 or self.d_model % self.n_heads:
            problems.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.attn_dropout_rate < 1.0:
            problems.append(f"attn_dropout_rate must lie in [0, 1), got {self.attn_dropout_rate}")
        if self.neighbor_mask_radius is not None:
            if self.variant != SOFTMAX:
                problems.append("neighbor_mask_radius requires the softmax variant")
            if self.neighbor_mask_radius < 0:
                problems.append("neighbor_mask_radius must be >= 0")
        if self.output_scale_mode not in (SCALE_NONE, SCALE_DIVIDE_BY_N):
            problems.append(f"unknown output_scale_mode {self.output_scale_mode!r}")
        if problems:
            raise ConfigError(problems)

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class AttentionMask:
    """Boolean keep-matrix; ``True`` means the query may attend to the key.

    ``keep`` is either ``(N, N)`` or carries leading batch/head axes.
    """

    keep: np.ndarray

    def __and__(self, other: "AttentionMask") -> "AttentionMask":
        return AttentionMask(self.keep & other.keep)


def build_gsm_mask(n: int, self_mask: bool, dropout_rate: float, training: bool,
                   rng: Optional[np.random.Generator], batch_shape: tuple = ()) -> AttentionMask:
    """Global-self mask: zero diagonal, plus random off-diagonal drops in training.

    ``batch_shape`` draws an independent random mask per leading index.
    """
    if n < 1:
        raise DimensionError("mask size must be >= 1")
    keep = np.ones(tuple(batch_shape) + (n, n), dtype=bool)
    if training and dropout_rate > 0.0:
        keep &= rng.random(keep.shape) >= dropout_rate
    if self_mask:
        idx = np.arange(n)
        keep[..., idx, idx] = False
    elif training and dropout_rate > 0.0:
        # random dropping applies to off-diagonal entries only
        idx = np.arange(n)
        keep[..., idx, idx] = True
    return AttentionMask(keep)


def build_neighbor_mask(grid_h: int, grid_w: int, radius: int) -> AttentionMask:
    """Mask every key within Chebyshev distance ``radius`` of the query."""
    rows, cols = np.divmod(np.arange(grid_h * grid_w), grid_w)
    dist = np.maximum(np.abs(rows[:, None] - rows[None, :]),
                      np.abs(cols[:, None] - cols[None, :]))
    keep = dist > radius
    full = np.flatnonzero(~keep.any(axis=1))
    if full.size:
        r, c = divmod(int(full[0]), grid_w)
        raise ContractError(
            f"radius {radius} on a {grid_h}x{grid_w} grid masks every key of token ({r},{c})")
    return AttentionMask(keep)


def attention_forward(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig, training: bool,
                      rng: Optional[np.random.Generator] = None,
                      grid: Optional[tuple[int, int]] = None, return_map: bool = False):
    """Scaled dot-product attention over ``[B, H, N, d_k]`` inputs.

    Softmax rows are masked after normalization and the survivors
    renormalized. Sigmoid maps are multiplied by the mask as-is and,
    under ``divide_by_n``, divided by the sequence length.
    """
    if not (q.shape == k.shape and q.shape[:-1] == v.shape[:-1]) or q.ndim != 4:
        raise DimensionError(f"attention shapes inconsistent: q{q.shape} k{k.shape} v{v.shape}")
    b, h, n, dk = q.shape
    if cfg.self_mask and n < 2:
        raise ContractError("self-masking needs at least two tokens")
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / math.sqrt(dk))

    keep = None
    if cfg.self_mask or (training and cfg.attn_dropout_rate > 0.0):
        keep = build_gsm_mask(n, cfg.self_mask, cfg.attn_dropout_rate, training, rng,
                              batch_shape=(b, h)).keep
    if cfg.neighbor_mask_radius is not None:
        if grid is None or grid[0] * grid[1] != n:
            raise DimensionError(f"neighbor mask needs a grid with {n} tokens, got {grid}")
        nm = build_neighbor_mask(grid[0], grid[1], cfg.neighbor_mask_radius).keep
        keep = nm if keep is None else keep & nm

    if cfg.variant == SOFTMAX:
        attn = ad.softmax_lastaxis(scores)
        if keep is not None:
            keep_f = keep.astype(np.float64)
            if not keep.any(axis=-1).all():
                raise ContractError("a fully masked attention row cannot be renormalized")
            masked = attn * keep_f
            attn = masked / ad.sum(masked, axis=-1, keepdims=True)
    else:
        attn = ad.sigmoid(scores)
        if keep is not None:
            attn = attn * keep.astype(np.float64)
        if cfg.output_scale_mode == SCALE_DIVIDE_BY_N:
            attn = attn * (1.0 / n)
    out = ad.matmul(attn, v)
    if return_map:
        return out, attn
    return out


def attention_entropy_stats(attn_map) -> dict:
    """Row entropy (nats) and peak mass of a nonnegative attention map.

    Rows are renormalized to sum to one; all-zero rows are skipped and
    counted in ``excluded_rows``.
    """
    m = np.asarray(attn_map.data if isinstance(attn_map, Tensor) else attn_map, dtype=np.float64)
    m = m.reshape(-1, m.shape[-1])
    if (m < 0).any():
        raise ContractError("attention map must be nonnegative")
    totals = m.sum(axis=1)
    live = totals > 0
    p = m[live] / totals[live, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    entropy = -plogp.sum(axis=1)
    return {
        "mean_row_entropy": float(entropy.mean()) if entropy.size else float("nan"),
        "max_row_mass": float(p.max(axis=1).mean()) if entropy.size else float("nan"),
        "excluded_rows": int((~live).sum()),
    }

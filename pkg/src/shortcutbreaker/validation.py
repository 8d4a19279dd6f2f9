"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from sklearn.utils import check_array

from .exceptions import DimensionError


def infer_grid(n_tokens: int) -> tuple[int, int]:
    side = math.isqrt(n_tokens)
    if side * side != n_tokens:
        raise DimensionError(f"{n_tokens} tokens is not a square grid; pass grid=(h, w)")
    return side, side


def check_token_array(X, grid: Optional[tuple] = None) -> tuple[np.ndarray, tuple[int, int]]:
    """Coerce ``X`` to float64 ``[n, L, N, d]`` and resolve the token grid.

    Accepts ``[n, N, d]`` (one encoder layer) or ``[n, L, N, d]``. Rejects
    NaN/inf and empty input.
    """
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False,
                    ensure_all_finite=True)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise DimensionError(f"expected [n, N, d] or [n, L, N, d], got shape {X.shape}")
    n_tokens = X.shape[2]
    if grid is None:
        grid = infer_grid(n_tokens)
    grid = (int(grid[0]), int(grid[1]))
    if grid[0] * grid[1] != n_tokens:
        raise DimensionError(f"grid {grid} does not hold {n_tokens} tokens")
    return X, grid


def check_mask_array(mask, n_samples: int, grid: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n_samples, *grid):
        raise DimensionError(f"mask shape {mask.shape} != {(n_samples, *grid)}")
    return mask

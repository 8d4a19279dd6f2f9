"""scikit-learn style wrapper around the reconstruction detector."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import predict_maps
from .exceptions import DimensionError, ParameterError
from .model import ModelConfig
from .synthetic import TokenBatch
from .training import TrainConfig, train
from .validation import check_token_array


class ShortcutBreaker(OutlierMixin, BaseEstimator):
    """Unsupervised token-feature anomaly detector.

    Fits a bottlenecked transformer decoder to reconstruct normal encoder
    features; anomalies are the tokens it fails to reconstruct.

    Parameters
    ----------
    grid : tuple of int or None
        Token grid ``(h, w)``. ``None`` infers a square grid.
    bottleneck : {"lrnb", "none", "feature_jitter", "dropout_only"}
    attention : {"sigmoid", "softmax"}
    self_mask : bool
        Zero each token's attention to itself.
    contamination : float
        Fraction of training samples flagged by ``predict``; sets ``offset_``.

    Attributes
    ----------
    params_ : dict of Tensor
    model_config_ : ModelConfig
    train_log_ : list of TrainRecord
    offset_ : float
        ``decision_function = score_samples - offset_``.
    grid_ : tuple of int
    n_features_in_ : int
        Feature dimension per token.
    """

    def __init__(self, grid=None, n_heads: int = 4, decoder_depth: int = 4,
                 bottleneck: str = "lrnb", depth_i: int = 2, noise_rate: float = 0.1,
                 attention: str = "sigmoid", self_mask: bool = True,
                 attn_dropout_rate: float = 0.1, batch_size: int = 32, total_steps: int = 5000,
                 lr_start: float = 2e-3, lr_end: float = 2e-4, warmup_steps: int = 100,
                 hard_mining_keep: float = 0.9, weight_decay: float = 1e-4,
                 contamination: float = 0.05, random_state: int = 0):
        self.grid = grid
        self.n_heads = n_heads
        self.decoder_depth = decoder_depth
        self.bottleneck = bottleneck
        self.depth_i = depth_i
        self.noise_rate = noise_rate
        self.attention = attention
        self.self_mask = self_mask
        self.attn_dropout_rate = attn_dropout_rate
        self.batch_size = batch_size
        self.total_steps = total_steps
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.warmup_steps = warmup_steps
        self.hard_mining_keep = hard_mining_keep
        self.weight_decay = weight_decay
        self.contamination = contamination
        self.random_state = random_state

    def _batch(self, X, grid) -> TokenBatch:
        n, n_layers, n_tokens, _ = X.shape
        return TokenBatch([X[:, l] for l in range(n_layers)], grid, np.zeros(n, dtype=np.int32),
                          np.zeros((n, *grid), dtype=bool), np.zeros(n, dtype=np.int8))

    def fit(self, X, y=None):
        """Train on normal samples ``X`` of shape ``[n, N, d]`` or ``[n, L, N, d]``."""
        if not 0.0 <= self.contamination < 0.5:
            raise ParameterError(f"contamination must lie in [0, 0.5), got {self.contamination}")
        X, grid = check_token_array(X, self.grid)
        self.model_config_ = ModelConfig.build(
            d_model=X.shape[-1], n_heads=self.n_heads, decoder_depth=self.decoder_depth,
            bottleneck=self.bottleneck, depth_i=self.depth_i, noise_rate=self.noise_rate,
            variant=self.attention, self_mask=self.self_mask,
            attn_dropout_rate=self.attn_dropout_rate)
        train_cfg = TrainConfig(
            batch_size=self.batch_size, total_steps=self.total_steps, lr_start=self.lr_start,
            lr_end=self.lr_end, warmup_steps=min(self.warmup_steps, self.total_steps),
            hard_mining_keep=self.hard_mining_keep, weight_decay=self.weight_decay,
            log_interval=max(1, min(50, self.total_steps)), seed=self.random_state)
        batch = self._batch(X, grid)
        self.params_, self.train_log_ = train(self.model_config_, batch, train_cfg)
        self.grid_ = grid
        self.n_layers_ = X.shape[1]
        self.n_features_in_ = X.shape[-1]
        scores = self.score_samples(X)
        self.offset_ = float(np.quantile(scores, self.contamination)) if self.contamination else \
            float(scores.min()) - 1e-12
        return self

    def _check(self, X):
        check_is_fitted(self, "params_")
        X, grid = check_token_array(X, self.grid_)
        if X.shape[1] != self.n_layers_ or X.shape[-1] != self.n_features_in_:
            raise DimensionError(f"fitted on [*, {self.n_layers_}, *, {self.n_features_in_}], "
                                 f"got {X.shape}")
        return X, grid

    def transform(self, X) -> np.ndarray:
        """Anomaly maps ``[n, h, w]`` of per-token ``1 - cos`` distances."""
        X, grid = self._check(X)
        return np.stack([r.map for r in predict_maps(self.params_, self.model_config_,
                                                    self._batch(X, grid))])

    def score_samples(self, X) -> np.ndarray:
        """Negated image anomaly score (max over the map); higher is more normal."""
        return -self.transform(X).reshape(len(X), -1).max(axis=1)

    def decision_function(self, X) -> np.ndarray:
        return self.score_samples(X) - self.offset_

    def predict(self, X) -> np.ndarray:
        """``+1`` for inliers, ``-1`` for anomalies."""
        return np.where(self.decision_function(X) < 0, -1, 1)

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.input_tags.three_d_array = True
        return tags

"""Token-axis bottlenecks: the low-rank noisy bottleneck and two baselines.

The low-rank noisy bottleneck (LRNB) halves the token count ``depth_i``
times with pairwise-merging MLP blocks, then doubles it back. Its
flattened Jacobian therefore has rank at most ``N * d / 2**depth_i``,
which rules out an exact identity map on the full input space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ConfigError, DimensionError, ParameterError

NONE = "none"
FEATURE_JITTER = "feature_jitter"
DROPOUT_ONLY = "dropout_only"
LRNB = "lrnb"
BOTTLENECK_KINDS = (NONE, FEATURE_JITTER, DROPOUT_ONLY, LRNB)


@dataclass(frozen=True)
class LrnbConfig:
    d_model: int = 64
    depth_i: int = 2
    noise_rate: float = 0.1
    gaussian_noise: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        problems = []
        if self.depth_i < 1:
            problems.append(f"depth_i must be >= 1, got {self.depth_i}")
        if not 0.0 <= self.noise_rate < 1.0:
            problems.append(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if self.d_model < 1:
            problems.append("d_model must be positive")
        if problems:
            raise ConfigError(problems)

    def latent_tokens(self, n_tokens: int) -> int:
        check_divisible(n_tokens, self.depth_i)
        return n_tokens >> self.depth_i


@dataclass(frozen=True)
class BottleneckVariant:
    kind: str = LRNB
    jitter_scale: float = 2.0

    def __post_init__(self):
        if self.kind not in BOTTLENECK_KINDS:
            raise ConfigError(f"bottleneck kind must be one of {BOTTLENECK_KINDS}, got {self.kind!r}")
        if self.jitter_scale < 0:
            raise ConfigError("jitter_scale must be >= 0")


def check_divisible(n_tokens: int, depth_i: int) -> None:
    if n_tokens % (1 << depth_i):
        raise DimensionError(
            f"token count {n_tokens} is not divisible by 2**depth_i = {1 << depth_i}")


def fuse_multiscale(features: Sequence[Tensor], eps: float = 1e-6) -> Tensor:
    """Average of per-layer layer-normalized features."""
    if not features:
        raise DimensionError("fuse_multiscale needs at least one layer")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise DimensionError(f"encoder layer shapes differ: {shape} vs {f.shape}")
    normed = [ad.layer_norm(f, eps=eps) for f in features]
    if len(normed) == 1:
        return normed[0]
    total = normed[0]
    for t in normed[1:]:
        total = total + t
    return total * (1.0 / len(normed))


def down_block(x: Tensor, params: Mapping[str, Tensor], eps: float = 1e-6) -> Tensor:
    """Merge token pairs ``(2t, 2t+1)``: ``[B, N, d] -> [B, N/2, d]``."""
    b, n, d = x.shape
    if n % 2:
        raise DimensionError(f"down_block needs an even token count, got {n}")
    pairs = ad.reshape(x, (b, n // 2, 2 * d))
    h = ad.layer_norm(pairs, params["ln_g"], params["ln_b"], eps)
    return ad.gelu(ad.matmul(h, params["w"]) + params["b"])


def up_block(x: Tensor, params: Mapping[str, Tensor], eps: float = 1e-6) -> Tensor:
    """Split every token into two: ``[B, M, d] -> [B, 2M, d]``."""
    b, m, d = x.shape
    h = ad.layer_norm(x, params["ln_g"], params["ln_b"], eps)
    h = ad.gelu(ad.matmul(h, params["w"]) + params["b"])
    return ad.reshape(h, (b, 2 * m, d))


def init_block_params(d: int, kind: str, rng: np.random.Generator,
                      std: float = 0.02) -> dict[str, Tensor]:
    from .model import trunc_normal

    d_in, d_out = (2 * d, d) if kind == "down" else (d, 2 * d)
    return {
        "ln_g": Tensor(np.ones(d_in), requires_grad=True),
        "ln_b": Tensor(np.zeros(d_in), requires_grad=True),
        "w": Tensor(trunc_normal(rng, (d_in, d_out), std), requires_grad=True),
        "b": Tensor(np.zeros(d_out), requires_grad=True),
    }


def init_lrnb_params(cfg: LrnbConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Flat parameter dict ``down{j}.{name}`` / ``up{j}.{name}``."""
    params = {}
    for j in range(cfg.depth_i):
        for name, t in init_block_params(cfg.d_model, "down", rng).items():
            params[f"down{j}.{name}"] = t
    for j in range(cfg.depth_i):
        for name, t in init_block_params(cfg.d_model, "up", rng).items():
            params[f"up{j}.{name}"] = t
    return params


def _block(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def inject_noise(x: Tensor, noise_rate: float, gaussian: bool, training: bool,
                 rng: Optional[np.random.Generator]) -> Tensor:
    """Dropout, then additive Gaussian noise scaled by per-feature batch std."""
    if not training or noise_rate == 0.0:
        return x
    x = ad.dropout(x, noise_rate, training, rng)
    if gaussian:
        lead = tuple(range(x.ndim - 1))
        std = x.data.std(axis=lead)
        noise = rng.standard_normal(x.shape) * (noise_rate * std)
        x = x + noise
    return x


def lrnb_forward(x: Tensor, params: Mapping[str, Tensor], cfg: LrnbConfig, training: bool,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """Noise (training only), ``depth_i`` down blocks, then ``depth_i`` up blocks."""
    check_divisible(x.shape[1], cfg.depth_i)
    h = inject_noise(x, cfg.noise_rate, cfg.gaussian_noise, training, rng)
    for j in range(cfg.depth_i):
        h = down_block(h, _block(params, f"down{j}."), cfg.ln_eps)
    for j in range(cfg.depth_i):
        h = up_block(h, _block(params, f"up{j}."), cfg.ln_eps)
    return h


def feature_jitter(x: Tensor, scale: float, training: bool,
                   rng: Optional[np.random.Generator] = None) -> Tensor:
    """Additive Gaussian noise with per-token std ``scale * ||token|| / d``."""
    if scale < 0:
        raise ParameterError(f"jitter scale must be >= 0, got {scale}")
    if not training or scale == 0.0:
        return x
    d = x.shape[-1]
    norms = np.linalg.norm(x.data, axis=-1, keepdims=True)
    return x + rng.standard_normal(x.shape) * (scale * norms / d)

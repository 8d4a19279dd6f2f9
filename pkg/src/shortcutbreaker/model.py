"""Fuse -> bottleneck -> transformer decoder reconstruction model."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Optional

import numpy as np

from . import autodiff as ad
from .attention import AttentionConfig, attention_forward
from .autodiff import Tensor
from .bottleneck import (DROPOUT_ONLY, FEATURE_JITTER, LRNB, NONE, BottleneckVariant, LrnbConfig,
                         check_divisible, feature_jitter, fuse_multiscale, init_lrnb_params,
                         lrnb_forward)
from .container import read_container, write_container
from .exceptions import ConfigError, DimensionError
from .rng import make_rng

CONFIG_VERSION = 1
CHECKPOINT_MAGIC = b"SBM1"


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    decoder_depth: int = 4
    mlp_ratio: int = 4
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    bottleneck: BottleneckVariant = field(default_factory=BottleneckVariant)
    lrnb: LrnbConfig = field(default_factory=LrnbConfig)
    target_layers: Optional[tuple] = None
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.target_layers is not None:
            object.__setattr__(self, "target_layers", tuple(int(i) for i in self.target_layers))
        problems = []
        if self.decoder_depth < 1:
            problems.append(f"decoder_depth: must be >= 1, got {self.decoder_depth}")
        if self.mlp_ratio < 1:
            problems.append("mlp_ratio: must be >= 1")
        if self.attention.d_model != self.d_model or self.attention.n_heads != self.n_heads:
            problems.append("attention: d_model/n_heads disagree with the model")
        if self.lrnb.d_model != self.d_model:
            problems.append("lrnb: d_model disagrees with the model")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target_layers"] = list(self.target_layers) if self.target_layers is not None else None
        d["version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"version: expected {CONFIG_VERSION}, got {version}")
        problems = _unknown_keys(cls, data, "")
        sub = {}
        for key, sub_cls in (("attention", AttentionConfig), ("bottleneck", BottleneckVariant),
                             ("lrnb", LrnbConfig)):
            if key in data:
                problems += _unknown_keys(sub_cls, data[key], key + ".")
        if problems:
            raise ConfigError(problems)
        d_model = data.get("d_model", 64)
        n_heads = data.get("n_heads", 4)
        att = dict(data.pop("attention", {}) or {})
        att.setdefault("d_model", d_model)
        att.setdefault("n_heads", n_heads)
        lr = dict(data.pop("lrnb", {}) or {})
        lr.setdefault("d_model", d_model)
        sub["attention"] = AttentionConfig(**att)
        sub["bottleneck"] = BottleneckVariant(**(data.pop("bottleneck", {}) or {}))
        sub["lrnb"] = LrnbConfig(**lr)
        return cls(**data, **sub)

    @classmethod
    def build(cls, d_model: int = 64, n_heads: int = 4, decoder_depth: int = 4,
              bottleneck: str = LRNB, depth_i: int = 2, noise_rate: float = 0.1,
              variant: str = "sigmoid", self_mask: bool = True, attn_dropout_rate: float = 0.1,
              neighbor_mask_radius: Optional[int] = None, **kwargs) -> "ModelConfig":
        """Flat-argument constructor used by the CLI, probes and estimator."""
        att_kw = {k: kwargs.pop(k) for k in ("output_scale_mode",) if k in kwargs}
        jitter = {k: kwargs.pop(k) for k in ("jitter_scale",) if k in kwargs}
        gauss = {k: kwargs.pop(k) for k in ("gaussian_noise",) if k in kwargs}
        return cls(
            d_model=d_model, n_heads=n_heads, decoder_depth=decoder_depth,
            attention=AttentionConfig(d_model, n_heads, variant, self_mask, attn_dropout_rate,
                                      neighbor_mask_radius, **att_kw),
            bottleneck=BottleneckVariant(bottleneck, **jitter),
            lrnb=LrnbConfig(d_model, depth_i, noise_rate, **gauss),
            **kwargs,
        )


def _unknown_keys(cls, data, prefix) -> list[str]:
    if not isinstance(data, Mapping):
        return [f"{prefix.rstrip('.')}: expected an object"]
    known = {f.name for f in fields(cls)}
    return [f"{prefix}{k}: unknown field" for k in sorted(set(data) - known)]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 3.0) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def sinusoidal_2d(grid: tuple[int, int], d: int) -> np.ndarray:
    """Fixed 2D sine/cosine position table ``[h*w, d]`` (half rows, half cols)."""
    h, w = grid
    half = d // 2
    quarter = half // 2
    freqs = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))

    def axis_table(n):
        pos = np.arange(n)[:, None] * freqs[None, :]
        return np.concatenate([np.sin(pos), np.cos(pos)], axis=1)

    rows = axis_table(h)
    cols = axis_table(w)
    table = np.zeros((h, w, d))
    table[:, :, :2 * quarter] = rows[:, None, :]
    table[:, :, half:half + 2 * quarter] = cols[None, :, :]
    return table.reshape(h * w, d)


def parameter_init(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Truncated-normal(0.02) projections, zero biases, unit layer-norm gains."""
    d, hid = cfg.d_model, cfg.d_model * cfg.mlp_ratio
    params: dict[str, Tensor] = {}
    rng = make_rng(seed, "init", "decoder")

    def weight(shape):
        return Tensor(trunc_normal(rng, shape), requires_grad=True)

    def const(value, n):
        return Tensor(np.full(n, value), requires_grad=True)

    for layer in range(cfg.decoder_depth):
        p = f"decoder.{layer}."
        params[p + "ln1_g"] = const(1.0, d)
        params[p + "ln1_b"] = const(0.0, d)
        for name in ("q", "k", "v", "o"):
            params[p + "w" + name] = weight((d, d))
            params[p + "b" + name] = const(0.0, d)
        params[p + "ln2_g"] = const(1.0, d)
        params[p + "ln2_b"] = const(0.0, d)
        params[p + "w1"] = weight((d, hid))
        params[p + "b1"] = const(0.0, hid)
        params[p + "w2"] = weight((hid, d))
        params[p + "b2"] = const(0.0, d)
    if cfg.bottleneck.kind == LRNB:
        for name, t in init_lrnb_params(cfg.lrnb, make_rng(seed, "init", "lrnb")).items():
            params["lrnb." + name] = t
    return params


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def decoder_layer(h: Tensor, p: Mapping[str, Tensor], cfg: ModelConfig, pos: np.ndarray,
                  grid, training: bool, rng, return_map: bool = False):
    """Pre-norm block; positions are added to the query/key inputs only."""
    b, n, d = h.shape
    heads, dk = cfg.n_heads, d // cfg.n_heads
    x = ad.layer_norm(h, p["ln1_g"], p["ln1_b"], cfg.ln_eps)
    qk_in = x + pos

    def split(t):
        return ad.transpose(ad.reshape(t, (b, n, heads, dk)), (0, 2, 1, 3))

    q = split(ad.matmul(qk_in, p["wq"]) + p["bq"])
    k = split(ad.matmul(qk_in, p["wk"]) + p["bk"])
    v = split(ad.matmul(x, p["wv"]) + p["bv"])
    res = attention_forward(q, k, v, cfg.attention, training, rng, grid=grid, return_map=return_map)
    att, amap = res if return_map else (res, None)
    merged = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, n, d))
    h = h + (ad.matmul(merged, p["wo"]) + p["bo"])
    x = ad.layer_norm(h, p["ln2_g"], p["ln2_b"], cfg.ln_eps)
    x = ad.gelu(ad.matmul(x, p["w1"]) + p["b1"])
    h = h + (ad.matmul(x, p["w2"]) + p["b2"])
    return (h, amap) if return_map else h


def fused_target(layers, cfg: ModelConfig) -> Tensor:
    """Frozen reconstruction target: no gradient ever flows into it."""
    idx = cfg.target_layers if cfg.target_layers is not None else range(len(layers))
    try:
        chosen = [Tensor(layers[i]) for i in idx]
    except IndexError as exc:
        raise DimensionError(f"target_layers {cfg.target_layers} out of range for "
                             f"{len(layers)} encoder layers") from exc
    return fuse_multiscale(chosen, cfg.ln_eps).detach()


def apply_bottleneck(x: Tensor, params, cfg: ModelConfig, training: bool, rng) -> Tensor:
    kind = cfg.bottleneck.kind
    if kind == NONE:
        return x
    if kind == FEATURE_JITTER:
        return feature_jitter(x, cfg.bottleneck.jitter_scale, training, rng)
    if kind == DROPOUT_ONLY:
        return ad.dropout(x, cfg.lrnb.noise_rate, training, rng)
    return lrnb_forward(x, _sub(params, "lrnb."), cfg.lrnb, training, rng)


def model_forward(params: Mapping[str, Tensor], layers, grid, cfg: ModelConfig, training: bool,
                  rng: Optional[np.random.Generator] = None, return_maps: bool = False) -> dict:
    """Reconstruct the fused encoder features of one batch.

    ``layers`` is a sequence of ``[B, N, d]`` arrays. Returns a dict with
    ``reconstructed`` and ``target`` tensors (and ``attention_maps`` when
    requested).
    """
    h_, w_ = grid
    n = layers[0].shape[1]
    if h_ * w_ != n:
        raise DimensionError(f"grid {grid} does not hold {n} tokens")
    if layers[0].shape[-1] != cfg.d_model:
        raise DimensionError(f"feature dim {layers[0].shape[-1]} != d_model {cfg.d_model}")
    if cfg.bottleneck.kind == LRNB:
        check_divisible(n, cfg.lrnb.depth_i)
    target = fused_target(layers, cfg)
    h = apply_bottleneck(target, params, cfg, training, rng)
    pos = sinusoidal_2d(grid, cfg.d_model)
    maps = []
    for layer in range(cfg.decoder_depth):
        p = _sub(params, f"decoder.{layer}.")
        if return_maps:
            h, amap = decoder_layer(h, p, cfg, pos, grid, training, rng, return_map=True)
            maps.append(amap.data)
        else:
            h = decoder_layer(h, p, cfg, pos, grid, training, rng)
    out = {"reconstructed": h, "target": target}
    if return_maps:
        out["attention_maps"] = maps
    return out


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, params: Mapping[str, Tensor], cfg: ModelConfig, extra: Optional[dict] = None) -> None:
    index, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = {"kind": "checkpoint", "model_config": cfg.to_dict(), "params": index,
              "extra": extra or {}}
    write_container(path, CHECKPOINT_MAGIC, header, b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    header, payload = read_container(path, CHECKPOINT_MAGIC)
    cfg = ModelConfig.from_dict(header["model_config"])
    params = {}
    for entry in header["params"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    expected = set(parameter_init(cfg, 0))
    if set(params) != expected:
        raise ConfigError("checkpoint parameters do not match its model config")
    return params, cfg, header.get("extra", {})

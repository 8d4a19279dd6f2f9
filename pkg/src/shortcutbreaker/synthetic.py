"""Synthetic multi-class "encoder feature" datasets with token-level masks.

Each class is a low-rank manifold around an anchor vector: a token at
grid position ``p`` is ``anchor + basis @ z(p) + noise`` where ``z`` is a
spatially smoothed Gaussian field. Encoder layers are emulated by fixed
affine maps of these base tokens. Anomalies are injected in rectangles:

* ``patch_swap``: tokens replaced by a normal sample of another class,
* ``off_manifold``: a vector orthogonal to the class basis is added,
* ``amplitude``: the deviation from the class anchor is scaled by 2.5.

Token values are rounded to float32 at generation time so the on-disk
float32 payload round-trips bitwise.
"""

from __future__ import annotations

import functools
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .container import read_container, write_container
from .exceptions import ConfigError, ContractError, DimensionError, TruncatedError
from .rng import make_rng

PATCH_SWAP = "patch_swap"
OFF_MANIFOLD = "off_manifold"
AMPLITUDE = "amplitude"
ANOMALY_KINDS = (PATCH_SWAP, OFF_MANIFOLD, AMPLITUDE)
KIND_CODES = {None: 0, PATCH_SWAP: 1, OFF_MANIFOLD: 2, AMPLITUDE: 3}
CODE_KINDS = {v: k for k, v in KIND_CODES.items()}

AMPLITUDE_FACTOR = 2.5
OFF_MANIFOLD_SIGMAS = 3.0
DATASET_MAGIC = b"SBK1"


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 8
    grid: tuple = (8, 8)
    d_model: int = 64
    manifold_rank: int = 6
    smoothness: float = 1.5
    normal_noise_std: float = 1.0
    field_scale: float = 1.0
    anomaly_kinds: tuple = ANOMALY_KINDS
    anomaly_area_frac: tuple = (0.05, 0.2)
    n_encoder_layers: int = 2
    n_train_per_class: int = 32
    n_test_normal_per_class: int = 16
    n_test_anomalous_per_class: int = 16
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "anomaly_kinds", tuple(self.anomaly_kinds))
        object.__setattr__(self, "anomaly_area_frac", tuple(float(a) for a in self.anomaly_area_frac))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        if self.n_classes < 1:
            out.append("n_classes: must be >= 1")
        if len(self.grid) != 2 or min(self.grid) < 1:
            out.append(f"grid: must be two positive ints, got {self.grid}")
        if self.d_model < 2:
            out.append("d_model: must be >= 2")
        if not 0 <= self.manifold_rank < self.d_model:
            out.append(f"manifold_rank: must lie in [0, d_model), got {self.manifold_rank}")
        if self.smoothness < 0:
            out.append("smoothness: must be >= 0")
        if self.normal_noise_std < 0:
            out.append("normal_noise_std: must be >= 0")
        unknown = [k for k in self.anomaly_kinds if k not in ANOMALY_KINDS]
        if unknown or not self.anomaly_kinds:
            out.append(f"anomaly_kinds: must be a nonempty subset of {ANOMALY_KINDS}")
        lo, hi = (self.anomaly_area_frac + (None, None))[:2]
        if len(self.anomaly_area_frac) != 2 or not (0 < lo <= hi <= 0.5):
            out.append(f"anomaly_area_frac: need 0 < min <= max <= 0.5, got {self.anomaly_area_frac}")
        if self.n_encoder_layers < 1:
            out.append("n_encoder_layers: must be >= 1")
        for name in ("n_train_per_class", "n_test_normal_per_class", "n_test_anomalous_per_class"):
            if getattr(self, name) < 0:
                out.append(f"{name}: must be >= 0")
        return out

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["anomaly_kinds"] = list(self.anomaly_kinds)
        d["anomaly_area_frac"] = list(self.anomaly_area_frac)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known - {"version"})
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        kwargs = {k: v for k, v in data.items() if k in known}
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class TokenBatch:
    """Samples sharing one grid: ``layers[l]`` is ``[B, h*w, d]``."""

    layers: list
    grid: tuple
    class_ids: np.ndarray
    anomaly_mask: np.ndarray
    kinds: np.ndarray = field(default=None)

    def __post_init__(self):
        self.layers = [np.asarray(l, dtype=np.float64) for l in self.layers]
        self.grid = tuple(int(g) for g in self.grid)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)
        self.anomaly_mask = np.asarray(self.anomaly_mask, dtype=bool)
        b = len(self.class_ids)
        if self.kinds is None:
            self.kinds = np.zeros(b, dtype=np.int8)
        self.kinds = np.asarray(self.kinds, dtype=np.int8)
        h, w = self.grid
        for l in self.layers:
            if l.ndim != 3 or l.shape[:2] != (b, h * w):
                raise DimensionError(f"layer shape {l.shape} inconsistent with {b} samples on {self.grid}")
        if self.anomaly_mask.shape != (b, h, w):
            raise DimensionError(f"mask shape {self.anomaly_mask.shape} != {(b, h, w)}")

    def __len__(self):
        return len(self.class_ids)

    @property
    def image_label(self) -> np.ndarray:
        return self.anomaly_mask.reshape(len(self), -1).any(axis=1)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def d_model(self) -> int:
        return self.layers[0].shape[-1]

    def stacked(self) -> np.ndarray:
        """``[B, n_layers, N, d]`` view used by the estimator API."""
        return np.stack(self.layers, axis=1)

    def subset(self, index) -> "TokenBatch":
        index = np.asarray(index)
        return TokenBatch([l[index] for l in self.layers], self.grid, self.class_ids[index],
                          self.anomaly_mask[index], self.kinds[index])

    @staticmethod
    def concatenate(batches: Sequence["TokenBatch"]) -> "TokenBatch":
        if not batches:
            raise ContractError("cannot concatenate zero batches")
        grid = batches[0].grid
        if any(b.grid != grid or b.n_layers != batches[0].n_layers for b in batches):
            raise DimensionError("batches disagree on grid or layer count")
        return TokenBatch(
            [np.concatenate([b.layers[i] for b in batches]) for i in range(batches[0].n_layers)],
            grid,
            np.concatenate([b.class_ids for b in batches]),
            np.concatenate([b.anomaly_mask for b in batches]),
            np.concatenate([b.kinds for b in batches]),
        )


@dataclass(frozen=True)
class _ClassParams:
    anchors: np.ndarray        # [C, d]
    bases: np.ndarray          # [C, d, r], orthonormal columns
    layer_maps: np.ndarray     # [L, d, d]
    layer_bias: np.ndarray     # [L, d]


@functools.lru_cache(maxsize=32)
def _class_params(spec: SyntheticSpec) -> _ClassParams:
    d, r, c = spec.d_model, spec.manifold_rank, spec.n_classes
    anchors = np.empty((c, d))
    bases = np.empty((c, d, r))
    for k in range(c):
        rng = make_rng(spec.seed, "class", k)
        anchors[k] = rng.standard_normal(d)
        if r:
            q, _ = np.linalg.qr(rng.standard_normal((d, r)))
            bases[k] = q
    maps = np.empty((spec.n_encoder_layers, d, d))
    bias = np.empty((spec.n_encoder_layers, d))
    for l in range(spec.n_encoder_layers):
        rng = make_rng(spec.seed, "layer", l)
        maps[l] = np.eye(d) + 0.3 * rng.standard_normal((d, d)) / np.sqrt(d)
        bias[l] = 0.3 * rng.standard_normal(d)
    return _ClassParams(anchors, bases, maps, bias)


def _smooth_field(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    h, w = spec.grid
    r = spec.manifold_rank
    white = rng.standard_normal((h, w, r))
    if spec.smoothness <= 0 or r == 0:
        return white * spec.field_scale
    field_ = gaussian_filter(white, sigma=(spec.smoothness, spec.smoothness, 0), mode="wrap")
    # rescale to unit marginal variance using the kernel's energy
    impulse = np.zeros((h, w, 1))
    impulse[0, 0, 0] = 1.0
    kernel = gaussian_filter(impulse, sigma=(spec.smoothness, spec.smoothness, 0), mode="wrap")
    return field_ * (spec.field_scale / np.sqrt((kernel ** 2).sum()))


def _base_tokens(spec: SyntheticSpec, class_id: int, rng: np.random.Generator) -> np.ndarray:
    params = _class_params(spec)
    n, d = spec.n_tokens, spec.d_model
    tokens = np.broadcast_to(params.anchors[class_id], (n, d)).copy()
    if spec.manifold_rank:
        z = _smooth_field(rng, spec).reshape(n, spec.manifold_rank)
        tokens += z @ params.bases[class_id].T
    if spec.normal_noise_std:
        tokens += spec.normal_noise_std * rng.standard_normal((n, d))
    return tokens


def _to_layers(spec: SyntheticSpec, base: np.ndarray) -> list[np.ndarray]:
    params = _class_params(spec)
    return [(base @ params.layer_maps[l] + params.layer_bias[l]).astype(np.float32).astype(np.float64)
            for l in range(spec.n_encoder_layers)]


def generate_normal(spec: SyntheticSpec, class_id: int, count: int,
                    stream: str = "train", start_index: int = 0) -> TokenBatch:
    """Draw ``count`` normal samples of one class.

    Sample ``i`` uses the stream ``(spec.seed, stream, class_id, start_index + i)``,
    so generating samples one at a time or in bulk gives identical bits.
    """
    if not 0 <= class_id < spec.n_classes:
        raise ContractError(f"class_id {class_id} out of range for {spec.n_classes} classes")
    n, d = spec.n_tokens, spec.d_model
    layers = [np.empty((count, n, d)) for _ in range(spec.n_encoder_layers)]
    for i in range(count):
        rng = make_rng(spec.seed, stream, class_id, start_index + i)
        for l, t in enumerate(_to_layers(spec, _base_tokens(spec, class_id, rng))):
            layers[l][i] = t
    h, w = spec.grid
    return TokenBatch(layers, spec.grid, np.full(count, class_id),
                      np.zeros((count, h, w), dtype=bool))


def rectangle_shape(area_frac: float, grid: tuple, rng: Optional[np.random.Generator] = None,
                    max_aspect: float = 3.0) -> tuple[int, int]:
    """Rectangle whose area is closest to ``area_frac * h * w``.

    Candidates with aspect ratio above ``max_aspect`` are discarded; ties
    are broken at random when ``rng`` is given, else by the squarest shape.
    """
    h, w = grid
    target = area_frac * h * w
    cands = [(a, b) for a in range(1, h + 1) for b in range(1, w + 1)
             if max(a, b) / min(a, b) <= max_aspect]
    best = min(abs(a * b - target) for a, b in cands)
    cands = [c for c in cands if abs(c[0] * c[1] - target) == best]
    if rng is None:
        return min(cands, key=lambda c: (abs(c[0] - c[1]), c))
    return cands[int(rng.integers(len(cands)))]


def _orthogonal_direction(basis: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    d = basis.shape[0]
    v = rng.standard_normal(d)
    if basis.shape[1]:
        v -= basis @ (basis.T @ v)
        v -= basis @ (basis.T @ v)
    return v / np.linalg.norm(v)


def off_manifold_vector(spec: SyntheticSpec, class_id: int, rng: np.random.Generator) -> np.ndarray:
    """Base-space vector orthogonal to the class basis, norm 3x the field std."""
    basis = _class_params(spec).bases[class_id]
    return _orthogonal_direction(basis, rng) * (OFF_MANIFOLD_SIGMAS * spec.field_scale)


def inject_anomaly(batch: TokenBatch, spec: SyntheticSpec, rng: np.random.Generator,
                   kinds: Optional[Sequence[str]] = None) -> TokenBatch:
    """Return a copy of an all-normal batch with one anomalous rectangle per sample."""
    if batch.anomaly_mask.any():
        raise ContractError("inject_anomaly expects an all-normal batch")
    if batch.grid != spec.grid or batch.n_layers != spec.n_encoder_layers:
        raise DimensionError("batch does not match the synthetic spec")
    params = _class_params(spec)
    h, w = spec.grid
    layers = [l.copy() for l in batch.layers]
    mask = np.zeros_like(batch.anomaly_mask)
    codes = np.zeros(len(batch), dtype=np.int8)
    allowed = tuple(kinds) if kinds is not None else spec.anomaly_kinds
    for i in range(len(batch)):
        kind = allowed[int(rng.integers(len(allowed)))]
        cls = int(batch.class_ids[i])
        lo, hi = spec.anomaly_area_frac
        rh, rw = rectangle_shape(rng.uniform(lo, hi), spec.grid, rng)
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        region = np.zeros((h, w), dtype=bool)
        region[r0:r0 + rh, c0:c0 + rw] = True
        idx = np.flatnonzero(region.reshape(-1))
        if kind == PATCH_SWAP:
            if spec.n_classes < 2:
                raise ContractError("patch_swap needs a donor class (n_classes >= 2)")
            donor = int(rng.integers(spec.n_classes - 1))
            donor += donor >= cls
            donor_layers = _to_layers(spec, _base_tokens(spec, donor, rng))
            for l in range(len(layers)):
                layers[l][i, idx] = donor_layers[l][idx]
        elif kind == OFF_MANIFOLD:
            v = off_manifold_vector(spec, cls, rng)
            for l in range(len(layers)):
                shifted = layers[l][i, idx] + v @ params.layer_maps[l]
                layers[l][i, idx] = shifted.astype(np.float32)
        else:
            for l in range(len(layers)):
                a = params.anchors[cls] @ params.layer_maps[l] + params.layer_bias[l]
                scaled = a + AMPLITUDE_FACTOR * (layers[l][i, idx] - a)
                layers[l][i, idx] = scaled.astype(np.float32)
        mask[i] = region
        codes[i] = KIND_CODES[kind]
    return TokenBatch(layers, batch.grid, batch.class_ids.copy(), mask, codes)


def make_splits(spec: SyntheticSpec) -> tuple[TokenBatch, TokenBatch]:
    """Train (all normal) and test (normal + anomalous, per class) batches."""
    train, test = [], []
    for c in range(spec.n_classes):
        if spec.n_train_per_class:
            train.append(generate_normal(spec, c, spec.n_train_per_class, "train"))
        if spec.n_test_normal_per_class:
            test.append(generate_normal(spec, c, spec.n_test_normal_per_class, "test_normal"))
        if spec.n_test_anomalous_per_class:
            clean = generate_normal(spec, c, spec.n_test_anomalous_per_class, "test_anomalous")
            test.append(inject_anomaly(clean, spec, make_rng(spec.seed, "inject", c)))
    return TokenBatch.concatenate(train), TokenBatch.concatenate(test)


# ---------------------------------------------------------------- container I/O

def _encode_record(batch: TokenBatch) -> bytes:
    parts = [np.ascontiguousarray(l, dtype="<f4").tobytes() for l in batch.layers]
    parts.append(np.ascontiguousarray(batch.class_ids, dtype="<i4").tobytes())
    parts.append(np.ascontiguousarray(batch.kinds, dtype="i1").tobytes())
    parts.append(np.packbits(batch.anomaly_mask.reshape(-1)).tobytes())
    return b"".join(parts)


def _decode_record(buf: bytes, count: int, n_layers: int, grid, d: int) -> TokenBatch:
    h, w = grid
    n = h * w
    off = 0

    def take(nbytes):
        nonlocal off
        if off + nbytes > len(buf):
            raise TruncatedError("record shorter than its declared shape")
        chunk = buf[off:off + nbytes]
        off += nbytes
        return chunk

    layers = [np.frombuffer(take(4 * count * n * d), dtype="<f4").reshape(count, n, d).astype(np.float64)
              for _ in range(n_layers)]
    class_ids = np.frombuffer(take(4 * count), dtype="<i4").astype(np.int64)
    kinds = np.frombuffer(take(count), dtype="i1").copy()
    nbits = count * n
    bits = np.unpackbits(np.frombuffer(take((nbits + 7) // 8), dtype=np.uint8))[:nbits]
    return TokenBatch(layers, grid, class_ids, bits.astype(bool).reshape(count, h, w), kinds)


def write_dataset(batches: Sequence[TokenBatch], path, spec: Optional[SyntheticSpec] = None) -> None:
    records, chunks, offset = [], [], 0
    for b in batches:
        blob = _encode_record(b)
        records.append({"offset": offset, "nbytes": len(blob), "count": len(b),
                        "grid": list(b.grid), "n_layers": b.n_layers, "d_model": b.d_model})
        chunks.append(blob)
        offset += len(blob)
    header = {
        "kind": "dataset",
        "spec": spec.to_dict() if spec is not None else None,
        "record_count": len(records),
        "records": records,
    }
    write_container(path, DATASET_MAGIC, header, b"".join(chunks))


def read_dataset(path) -> tuple[list[TokenBatch], Optional[SyntheticSpec]]:
    header, payload = read_container(path, DATASET_MAGIC)
    batches = []
    for rec in header["records"]:
        buf = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if len(buf) != rec["nbytes"]:
            raise TruncatedError(f"{path}: record extends past payload")
        batches.append(_decode_record(buf, rec["count"], rec["n_layers"], rec["grid"], rec["d_model"]))
    spec = SyntheticSpec.from_dict(header["spec"]) if header.get("spec") else None
    return batches, spec

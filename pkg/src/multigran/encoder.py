"""Frozen ViT-style image encoder and the query-vs-key explainability map.

The encoder is randomly initialised from ``EncoderConfig.seed`` and never
updated afterwards. It emits a CLS vector, a P x P grid of patch vectors
(residual stream after the last block) and the last block's per-patch key
projections, which define the relevance map used for mask inversion.
"""

from __future__ import annotations

import functools
import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers
from . import container
from .errors import ConfigError, FormatError, ShapeError
from .numerics import make_rng, sinusoid_table


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 48
    patch_size: int = 4
    embed_dim: int = 64
    layers: int = 2
    heads: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.image_side % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must divide image_side {self.image_side}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 4:
            raise ConfigError("embed_dim must be a multiple of 4 for the 2-D position table")
        if self.layers < 1:
            raise ConfigError("encoder needs at least one block")

    @property
    def grid_side(self) -> int:
        return self.image_side // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_side**2


@dataclass(frozen=True, eq=False)
class ImageFeatureSet:
    cls: np.ndarray  # (D,)
    patches: np.ndarray  # (P, P, D)
    keys: np.ndarray  # (P, P, D)
    config: EncoderConfig

    @property
    def keys_flat(self) -> np.ndarray:
        return self.keys.reshape(-1, self.keys.shape[-1])

    def equals(self, other: "ImageFeatureSet") -> bool:
        return (
            self.config == other.config
            and np.array_equal(self.cls, other.cls)
            and np.array_equal(self.patches, other.patches)
            and np.array_equal(self.keys, other.keys)
        )


@dataclass(frozen=True, eq=False)
class ExplainabilityMap:
    weights: np.ndarray  # (P, P), nonnegative, sums to 1
    query: np.ndarray


def position_grid(side: int, dim: int) -> np.ndarray:
    """Fixed 2-D sinusoidal table: first half encodes the row, second half the column."""
    half = dim // 2
    rows = sinusoid_table(np.arange(side), half)
    cols = sinusoid_table(np.arange(side), half)
    grid = np.empty((side, side, dim))
    grid[:, :, :half] = rows[:, None, :]
    grid[:, :, half:] = cols[None, :, :]
    return grid


class VisionEncoder:
    """Seeded, frozen pre-norm transformer over image patches."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        rng = make_rng(config.seed)
        D = config.embed_dim
        fan_in = config.patch_size**2 * 3
        w = {
            "patch_w": rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, D)),
            "patch_b": np.zeros(D),
            "cls": rng.normal(0.0, 1.0, D),
            "pos": position_grid(config.grid_side, D).reshape(-1, D),
        }
        for i in range(config.layers):
            w[f"b{i}.ln1_g"] = np.ones(D)
            w[f"b{i}.ln1_b"] = np.zeros(D)
            w[f"b{i}.wqkv"] = rng.normal(0.0, 1.0 / math.sqrt(D), (D, 3 * D))
            w[f"b{i}.bqkv"] = np.zeros(3 * D)
            w[f"b{i}.wo"] = rng.normal(0.0, 0.5 / math.sqrt(D), (D, D))
            w[f"b{i}.bo"] = np.zeros(D)
            w[f"b{i}.ln2_g"] = np.ones(D)
            w[f"b{i}.ln2_b"] = np.zeros(D)
            w[f"b{i}.w1"] = rng.normal(0.0, 1.0 / math.sqrt(D), (D, 4 * D))
            w[f"b{i}.b1"] = np.zeros(4 * D)
            w[f"b{i}.w2"] = rng.normal(0.0, 0.5 / math.sqrt(4 * D), (4 * D, D))
            w[f"b{i}.b2"] = np.zeros(D)
        for arr in w.values():
            arr.setflags(write=False)
        self._w = w

    @property
    def weights(self) -> dict[str, np.ndarray]:
        return dict(self._w)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._w):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self._w[name]).tobytes())
        return h.hexdigest()

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        cfg = self.config
        n = images.shape[0]
        p, g = cfg.patch_size, cfg.grid_side
        x = images.reshape(n, g, p, g, p, 3).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(n, g * g, p * p * 3)

    def encode_batch(self, images: np.ndarray) -> list[ImageFeatureSet]:
        cfg = self.config
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (cfg.image_side, cfg.image_side, 3):
            raise ShapeError(
                f"expected images of shape (n, {cfg.image_side}, {cfg.image_side}, 3), got {images.shape}"
            )
        w = self._w
        n, D, g = images.shape[0], cfg.embed_dim, cfg.grid_side
        tok = self._patchify(images - 0.5) @ w["patch_w"] + w["patch_b"] + w["pos"]
        cls = np.broadcast_to(w["cls"], (n, 1, D))
        x = np.concatenate([cls, tok], axis=1)
        keys = None
        for i in range(cfg.layers):
            p = {k.split(".", 1)[1]: v for k, v in w.items() if k.startswith(f"b{i}.")}
            h, _ = layers.layer_norm_forward(x, p["ln1_g"], p["ln1_b"])
            if i == cfg.layers - 1:
                keys = h[:, 1:] @ p["wqkv"][:, D : 2 * D] + p["bqkv"][D : 2 * D]
            a, _ = layers.attention_forward(h, p, cfg.heads)
            x = x + a
            h, _ = layers.layer_norm_forward(x, p["ln2_g"], p["ln2_b"])
            h, _ = layers.linear_forward(h, p["w1"], p["b1"])
            h, _ = layers.gelu_forward(h)
            h, _ = layers.linear_forward(h, p["w2"], p["b2"])
            x = x + h
        out = []
        for j in range(n):
            out.append(
                ImageFeatureSet(
                    cls=x[j, 0].copy(),
                    patches=x[j, 1:].reshape(g, g, D).copy(),
                    keys=keys[j].reshape(g, g, D).copy(),
                    config=cfg,
                )
            )
        return out

    def encode(self, pixels: np.ndarray) -> ImageFeatureSet:
        pixels = np.asarray(pixels, dtype=np.float64)
        side = self.config.image_side
        if pixels.shape != (side, side, 3):
            raise ShapeError(f"expected pixels of shape ({side}, {side}, 3), got {pixels.shape}")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        return self.encode_batch(pixels[None])[0]


@functools.lru_cache(maxsize=8)
def get_encoder(config: EncoderConfig) -> VisionEncoder:
    return VisionEncoder(config)


def encode_image(pixels: np.ndarray, config: EncoderConfig) -> ImageFeatureSet:
    return get_encoder(config).encode(pixels)


def explain_logits(keys_flat: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Scaled query-key scores, shape (M, N) for queries (M, D) and keys (N, D).

    Each row's result does not depend on how many other queries are in the
    batch, which makes batched inversion bitwise equal to per-mask runs.
    """
    d = keys_flat.shape[-1]
    # plain einsum (no BLAS dispatch) keeps a fixed per-element summation order
    return np.einsum("md,nd->mn", queries, keys_flat) / math.sqrt(d)


def explain_weights(keys_flat: np.ndarray, queries: np.ndarray) -> np.ndarray:
    return layers.softmax(explain_logits(keys_flat, queries), axis=-1)


def explain_grad(keys_flat: np.ndarray, weights: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Batched softmax-Jacobian-vector product mapped back to the queries."""
    d = keys_flat.shape[-1]
    ds = layers.softmax_backward(upstream, weights, axis=-1)
    return np.einsum("mn,nd->md", ds, keys_flat) / math.sqrt(d)


def _check_query(features: ImageFeatureSet, query: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (features.config.embed_dim,):
        raise ShapeError(f"query must have shape ({features.config.embed_dim},), got {query.shape}")
    return query


def explain(features: ImageFeatureSet, query: np.ndarray) -> ExplainabilityMap:
    """Softmax over patches of ``query . key_j / sqrt(D)``."""
    query = _check_query(features, query)
    P = features.config.grid_side
    w = explain_weights(features.keys_flat, query[None])[0]
    return ExplainabilityMap(weights=w.reshape(P, P), query=query)


def explain_backward(features: ImageFeatureSet, query: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. ``query`` of a scalar loss whose gradient on the map is ``upstream``."""
    query = _check_query(features, query)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if upstream.size != features.config.num_patches:
        raise ShapeError(f"upstream gradient needs {features.config.num_patches} entries, got {upstream.size}")
    keys = features.keys_flat
    w = explain_weights(keys, query[None])
    return explain_grad(keys, w, upstream[None])[0]


# ---------------------------------------------------------------- feature file format
#
# container (magic b"MGFT", version 1), body:
#   u32 image_side | u32 patch_size | u32 embed_dim | u32 layers | u32 heads | i64 seed
#   f64[D] cls | f64[P*P*D] patches | f64[P*P*D] keys     (little-endian, row-major)

FEATURE_MAGIC = b"MGFT"
FEATURE_VERSION = 1
_FEAT_HEAD = "<IIIIIq"


def encode_features(f: ImageFeatureSet) -> bytes:
    c = f.config
    body = struct.pack(_FEAT_HEAD, c.image_side, c.patch_size, c.embed_dim, c.layers, c.heads, c.seed)
    body += container.f64(f.cls) + container.f64(f.patches) + container.f64(f.keys)
    return container.pack(FEATURE_MAGIC, FEATURE_VERSION, body)


def decode_features(data: bytes, path=None) -> ImageFeatureSet:
    return container.guarded(lambda: _decode_features(data, path), path)


def _decode_features(data: bytes, path) -> ImageFeatureSet:
    r = container.unpack(data, FEATURE_MAGIC, FEATURE_VERSION, path)
    side, patch, dim, n_layers, heads, seed = r.struct(_FEAT_HEAD)
    try:
        cfg = EncoderConfig(side, patch, dim, n_layers, heads, seed)
    except ConfigError as exc:
        raise FormatError("malformed", str(exc), path) from exc
    P, D = cfg.grid_side, cfg.embed_dim
    cls = r.array("<f8", D).astype(np.float64)
    patches = r.array("<f8", P * P * D).reshape(P, P, D).astype(np.float64)
    keys = r.array("<f8", P * P * D).reshape(P, P, D).astype(np.float64)
    r.finish()
    return ImageFeatureSet(cls=cls, patches=patches, keys=keys, config=cfg)


def write_features(features: ImageFeatureSet, path) -> None:
    Path(path).write_bytes(encode_features(features))


def read_features(path) -> ImageFeatureSet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError("malformed", f"cannot read: {exc}", path) from exc
    return decode_features(data, path)

"""Mask inversion: optimise one query per mask so its relevance map matches the mask.

The joint loss over all masks of an image is a sum of independent per-query
terms, so :func:`invert_all` runs a single batched forward/backward per step
over every query against the shared key grid and yields exactly what
per-mask runs would.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .encoder import ImageFeatureSet, explain_grad, explain_logits
from .errors import ConfigError, NonFiniteError, ShapeError
from .masks import MaskSet
from .numerics import sinusoid_table


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 50
    step_size: float = 40.0
    init: str = "cls"
    reg_weight: float = 1e-3
    loss: str = "cross_entropy"
    backtrack: bool = True
    max_halvings: int = 10

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.step_size < 0:
            raise ConfigError("step_size must be >= 0")
        if self.reg_weight < 0:
            raise ConfigError("reg_weight must be >= 0")
        if self.init not in ("cls", "zero"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.loss not in ("cross_entropy", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")


@dataclass(frozen=True, eq=False)
class ObjectToken:
    embedding: np.ndarray
    pos_embedding: np.ndarray
    source_mask_id: int
    final_loss: float
    map_iou_after: float
    confidence: float = 1.0
    is_background: bool = False
    initial_loss: float = float("nan")
    mass_before: float = float("nan")
    mass_after: float = float("nan")
    position_applied: bool = False


def downsample_mask(mask: np.ndarray, P: int) -> np.ndarray:
    """Per-patch covered fraction, normalised to a distribution (uniform if empty)."""
    mask = np.asarray(mask, dtype=np.float64)
    side = mask.shape[0]
    if mask.shape != (side, side) or side % P:
        raise ShapeError(f"grid {P} does not divide mask of shape {mask.shape}")
    k = side // P
    frac = mask.reshape(P, k, P, k).mean(axis=(1, 3))
    total = frac.sum()
    if total == 0:
        return np.full((P, P), 1.0 / (P * P))
    return frac / total


def coverage_fraction(mask: np.ndarray, P: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    k = mask.shape[0] // P
    return mask.reshape(P, k, P, k).mean(axis=(1, 3))


def _loss_terms(keys, Q, T, Q0, cfg):
    """Per-row loss and gradient; every reduction is along a row so batching is exact."""
    logits = explain_logits(keys, Q)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    W = e / s
    diff = Q - Q0
    reg = cfg.reg_weight * (diff * diff).sum(axis=-1)
    if cfg.loss == "cross_entropy":
        logw = z - np.log(s)
        loss = -(T * logw).sum(axis=-1) + reg
        # d/dlogits of -sum t log softmax = w - t (targets sum to one)
        grad = np.einsum("mn,nd->md", W - T, keys) / math.sqrt(keys.shape[-1])
    else:
        r = W - T
        loss = (r * r).sum(axis=-1) + reg
        grad = explain_grad(keys, W, 2.0 * r)
    grad = grad + 2.0 * cfg.reg_weight * diff
    return loss, grad, W


def inversion_objective(keys_flat, queries, targets, init, cfg: InversionConfig):
    """Per-query loss (M,) and its gradient (M, D) for target maps ``targets`` (M, N)."""
    loss, grad, _ = _loss_terms(
        np.asarray(keys_flat, dtype=np.float64), np.asarray(queries, dtype=np.float64),
        np.asarray(targets, dtype=np.float64), np.asarray(init, dtype=np.float64), cfg,
    )
    return loss, grad


def _optimize(keys, T, Q0, cfg):
    Q = Q0.copy()
    loss, grad, W = _loss_terms(keys, Q, T, Q0, cfg)
    loss0, W0 = loss.copy(), W.copy()
    if not np.all(np.isfinite(loss)):
        raise NonFiniteError("non-finite inversion loss at initialisation", index=0)
    for step in range(1, cfg.steps + 1):
        eta = np.full(Q.shape[0], float(cfg.step_size))
        pending = np.arange(Q.shape[0])
        tries = cfg.max_halvings + 1 if cfg.backtrack else 1
        for _ in range(tries):
            cand = Q[pending] - eta[pending, None] * grad[pending]
            lc, gc, wc = _loss_terms(keys, cand, T[pending], Q0[pending], cfg)
            if not cfg.backtrack and not np.all(np.isfinite(lc)):
                raise NonFiniteError(f"non-finite inversion loss at step {step}", index=step)
            ok = np.isfinite(lc) & ((lc <= loss[pending]) | (not cfg.backtrack))
            acc = pending[ok]
            Q[acc], loss[acc], grad[acc], W[acc] = cand[ok], lc[ok], gc[ok], wc[ok]
            pending = pending[~ok]
            if pending.size == 0:
                break
            eta[pending] *= 0.5
        if not np.all(np.isfinite(Q)):
            raise NonFiniteError(f"non-finite query at step {step}", index=step)
    return Q, loss0, loss, W0, W


def _top_support_iou(weights: np.ndarray, target: np.ndarray) -> float:
    support = target.reshape(-1) > 0
    n = int(support.sum())
    if n == 0:
        return 0.0
    order = np.argsort(-weights.reshape(-1), kind="stable")[:n]
    top = np.zeros_like(support)
    top[order] = True
    return float((top & support).sum() / (top | support).sum())


def _targets(masks, P):
    return np.stack([downsample_mask(m, P).reshape(-1) for m in masks])


def _init_queries(features: ImageFeatureSet, count: int, cfg: InversionConfig) -> np.ndarray:
    D = features.config.embed_dim
    if cfg.init == "cls":
        return np.tile(np.asarray(features.cls, dtype=np.float64), (count, 1))
    return np.zeros((count, D))


def _check_mask(mask, features):
    side = features.config.image_side
    if np.shape(mask) != (side, side):
        raise ShapeError(f"mask shape {np.shape(mask)} does not match image side {side}")


def _run(masks, features, cfg, workers=1):
    for m in masks:
        _check_mask(m, features)
    P = features.config.grid_side
    keys = np.asarray(features.keys_flat, dtype=np.float64)
    T = _targets(masks, P)
    Q0 = _init_queries(features, len(masks), cfg)
    if workers <= 1 or len(masks) < 2:
        return T, _optimize(keys, T, Q0, cfg)
    chunks = np.array_split(np.arange(len(masks)), min(workers, len(masks)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda idx: _optimize(keys, T[idx], Q0[idx], cfg), chunks))
    merged = tuple(np.concatenate([p[i] for p in parts]) for i in range(5))
    return T, merged


def _tokens(members, T, result, dim):
    """``members`` yields (confidence, is_background) pairs."""
    Q, loss0, loss, W0, W = result
    out = []
    for i, (conf, is_bg) in enumerate(members):
        support = T[i] > 0
        out.append(
            ObjectToken(
                embedding=Q[i].copy(),
                pos_embedding=np.zeros(dim),
                source_mask_id=i,
                final_loss=float(loss[i]),
                map_iou_after=_top_support_iou(W[i], T[i]),
                confidence=float(conf),
                is_background=bool(is_bg),
                initial_loss=float(loss0[i]),
                mass_before=float(W0[i][support].sum()),
                mass_after=float(W[i][support].sum()),
            )
        )
    return out


def invert_mask(mask: np.ndarray, features: ImageFeatureSet, cfg: InversionConfig) -> ObjectToken:
    """Gradient descent (with backtracking) on one query for one pixel mask."""
    mask = np.asarray(mask, dtype=bool)
    T, result = _run([mask], features, cfg)
    return _tokens([(1.0, False)], T, result, features.config.embed_dim)[0]


def invert_all(maskset: MaskSet, features: ImageFeatureSet, cfg: InversionConfig, workers: int = 1) -> list[ObjectToken]:
    """One token per member (proposals, then background), ids are member indices."""
    members = maskset.members()
    if not members:
        raise ValueError("mask set is empty")
    T, result = _run([p.mask for p in members], features, cfg, workers=workers)
    meta = [(p.confidence, p.is_background) for p in members]
    return _tokens(meta, T, result, features.config.embed_dim)


def bbox_center(bbox, image_side: int) -> tuple[float, float]:
    x0, y0, x1, y1 = bbox
    return (x0 + x1 + 1) / 2.0 / image_side, (y0 + y1 + 1) / 2.0 / image_side


def positional_embedding(bbox, image_side: int, dim: int, scale: float = 100.0) -> np.ndarray:
    """Sinusoidal code of the bbox center: x in the first half, y in the second.

    The normalised center in [0, 1] is multiplied by ``scale`` before the
    usual interleaved sin/cos table with geometric frequencies.
    """
    if dim % 4:
        raise ShapeError(f"positional dim must be a multiple of 4, got {dim}")
    cx, cy = bbox_center(bbox, image_side)
    half = dim // 2
    return np.concatenate([sinusoid_table(np.array(cx * scale), half), sinusoid_table(np.array(cy * scale), half)])


def attach_position(token: ObjectToken, pe: np.ndarray) -> ObjectToken:
    pe = np.asarray(pe, dtype=np.float64)
    if pe.shape != token.embedding.shape:
        raise ShapeError(f"position shape {pe.shape} vs embedding {token.embedding.shape}")
    return replace(token, embedding=token.embedding + pe, pos_embedding=pe, position_applied=True)


def build_object_tokens(
    maskset: MaskSet,
    features: ImageFeatureSet,
    cfg: InversionConfig,
    *,
    position_stage: str = "pre_scale",
    background_position: bool = True,
    workers: int = 1,
) -> list[ObjectToken]:
    """Invert every member and attach bbox-center positions.

    With ``position_stage="post_scale"`` the position is only recorded and
    :func:`multigran.tokens.assemble` adds it after scaling.
    """
    if position_stage not in ("pre_scale", "post_scale"):
        raise ConfigError(f"unknown position_stage {position_stage!r}")
    side, dim = maskset.image_side, features.config.embed_dim
    toks = invert_all(maskset, features, cfg, workers=workers)
    out = []
    for tok, p in zip(toks, maskset.members()):
        if p.is_background and not background_position:
            pe = np.zeros(dim)
        else:
            pe = positional_embedding(p.bbox, side, dim)
        if position_stage == "pre_scale":
            out.append(attach_position(tok, pe))
        else:
            out.append(replace(tok, pos_embedding=pe))
    return out

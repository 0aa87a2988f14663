"""Token bundles: assembly of global/local/object tokens, norm scaling, reduction, I/O."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .errors import ConfigError, FormatError, InfeasiblePlanError, ShapeError
from .inversion import ObjectToken
from .numerics import avg_pool_2d, make_rng, max_pool_2d

log = logging.getLogger(__name__)

SCALE_MODES = ("norm_retarget", "norm_standardize", "literal_affine")
KINDS = ("global", "local", "object")


@dataclass(frozen=True)
class PatchStats:
    mu: float
    sigma: float


def _as_rows(tokens) -> np.ndarray:
    a = np.asarray(tokens, dtype=np.float64)
    return a.reshape(-1, a.shape[-1])


def compute_patch_stats(local_tokens) -> PatchStats:
    """Mean and population std of the L2 norms of the (pooled) patch tokens."""
    rows = _as_rows(local_tokens)
    if rows.shape[0] < 2:
        raise ValueError(f"need at least 2 local tokens, got {rows.shape[0]}")
    norms = np.linalg.norm(rows, axis=1)
    stats = PatchStats(mu=float(norms.mean()), sigma=float(norms.std()))
    if stats.sigma == 0.0:
        log.warning("patch token norms are constant (sigma=0); scaling targets mu only")
    return stats


def compute_entry_stats(local_tokens) -> PatchStats:
    """Mean and population std over all entries of the patch tokens."""
    rows = _as_rows(local_tokens)
    if rows.shape[0] < 2:
        raise ValueError(f"need at least 2 local tokens, got {rows.shape[0]}")
    return PatchStats(mu=float(rows.mean()), sigma=float(rows.std()))


def scale_token(t, stats: PatchStats, z: float = 0.0) -> np.ndarray:
    """Rescale ``t`` along its own direction to norm ``mu + sigma * z``."""
    t = np.asarray(t, dtype=np.float64)
    n = np.linalg.norm(t)
    if n == 0.0:
        raise ValueError("cannot rescale a zero-norm token")
    target = stats.mu + stats.sigma * z
    if target <= 0.0:
        raise ValueError(f"target norm {target} is not positive")
    return t * (target / n)


def scale_affine(t, entry_stats: PatchStats) -> np.ndarray:
    """Entrywise standardise ``t`` then map by ``* sigma + mu``."""
    t = np.asarray(t, dtype=np.float64)
    sd = t.std()
    if sd == 0.0:
        raise ValueError("cannot standardise a constant token")
    return (t - t.mean()) / sd * entry_stats.sigma + entry_stats.mu


@dataclass(frozen=True)
class Token:
    kind: str
    embedding: np.ndarray
    meta: dict


@dataclass(frozen=True, eq=False)
class TokenBundle:
    dim: int
    global_token: np.ndarray | None
    local_tokens: np.ndarray  # (n_local, D)
    local_positions: np.ndarray  # (n_local, 2) row, col in the local grid
    local_grid: tuple[int, int] | None  # set while locals still form a full row-major grid
    object_tokens: np.ndarray  # (n_object, D), descending confidence
    object_ids: np.ndarray
    object_confidence: np.ndarray
    object_is_background: np.ndarray
    scaled: bool = False
    scale_mode: str = "norm_retarget"
    patch_stats: PatchStats | None = None

    @property
    def counts(self) -> dict[str, int]:
        return {
            "global": int(self.global_token is not None),
            "local": int(self.local_tokens.shape[0]),
            "object": int(self.object_tokens.shape[0]),
        }

    def __len__(self) -> int:
        return sum(self.counts.values())

    def matrix(self) -> np.ndarray:
        """All embeddings stacked in bundle order: global, locals, objects."""
        parts = []
        if self.global_token is not None:
            parts.append(self.global_token[None])
        parts += [self.local_tokens, self.object_tokens]
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.dim))

    def tokens(self) -> list[Token]:
        out = []
        if self.global_token is not None:
            out.append(Token("global", self.global_token, {"index": 0}))
        for i, (e, pos) in enumerate(zip(self.local_tokens, self.local_positions)):
            out.append(Token("local", e, {"index": i, "grid_pos": (int(pos[0]), int(pos[1]))}))
        for i, e in enumerate(self.object_tokens):
            out.append(
                Token(
                    "object",
                    e,
                    {
                        "index": i,
                        "mask_id": int(self.object_ids[i]),
                        "confidence": float(self.object_confidence[i]),
                        "background": bool(self.object_is_background[i]),
                    },
                )
            )
        return out

    def same_as(self, other: "TokenBundle") -> bool:
        """Bitwise equality of every field."""
        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.dim == other.dim
            and eq(self.global_token, other.global_token)
            and eq(self.local_tokens, other.local_tokens)
            and eq(self.local_positions, other.local_positions)
            and self.local_grid == other.local_grid
            and eq(self.object_tokens, other.object_tokens)
            and eq(self.object_ids, other.object_ids)
            and eq(self.object_confidence, other.object_confidence)
            and eq(self.object_is_background, other.object_is_background)
            and self.scaled == other.scaled
            and self.scale_mode == other.scale_mode
            and self.patch_stats == other.patch_stats
        )


def _grid_positions(rows: int, cols: int) -> np.ndarray:
    r, c = np.divmod(np.arange(rows * cols), cols)
    return np.stack([r, c], axis=1).astype(np.int64)


def assemble(
    global_token,
    locals_grid,
    objects: Sequence[ObjectToken],
    do_scale: bool = True,
    scale_mode: str = "norm_retarget",
) -> TokenBundle:
    """Order tokens as [global, locals row-major, objects by descending confidence].

    With ``do_scale`` the global and object tokens are rescaled to the patch
    statistics of this image; local tokens are never rescaled. Object tokens
    whose position was deferred (``position_applied=False``) get it added
    after scaling.
    """
    if scale_mode not in SCALE_MODES:
        raise ConfigError(f"unknown scale_mode {scale_mode!r}")
    grid = np.asarray(locals_grid, dtype=np.float64)
    if grid.ndim != 3:
        raise ShapeError(f"locals must be a (rows, cols, dim) grid, got {grid.shape}")
    rows, cols, dim = grid.shape
    g = None if global_token is None else np.asarray(global_token, dtype=np.float64)
    if g is not None and g.shape != (dim,):
        raise ShapeError(f"global token shape {g.shape} does not match dim {dim}")
    for o in objects:
        if o.embedding.shape != (dim,):
            raise ShapeError(f"object token shape {o.embedding.shape} does not match dim {dim}")
    order = sorted(range(len(objects)), key=lambda i: (-objects[i].confidence, i))
    objs = [objects[i] for i in order]
    obj = np.array([o.embedding for o in objs], dtype=np.float64).reshape(len(objs), dim)
    local = grid.reshape(rows * cols, dim).copy()

    stats = None
    if do_scale:
        if scale_mode == "literal_affine":
            stats = compute_entry_stats(local)
            g = None if g is None else scale_affine(g, stats)
            obj = np.array([scale_affine(t, stats) for t in obj]).reshape(len(objs), dim)
        else:
            stats = compute_patch_stats(local)
            z = np.zeros(len(objs))
            if scale_mode == "norm_standardize" and len(objs) > 1:
                n = np.linalg.norm(obj, axis=1)
                if n.std() > 0:
                    z = (n - n.mean()) / n.std()
            g = None if g is None else scale_token(g, stats)
            obj = np.array([scale_token(t, stats, zi) for t, zi in zip(obj, z)]).reshape(len(objs), dim)
    late = [not o.position_applied for o in objs]
    if any(late):
        obj = obj + np.array([o.pos_embedding if lt else np.zeros(dim) for o, lt in zip(objs, late)])

    return TokenBundle(
        dim=dim,
        global_token=g,
        local_tokens=local,
        local_positions=_grid_positions(rows, cols),
        local_grid=(rows, cols),
        object_tokens=obj,
        object_ids=np.array([o.source_mask_id for o in objs], dtype=np.int64),
        object_confidence=np.array([o.confidence for o in objs], dtype=np.float64),
        object_is_background=np.array([o.is_background for o in objs], dtype=bool),
        scaled=bool(do_scale),
        scale_mode=scale_mode,
        patch_stats=stats,
    )


# ---------------------------------------------------------------- reduction

PATCH_KINDS = ("keep_all", "pool", "maxpool", "prune_random", "prune_topk_norm")


@dataclass(frozen=True)
class PatchStrategy:
    kind: str = "keep_all"
    kernel: int | None = None
    n: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in PATCH_KINDS:
            raise ConfigError(f"unknown patch strategy {self.kind!r}")
        if self.kind in ("pool", "maxpool") and (self.kernel is None or self.kernel < 1):
            raise ConfigError(f"{self.kind} needs kernel >= 1")
        if self.kind in ("prune_random", "prune_topk_norm") and (self.n is None or self.n < 0):
            raise ConfigError(f"{self.kind} needs n >= 0")
        if self.kind == "prune_random" and self.seed is None:
            raise ConfigError("prune_random needs an explicit seed")

    @classmethod
    def keep_all(cls):
        return cls("keep_all")

    @classmethod
    def pool(cls, kernel: int):
        return cls("pool", kernel=kernel)

    @classmethod
    def maxpool(cls, kernel: int):
        return cls("maxpool", kernel=kernel)

    @classmethod
    def prune_random(cls, n: int, seed: int):
        return cls("prune_random", n=n, seed=seed)

    @classmethod
    def prune_topk_norm(cls, n: int):
        return cls("prune_topk_norm", n=n)

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class ReductionPlan:
    patch: PatchStrategy = field(default_factory=PatchStrategy)
    object_keep: int | None = None  # None keeps every object token
    use_global: bool = True

    def __post_init__(self):
        if self.object_keep is not None and self.object_keep < 0:
            raise ConfigError("object_keep must be >= 0")

    def predict_counts(self, counts: dict[str, int], local_grid: tuple[int, int] | None) -> dict[str, int]:
        """Token counts this plan yields for a bundle with ``counts``; raises if infeasible."""
        p = self.patch
        n_local = counts["local"]
        if p.kind in ("pool", "maxpool"):
            if local_grid is None or local_grid[0] % p.kernel or local_grid[1] % p.kernel:
                raise InfeasiblePlanError(f"{p.kind}({p.kernel}) needs a divisible local grid", {"local_grid": local_grid}, {"kernel": p.kernel})
            local = (local_grid[0] // p.kernel) * (local_grid[1] // p.kernel)
        elif p.kind in ("prune_random", "prune_topk_norm"):
            if p.n > n_local:
                raise InfeasiblePlanError("not enough local tokens", counts, {"local": p.n})
            local = p.n
        else:
            local = n_local
        if self.object_keep is not None and self.object_keep > counts["object"]:
            raise InfeasiblePlanError("not enough object tokens", counts, {"object": self.object_keep})
        obj = counts["object"] if self.object_keep is None else self.object_keep
        return {"global": counts["global"] if self.use_global else 0, "local": local, "object": obj}

    def to_dict(self) -> dict:
        return {"patch": self.patch.to_dict(), "object_keep": self.object_keep, "use_global": self.use_global}

    @classmethod
    def from_dict(cls, d: dict) -> "ReductionPlan":
        unknown = set(d) - {"patch", "object_keep", "use_global"}
        if unknown:
            raise ConfigError(f"unknown reduction plan keys {sorted(unknown)}")
        return cls(
            patch=PatchStrategy(**d.get("patch", {"kind": "keep_all"})),
            object_keep=d.get("object_keep"),
            use_global=d.get("use_global", True),
        )


def reduce(bundle: TokenBundle, plan: ReductionPlan) -> TokenBundle:
    """Apply a test-time budget. Never rescales and never reorders survivors."""
    plan.predict_counts(bundle.counts, bundle.local_grid)
    p = plan.patch
    local, pos, grid = bundle.local_tokens, bundle.local_positions, bundle.local_grid
    if p.kind in ("pool", "maxpool"):
        r, c = grid
        pooled = (avg_pool_2d if p.kind == "pool" else max_pool_2d)(local.reshape(r, c, -1), p.kernel)
        grid = (r // p.kernel, c // p.kernel)
        local = pooled.reshape(grid[0] * grid[1], -1)
        pos = _grid_positions(*grid)
    elif p.kind == "prune_random":
        idx = np.sort(make_rng(p.seed).choice(local.shape[0], size=p.n, replace=False))
        local, pos, grid = local[idx], pos[idx], None
    elif p.kind == "prune_topk_norm":
        norms = np.linalg.norm(local, axis=1)
        idx = np.sort(np.argsort(-norms, kind="stable")[: p.n])
        local, pos, grid = local[idx], pos[idx], None
    if p.kind != "keep_all" and grid is not None and grid[0] * grid[1] != local.shape[0]:
        grid = None
    k = bundle.object_tokens.shape[0] if plan.object_keep is None else plan.object_keep
    return replace(
        bundle,
        global_token=bundle.global_token if plan.use_global else None,
        local_tokens=local,
        local_positions=pos,
        local_grid=grid,
        object_tokens=bundle.object_tokens[:k],
        object_ids=bundle.object_ids[:k],
        object_confidence=bundle.object_confidence[:k],
        object_is_background=bundle.object_is_background[:k],
    )


# ---------------------------------------------------------------- file format
#
# container (magic b"MGTB", version 1), body:
#   u16 flags (bit0 scaled, bit1 global present, bit2 local grid present,
#              bit3 patch stats present)
#   u32 dim | u32 n_local | u32 n_object | u32 grid_rows | u32 grid_cols
#   u8 scale_mode index | f64 mu | f64 sigma
#   f64[dim] global (if present) | f64[n_local*dim] locals | i32[n_local*2] positions
#   f64[n_object*dim] objects | i64[n_object] mask ids | f64[n_object] confidences
#   u8[n_object] background flags
# All numbers little-endian.

BUNDLE_MAGIC = b"MGTB"
BUNDLE_VERSION = 1
_HEAD = "<HIIIIIBdd"


def encode_bundle(b: TokenBundle) -> bytes:
    flags = (
        int(b.scaled)
        | int(b.global_token is not None) << 1
        | int(b.local_grid is not None) << 2
        | int(b.patch_stats is not None) << 3
    )
    rows, cols = b.local_grid or (0, 0)
    stats = b.patch_stats or PatchStats(0.0, 0.0)
    parts = [
        struct.pack(
            _HEAD, flags, b.dim, b.local_tokens.shape[0], b.object_tokens.shape[0], rows, cols,
            SCALE_MODES.index(b.scale_mode), stats.mu, stats.sigma,
        )
    ]
    if b.global_token is not None:
        parts.append(container.f64(b.global_token))
    parts += [
        container.f64(b.local_tokens),
        np.ascontiguousarray(b.local_positions, dtype="<i4").tobytes(),
        container.f64(b.object_tokens),
        np.ascontiguousarray(b.object_ids, dtype="<i8").tobytes(),
        container.f64(b.object_confidence),
        np.ascontiguousarray(b.object_is_background, dtype=np.uint8).tobytes(),
    ]
    return container.pack(BUNDLE_MAGIC, BUNDLE_VERSION, b"".join(parts))


def decode_bundle(data: bytes, path=None) -> TokenBundle:
    return container.guarded(lambda: _decode_bundle(data, path), path)


def _decode_bundle(data: bytes, path) -> TokenBundle:
    r = container.unpack(data, BUNDLE_MAGIC, BUNDLE_VERSION, path)
    flags, dim, n_local, n_obj, rows, cols, mode, mu, sigma = r.struct(_HEAD)
    if flags & ~0xF or mode >= len(SCALE_MODES):
        raise FormatError("malformed", f"bad flags {flags} or scale mode {mode}", path)
    g = r.array("<f8", dim) if flags & 2 else None
    local = r.array("<f8", n_local * dim).reshape(n_local, dim)
    pos = r.array("<i4", n_local * 2).reshape(n_local, 2).astype(np.int64)
    obj = r.array("<f8", n_obj * dim).reshape(n_obj, dim)
    ids = r.array("<i8", n_obj).astype(np.int64)
    conf = r.array("<f8", n_obj).astype(np.float64)
    bg = r.array("u1", n_obj)
    r.finish()
    if bg.size and bg.max() > 1:
        raise FormatError("malformed", "background flags must be 0 or 1", path)
    grid = (rows, cols) if flags & 4 else None
    if grid is not None and rows * cols != n_local:
        raise FormatError("malformed", f"grid {rows}x{cols} does not hold {n_local} tokens", path)
    return TokenBundle(
        dim=dim,
        global_token=None if g is None else g.astype(np.float64),
        local_tokens=local.astype(np.float64),
        local_positions=pos,
        local_grid=grid,
        object_tokens=obj.astype(np.float64),
        object_ids=ids,
        object_confidence=conf,
        object_is_background=bg.astype(bool),
        scaled=bool(flags & 1),
        scale_mode=SCALE_MODES[mode],
        patch_stats=PatchStats(mu, sigma) if flags & 8 else None,
    )


def write_bundle(bundle: TokenBundle, path) -> None:
    Path(path).write_bytes(encode_bundle(bundle))


def read_bundle(path) -> TokenBundle:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError("malformed", f"cannot read: {exc}", path) from exc
    return decode_bundle(data, path)


def empty_bundle(dim: int) -> TokenBundle:
    return TokenBundle(
        dim=dim,
        global_token=None,
        local_tokens=np.zeros((0, dim)),
        local_positions=np.zeros((0, 2), dtype=np.int64),
        local_grid=None,
        object_tokens=np.zeros((0, dim)),
        object_ids=np.zeros(0, dtype=np.int64),
        object_confidence=np.zeros(0),
        object_is_background=np.zeros(0, dtype=bool),
    )

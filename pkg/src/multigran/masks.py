"""Binary mask proposals: synthesis, background completion, IoU dedup, pruning.

Masks are boolean (side, side) arrays indexed ``[y, x]``. Bounding boxes are
inclusive pixel coordinates ``(x_min, y_min, x_max, y_max)``.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

BBox = tuple[int, int, int, int]


def tight_bbox(mask: np.ndarray) -> BBox | None:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


def full_bbox(side: int) -> BBox:
    return 0, 0, side - 1, side - 1


@dataclass(frozen=True, eq=False)
class MaskProposal:
    mask: np.ndarray
    bbox: BBox
    confidence: float
    is_background: bool = False
    source_id: int = -1  # ground-truth object this proposal was derived from, if known

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ShapeError(f"mask must be square 2-D, got {m.shape}")
        x0, y0, x1, y1 = self.bbox
        side = m.shape[0]
        if not (0 <= x0 <= x1 < side and 0 <= y0 <= y1 < side):
            raise ShapeError(f"bbox {self.bbox} outside a {side}x{side} image")
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if not self.is_background and not m.any():
            raise ValueError("only the background proposal may have an empty mask")

    @classmethod
    def from_mask(cls, mask: np.ndarray, confidence: float = 1.0, source_id: int = -1) -> "MaskProposal":
        bbox = tight_bbox(mask)
        if bbox is None:
            raise ValueError("cannot build a proposal from an empty mask")
        return cls(mask=mask, bbox=bbox, confidence=float(confidence), source_id=source_id)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    def same_as(self, other: "MaskProposal") -> bool:
        return (
            np.array_equal(self.mask, other.mask)
            and self.bbox == other.bbox
            and self.confidence == other.confidence
            and self.is_background == other.is_background
        )


@dataclass(frozen=True, eq=False)
class MaskSet:
    proposals: tuple[MaskProposal, ...]
    image_side: int
    background: MaskProposal | None = None

    def __post_init__(self):
        object.__setattr__(self, "proposals", tuple(self.proposals))
        for p in self.members():
            if p.mask.shape != (self.image_side, self.image_side):
                raise ShapeError(f"mask shape {p.mask.shape} does not match image side {self.image_side}")

    def members(self) -> list[MaskProposal]:
        out = list(self.proposals)
        if self.background is not None:
            out.append(self.background)
        return out

    def __len__(self) -> int:
        return len(self.proposals) + (self.background is not None)

    def union(self) -> np.ndarray:
        acc = np.zeros((self.image_side, self.image_side), dtype=bool)
        for p in self.proposals:
            acc |= p.mask
        return acc

    def same_as(self, other: "MaskSet") -> bool:
        if self.image_side != other.image_side or len(self.proposals) != len(other.proposals):
            return False
        if (self.background is None) != (other.background is None):
            return False
        if self.background is not None and not self.background.same_as(other.background):
            return False
        return all(a.same_as(b) for a, b in zip(self.proposals, other.proposals))


# ---------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class Jitter:
    """Perturbations applied to ground-truth masks when oversampling proposals.

    ``shift_frac`` bounds the translation as a fraction of the object's bbox
    side, ``grow`` bounds the dilation/erosion radius in pixels, and the
    confidence noise factor is drawn from ``U(confidence_floor, 1)``.
    """

    shift_frac: float = 0.2
    grow: int = 1
    confidence_floor: float = 0.8

    @classmethod
    def none(cls) -> "Jitter":
        return cls(shift_frac=0.0, grow=0, confidence_floor=1.0)


def _shift(mask: np.ndarray, dx: int, dy: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = mask[ys_src, xs_src]
    return out


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _erode(mask: np.ndarray) -> np.ndarray:
    return ~_dilate(~mask)


def synth_proposals(scene, n: int, jitter: Jitter, rng: np.random.Generator) -> MaskSet:
    """Oversample ``n`` proposals from a scene's ground-truth object masks.

    ``scene`` needs ``object_masks`` (sequence of bool arrays) and
    ``image_side``. The first proposals cycle through every object once so
    each object is represented; the rest pick a source object at random.
    Confidence is IoU with the source times ``U(confidence_floor, 1)``.
    """
    sources = list(scene.object_masks)
    k = len(sources)
    if n < k:
        raise ValueError(f"need at least {k} proposals for {k} objects, got n={n}")
    props = []
    for i in range(n):
        src = i if i < k else int(rng.integers(k))
        base = sources[src]
        m = base
        x0, y0, x1, y1 = tight_bbox(base)
        side = min(x1 - x0 + 1, y1 - y0 + 1)
        s = int(jitter.shift_frac * side)
        if s > 0:
            dx, dy = (int(v) for v in rng.integers(-s, s + 1, size=2))
            m = _shift(m, dx, dy)
        if jitter.grow > 0:
            r = int(rng.integers(-jitter.grow, jitter.grow + 1))
            for _ in range(abs(r)):
                nxt = _dilate(m) if r > 0 else _erode(m)
                if not nxt.any():
                    break
                m = nxt
        if not m.any():
            m = base
        noise = 1.0 if jitter.confidence_floor >= 1.0 else float(rng.uniform(jitter.confidence_floor, 1.0))
        conf = iou(m, base) * noise
        props.append(MaskProposal.from_mask(m, confidence=conf, source_id=src))
    return MaskSet(proposals=tuple(props), image_side=scene.image_side)


def add_background(mset: MaskSet) -> MaskSet:
    """Append the complement of the proposal union; its bbox is the full image."""
    bg = ~mset.union()
    side = mset.image_side
    background = MaskProposal(mask=bg, bbox=full_bbox(side), confidence=1.0, is_background=True)
    return replace(mset, background=background)


# ---------------------------------------------------------------- IoU / pruning


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def iou_matrix(masks: Sequence[np.ndarray]) -> np.ndarray:
    if not masks:
        return np.zeros((0, 0))
    flat = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in masks]).astype(np.int64)
    inter = flat @ flat.T
    area = flat.sum(axis=1)
    union = area[:, None] + area[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return out


def confidence_order(proposals: Sequence[MaskProposal]) -> list[int]:
    """Indices by descending confidence, lower index first on ties."""
    return sorted(range(len(proposals)), key=lambda i: (-proposals[i].confidence, i))


def dedup_by_iou(mset: MaskSet, threshold: float = 0.5) -> MaskSet:
    """Greedy suppression: keep a proposal iff its IoU with every kept one is below ``threshold``."""
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"threshold must be in (0, 1], got {threshold}")
    props = mset.proposals
    ious = iou_matrix([p.mask for p in props])
    kept: list[int] = []
    for i in confidence_order(props):
        if all(ious[i, j] < threshold for j in kept):
            kept.append(i)
    return replace(mset, proposals=tuple(props[i] for i in kept))


def prune_by_confidence(mset: MaskSet, keep: int) -> MaskSet:
    """Retain the ``keep`` most confident proposals; the background is extra."""
    if keep < 0:
        raise ConfigError(f"keep must be >= 0, got {keep}")
    order = confidence_order(mset.proposals)[:keep]
    return replace(mset, proposals=tuple(mset.proposals[i] for i in order))


def budget_order(mset: MaskSet, threshold: float = 0.5) -> list[int]:
    """Proposal indices in test-time priority: dedup survivors, then the suppressed.

    Both groups are in descending confidence. Taking a prefix of this order
    equals ``prune_by_confidence(dedup_by_iou(...))`` whenever enough
    proposals survive dedup, and tops up from the suppressed ones otherwise.
    """
    props = mset.proposals
    ious = iou_matrix([p.mask for p in props])
    kept: list[int] = []
    dropped: list[int] = []
    for i in confidence_order(props):
        (kept if all(ious[i, j] < threshold for j in kept) else dropped).append(i)
    return kept + dropped


# ---------------------------------------------------------------- alternative families


def tiled_masks(image_side: int, grid: int) -> MaskSet:
    """``grid x grid`` disjoint rectangles covering the image; the last row/col absorbs remainders."""
    if grid < 1:
        raise ConfigError(f"grid must be >= 1, got {grid}")
    if grid > image_side:
        raise ConfigError(f"grid {grid} finer than image side {image_side}")
    step = image_side // grid
    edges = [i * step for i in range(grid)] + [image_side]
    props = []
    for r in range(grid):
        for c in range(grid):
            m = np.zeros((image_side, image_side), dtype=bool)
            m[edges[r] : edges[r + 1], edges[c] : edges[c + 1]] = True
            props.append(MaskProposal.from_mask(m, confidence=1.0))
    return MaskSet(proposals=tuple(props), image_side=image_side)


def multi_tiled_masks(image_side: int, grids: Sequence[int] = (2, 3, 4, 5)) -> MaskSet:
    """Concatenation of several tilings, coarse first."""
    props: list[MaskProposal] = []
    for g in grids:
        props.extend(tiled_masks(image_side, g).proposals)
    return MaskSet(proposals=tuple(props), image_side=image_side)


def bbox_masks(mset: MaskSet) -> MaskSet:
    """Replace every proposal mask by its filled bbox; a present background is recomputed."""
    props = []
    for p in mset.proposals:
        m = np.zeros_like(p.mask)
        x0, y0, x1, y1 = p.bbox
        m[y0 : y1 + 1, x0 : x1 + 1] = True
        props.append(replace(p, mask=m))
    out = replace(mset, proposals=tuple(props), background=None)
    return add_background(out) if mset.background is not None else out


# ---------------------------------------------------------------- RLE file format
#
# header  : b"MGMK" | u16 version | u16 flags (bit0: background present)
#           | u32 image_side | u32 proposal count
# per mask: i32 x_min, y_min, x_max, y_max | f64 confidence | u8 is_background
#           | i32 source_id | u32 run count | u32 runs[...]
# trailer : u32 crc32 of all preceding bytes
# Runs alternate 0/1 starting with a (possibly empty) run of zeros over the
# row-major flattened mask; they sum to image_side**2. Proposals come first,
# then the background if flagged.

MASK_MAGIC = b"MGMK"
MASK_VERSION = 1
_MASK_HEAD = struct.Struct("<4sHHII")
_MASK_REC = struct.Struct("<iiiidBiI")


def rle_encode(mask: np.ndarray) -> np.ndarray:
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds)
    if flat.size and flat[0] == 1:
        runs = np.concatenate([[0], runs])
    return runs.astype(np.uint32)


def rle_decode(runs: np.ndarray, side: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    if runs.sum() != side * side:
        raise FormatError("malformed", f"runs sum to {runs.sum()}, expected {side * side}")
    values = np.arange(runs.size) % 2
    return np.repeat(values.astype(bool), runs).reshape(side, side)


def encode_masks(mset: MaskSet) -> bytes:
    parts = [_MASK_HEAD.pack(MASK_MAGIC, MASK_VERSION, int(mset.background is not None), mset.image_side, len(mset.proposals))]
    for p in mset.members():
        runs = rle_encode(p.mask)
        parts.append(_MASK_REC.pack(*p.bbox, p.confidence, int(p.is_background), p.source_id, runs.size))
        parts.append(runs.astype("<u4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_masks(data: bytes, path=None) -> MaskSet:
    try:
        return _decode_masks(data, path)
    except FormatError:
        raise
    except (struct.error, ValueError, OverflowError, MemoryError) as exc:
        raise FormatError("malformed", str(exc), path) from exc


def _decode_masks(data: bytes, path) -> MaskSet:
    if len(data) < _MASK_HEAD.size + 4:
        raise FormatError("truncated", f"{len(data)} bytes is shorter than the header", path)
    magic, version, flags, side, count = _MASK_HEAD.unpack_from(data, 0)
    if magic != MASK_MAGIC:
        raise FormatError("magic", f"bad magic {magic!r}", path)
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise FormatError("checksum", "crc32 mismatch (corrupted or truncated)", path)
    if version != MASK_VERSION:
        raise FormatError("version", f"unsupported version {version}", path)
    if flags & ~1 or side < 1:
        raise FormatError("malformed", f"bad header flags={flags} side={side}", path)
    off = _MASK_HEAD.size
    end = len(data) - 4
    members = []
    for _ in range(count + (flags & 1)):
        if off + _MASK_REC.size > end:
            raise FormatError("truncated", "mask record runs past end of data", path)
        x0, y0, x1, y1, conf, is_bg, src, nruns = _MASK_REC.unpack_from(data, off)
        off += _MASK_REC.size
        if off + 4 * nruns > end:
            raise FormatError("truncated", "run list runs past end of data", path)
        runs = np.frombuffer(data, dtype="<u4", count=nruns, offset=off)
        off += 4 * nruns
        m = rle_decode(runs, side)
        members.append(MaskProposal(mask=m, bbox=(x0, y0, x1, y1), confidence=conf, is_background=bool(is_bg), source_id=src))
    if off != end:
        raise FormatError("malformed", f"{end - off} trailing bytes", path)
    bg = members.pop() if flags & 1 else None
    if bg is not None and not bg.is_background:
        raise FormatError("malformed", "background record is not flagged as background", path)
    return MaskSet(proposals=tuple(members), image_side=side, background=bg)


def write_masks(mset: MaskSet, path) -> None:
    Path(path).write_bytes(encode_masks(mset))


def read_masks(path) -> MaskSet:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError("malformed", f"cannot read: {exc}", path) from exc
    return decode_masks(data, path)

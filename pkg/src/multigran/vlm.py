"""Projector + toy autoregressive decoder with hand-written backward passes.

The decoder sees ``[visual prefix | text]``. Visual tokens attend to each
other bidirectionally and never to text; text attends causally to text and
to the whole prefix. Only text positions get a (fixed sinusoidal) position
code, so the prefix behaves as a set and pruning it is order-independent.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import container, layers
from .errors import ConfigError, DivergenceError, FormatError, ShapeError
from .numerics import derive_seed, make_rng, sinusoid_table
from .scenes import QAItem, Vocab

log = logging.getLogger(__name__)

IGNORE = -1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    visual_dim: int = 64
    model_dim: int = 64
    projector_hidden: int = 128
    layers: int = 2
    heads: int = 4
    context: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.model_dim % 2:
            raise ConfigError("model_dim must be even")
        if self.vocab_size < 2:
            raise ConfigError("vocabulary too small")


def _block_names(i: int) -> list[str]:
    return [f"dec.b{i}.{n}" for n in ("ln1_g", "ln1_b", "wqkv", "bqkv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")]


PROJECTOR_KEYS = ("proj.w1", "proj.b1", "proj.w2", "proj.b2")


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = make_rng(cfg.seed)
    D, V, H = cfg.model_dim, cfg.vocab_size, cfg.projector_hidden
    res = 1.0 / math.sqrt(D) / math.sqrt(2 * cfg.layers)
    p = {
        "proj.w1": rng.normal(0, 1 / math.sqrt(cfg.visual_dim), (cfg.visual_dim, H)),
        "proj.b1": np.zeros(H),
        "proj.w2": rng.normal(0, 1 / math.sqrt(H), (H, D)),
        "proj.b2": np.zeros(D),
        "dec.embed": rng.normal(0, 1.0, (V, D)),
    }
    for i in range(cfg.layers):
        pre = f"dec.b{i}."
        p[pre + "ln1_g"] = np.ones(D)
        p[pre + "ln1_b"] = np.zeros(D)
        p[pre + "wqkv"] = rng.normal(0, 1 / math.sqrt(D), (D, 3 * D))
        p[pre + "bqkv"] = np.zeros(3 * D)
        p[pre + "wo"] = rng.normal(0, res, (D, D))
        p[pre + "bo"] = np.zeros(D)
        p[pre + "ln2_g"] = np.ones(D)
        p[pre + "ln2_b"] = np.zeros(D)
        p[pre + "w1"] = rng.normal(0, 1 / math.sqrt(D), (D, 4 * D))
        p[pre + "b1"] = np.zeros(4 * D)
        p[pre + "w2"] = rng.normal(0, res / 2, (4 * D, D))
        p[pre + "b2"] = np.zeros(D)
    p["dec.lnf_g"] = np.ones(D)
    p["dec.lnf_b"] = np.zeros(D)
    p["dec.head_w"] = rng.normal(0, 1 / math.sqrt(D), (D, V))
    p["dec.head_b"] = np.zeros(V)
    return p


def checksum(params: dict[str, np.ndarray], keys: Sequence[str]) -> str:
    h = hashlib.sha256()
    for k in sorted(keys):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


class Projector:
    """Two affine layers with a GELU between, applied to each token independently.

    A view onto the ``proj.*`` entries of a shared parameter dict.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @classmethod
    def identity(cls, dim: int, dtype=np.float64) -> "Projector":
        # gelu(x) - gelu(-x) == x, so [I, -I] -> gelu -> [I; -I] is the identity
        eye = np.eye(dim, dtype=dtype)
        return cls({
            "proj.w1": np.concatenate([eye, -eye], axis=1),
            "proj.b1": np.zeros(2 * dim, dtype=dtype),
            "proj.w2": np.concatenate([eye, -eye], axis=0),
            "proj.b2": np.zeros(dim, dtype=dtype),
        })

    def forward(self, x):
        p = self.params
        h, c1 = layers.linear_forward(x, p["proj.w1"], p["proj.b1"])
        a, cg = layers.gelu_forward(h)
        y, c2 = layers.linear_forward(a, p["proj.w2"], p["proj.b2"])
        return y, (c1, cg, c2)

    def backward(self, dy, cache):
        c1, cg, c2 = cache
        da, dw2, db2 = layers.linear_backward(dy, c2)
        dh = layers.gelu_backward(da, cg)
        dx, dw1, db1 = layers.linear_backward(dh, c1)
        return dx, {"proj.w1": dw1, "proj.b1": db1, "proj.w2": dw2, "proj.b2": db2}

    def __call__(self, x):
        return self.forward(x)[0]

    def checksum(self) -> str:
        return checksum(self.params, PROJECTOR_KEYS)


def attention_mask(n_visual: int, pad: np.ndarray, segment: np.ndarray | None = None) -> np.ndarray:
    """(B, S, S) boolean mask: bidirectional prefix, causal text, pad keys hidden.

    With ``segment`` (B, T), text tokens only see earlier text of their own
    segment, so several independent texts can share one visual prefix.
    """
    B, T = pad.shape
    S = n_visual + T
    allowed = np.zeros((B, S, S), dtype=bool)
    allowed[:, :, :n_visual] = True
    causal = np.tril(np.ones((T, T), dtype=bool))
    text = causal[None] & ~pad[:, None, :]
    if segment is not None:
        text &= segment[:, :, None] == segment[:, None, :]
    allowed[:, n_visual:, n_visual:] = text
    idx = np.arange(n_visual, S)
    allowed[:, idx, idx] = True
    return allowed


class ToyDecoder:
    """Pre-norm transformer decoder over a projected visual prefix plus text ids."""

    def __init__(self, params: dict[str, np.ndarray], cfg: ModelConfig):
        self.params = params
        self.cfg = cfg
        self._pe = sinusoid_table(np.arange(cfg.context), cfg.model_dim)

    @property
    def keys(self) -> list[str]:
        return [k for k in self.params if k.startswith("dec.")]

    def checksum(self) -> str:
        return checksum(self.params, self.keys)

    def _block(self, i):
        pre = f"dec.b{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def forward(self, hv, batch: "TextBatch"):
        """Logits for every text position, shape (B, T, V)."""
        p, cfg = self.params, self.cfg
        text = batch.text
        B, Nv, D = hv.shape
        T = text.shape[1]
        if Nv + T > cfg.context:
            raise ShapeError(f"sequence length {Nv + T} exceeds context {cfg.context}")
        if text.size and (text.min() < 0 or text.max() >= cfg.vocab_size):
            raise ShapeError("token id outside the vocabulary")
        xt = p["dec.embed"][text] + self._pe[batch.position].astype(hv.dtype)
        x = np.concatenate([hv, xt], axis=1)
        allowed = attention_mask(Nv, batch.pad, batch.segment)
        caches = []
        for i in range(cfg.layers):
            bp = self._block(i)
            h1, c_ln1 = layers.layer_norm_forward(x, bp["ln1_g"], bp["ln1_b"])
            a, c_att = layers.attention_forward(h1, bp, cfg.heads, allowed)
            x = x + a
            h2, c_ln2 = layers.layer_norm_forward(x, bp["ln2_g"], bp["ln2_b"])
            u, c_l1 = layers.linear_forward(h2, bp["w1"], bp["b1"])
            g, c_g = layers.gelu_forward(u)
            m, c_l2 = layers.linear_forward(g, bp["w2"], bp["b2"])
            x = x + m
            caches.append((c_ln1, c_att, c_ln2, c_l1, c_g, c_l2))
        hf, c_lnf = layers.layer_norm_forward(x[:, Nv:], p["dec.lnf_g"], p["dec.lnf_b"])
        logits, c_head = layers.linear_forward(hf, p["dec.head_w"], p["dec.head_b"])
        return logits, (caches, c_lnf, c_head, text, Nv, x.shape)

    def backward(self, dlogits, cache):
        """Gradient w.r.t. the visual prefix and every decoder parameter."""
        caches, c_lnf, c_head, text, Nv, xshape = cache
        grads = {}
        dhf, grads["dec.head_w"], grads["dec.head_b"] = layers.linear_backward(dlogits, c_head)
        dxt, grads["dec.lnf_g"], grads["dec.lnf_b"] = layers.layer_norm_backward(dhf, c_lnf)
        dx = np.zeros(xshape, dtype=dlogits.dtype)
        dx[:, Nv:] = dxt
        for i in reversed(range(self.cfg.layers)):
            c_ln1, c_att, c_ln2, c_l1, c_g, c_l2 = caches[i]
            pre = f"dec.b{i}."
            dg, grads[pre + "w2"], grads[pre + "b2"] = layers.linear_backward(dx, c_l2)
            du = layers.gelu_backward(dg, c_g)
            dh2, grads[pre + "w1"], grads[pre + "b1"] = layers.linear_backward(du, c_l1)
            dln2, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = layers.layer_norm_backward(dh2, c_ln2)
            dx = dx + dln2
            dh1, ga = layers.attention_backward(dx, c_att)
            for k, v in ga.items():
                grads[pre + k] = v
            dln1, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = layers.layer_norm_backward(dh1, c_ln1)
            dx = dx + dln1
        demb = np.zeros_like(self.params["dec.embed"])
        np.add.at(demb, text.reshape(-1), dx[:, Nv:].reshape(-1, dx.shape[-1]))
        grads["dec.embed"] = demb
        return dx[:, :Nv], grads


def cross_entropy(logits, targets):
    """Mean CE over entries with ``targets != IGNORE``; returns (loss, dlogits)."""
    valid = targets != IGNORE
    count = int(valid.sum())
    if count == 0:
        return 0.0, np.zeros_like(logits)
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    t = np.where(valid, targets, 0)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    loss = -float((picked * valid).sum()) / count
    d = np.exp(logp)
    np.put_along_axis(d, t[..., None], np.take_along_axis(d, t[..., None], axis=-1) - 1.0, axis=-1)
    d *= (valid / count)[..., None]
    return loss, d.astype(logits.dtype)


@dataclass
class TextBatch:
    text: np.ndarray  # (B, T) token ids
    targets: np.ndarray  # (B, T) next-token targets, IGNORE elsewhere
    pad: np.ndarray  # (B, T) True on padding
    segment: np.ndarray  # (B, T) text segment id, -1 on padding
    position: np.ndarray  # (B, T) position within the segment


def encode_packed(groups: Sequence[Sequence[tuple[Sequence[int], Sequence[int]]]], vocab: Vocab, text_len: int | None = None) -> TextBatch:
    """One row per group; each ``question <sep> answer`` pair is its own segment.

    Rows are left-padded. Targets are ``answer <eos>`` predicted from the
    ``<sep>`` position onwards; every other position is ignored.
    """
    rows = [[list(q) + [vocab.sep] + list(a) for q, a in g] for g in groups]
    lengths = [sum(len(r) for r in g) for g in rows]
    T = max(lengths, default=0) if text_len is None else text_len
    B = len(rows)
    text = np.full((B, T), vocab.pad, dtype=np.int64)
    targets = np.full((B, T), IGNORE, dtype=np.int64)
    segment = np.full((B, T), -1, dtype=np.int64)
    position = np.zeros((B, T), dtype=np.int64)
    for b, (group, parts) in enumerate(zip(groups, rows)):
        if lengths[b] > T:
            raise ShapeError(f"text of length {lengths[b]} exceeds text_len {T}")
        off = T - lengths[b]
        for k, ((q, a), r) in enumerate(zip(group, parts)):
            n = len(r)
            text[b, off : off + n] = r
            segment[b, off : off + n] = k
            position[b, off : off + n] = np.arange(n)
            tgt = list(a) + [vocab.eos]
            start = off + len(q)  # position of <sep>
            targets[b, start : start + len(tgt)] = tgt
            off += n
    return TextBatch(text, targets, segment < 0, segment, position)


def encode_text(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], vocab: Vocab, text_len: int | None = None) -> TextBatch:
    """Left-padded ``question <sep> answer`` rows, one pair per row."""
    return encode_packed([[p] for p in pairs], vocab, text_len)


class VisionLanguageModel:
    def __init__(self, cfg: ModelConfig, vocab: Vocab, params: dict[str, np.ndarray] | None = None, dtype=np.float64):
        if len(vocab) != cfg.vocab_size:
            raise ConfigError(f"vocab has {len(vocab)} words, config says {cfg.vocab_size}")
        self.cfg = cfg
        self.vocab = vocab
        params = init_params(cfg) if params is None else params
        self.params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
        self.projector = Projector(self.params)
        self.decoder = ToyDecoder(self.params, cfg)

    @property
    def dtype(self):
        return self.params["dec.embed"].dtype

    def astype(self, dtype) -> "VisionLanguageModel":
        return VisionLanguageModel(self.cfg, self.vocab, self.params, dtype=dtype)

    def checksum(self) -> str:
        return checksum(self.params, list(self.params))

    def project(self, visual):
        """Per-token projection of a (N, Din) or (B, N, Din) visual sequence."""
        visual = np.asarray(visual, dtype=self.dtype)
        if visual.shape[-1] != self.cfg.visual_dim:
            raise ShapeError(f"visual dim {visual.shape[-1]} != {self.cfg.visual_dim}")
        return self.projector(visual)

    def logits(self, visual, batch: TextBatch):
        hv, _ = self.projector.forward(np.asarray(visual, dtype=self.dtype))
        return self.decoder.forward(hv, batch)[0]

    def loss_and_grads(self, visual, batch: TextBatch, need_grads: bool = True):
        visual = np.asarray(visual, dtype=self.dtype)
        hv, c_proj = self.projector.forward(visual)
        logits, c_dec = self.decoder.forward(hv, batch)
        loss, dlogits = cross_entropy(logits, batch.targets)
        if not need_grads:
            return loss, None
        dhv, grads = self.decoder.backward(dlogits, c_dec)
        _, gp = self.projector.backward(dhv, c_proj)
        grads.update(gp)
        return loss, grads

    def forward_loss(self, visual, question: Sequence[int], answer: Sequence[int]) -> float:
        """Causal cross-entropy on the answer tokens (plus <eos>) of one example."""
        visual = np.asarray(visual, dtype=self.dtype)
        if visual.ndim != 2:
            raise ShapeError("visual must be (N, visual_dim) for a single example")
        batch = encode_text([(question, answer)], self.vocab)
        return self.loss_and_grads(visual[None], batch, need_grads=False)[0]

    def generate_batch(self, visual, questions: Sequence[Sequence[int]], max_len: int, allowed_first: Sequence[Sequence[int]] | None = None) -> list[list[int]]:
        """Greedy decoding; ``allowed_first[b]`` restricts the first answer token of row b."""
        visual = np.asarray(visual, dtype=self.dtype)
        B = len(questions)
        out: list[list[int]] = [[] for _ in range(B)]
        if max_len <= 0 or B == 0:
            return out
        hv = self.projector(visual)
        done = np.zeros(B, dtype=bool)
        for step in range(max_len):
            batch = encode_text([(q, o) for q, o in zip(questions, out)], self.vocab)
            # the last real position predicts the next answer token
            logits = self.decoder.forward(hv, batch)[0][:, -1]
            if step == 0 and allowed_first is not None:
                masked = np.full_like(logits, -np.inf)
                for b, allowed in enumerate(allowed_first):
                    idx = list(allowed)
                    masked[b, idx] = logits[b, idx]
                logits = masked
            nxt = np.argmax(logits, axis=-1)
            for b in range(B):
                if done[b]:
                    continue
                if nxt[b] == self.vocab.eos:
                    done[b] = True
                else:
                    out[b].append(int(nxt[b]))
            if done.all():
                break
        return out

    def generate(self, visual, question: Sequence[int], max_len: int, allowed_first: Sequence[int] | None = None) -> list[int]:
        visual = np.asarray(visual, dtype=self.dtype)
        allowed = None if allowed_first is None else [allowed_first]
        return self.generate_batch(visual[None], [question], max_len, allowed)[0]


# ---------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    lr: float
    batch: int
    epochs: int
    seed: int
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    warmup_steps: int = 0
    freeze_decoder: bool | None = None
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.lr < 0 or self.batch < 1 or self.epochs < 0:
            raise ConfigError("need lr >= 0, batch >= 1, epochs >= 0")
        expected = self.stage == "pretrain"
        if self.freeze_decoder is not None and self.freeze_decoder != expected:
            raise ConfigError(
                f"stage {self.stage!r} {'freezes' if expected else 'trains'} the decoder; freeze_decoder={self.freeze_decoder} contradicts it"
            )

    @property
    def trainable_prefixes(self) -> tuple[str, ...]:
        return ("proj.",) if self.stage == "pretrain" else ("proj.", "dec.")


@dataclass
class VisualTextSet:
    """Training/eval examples: visual rows are shared per scene through ``scene_index``."""

    visual: np.ndarray  # (n_scenes, N, Din)
    scene_index: np.ndarray  # (n_items,)
    questions: list[tuple[int, ...]]
    answers: list[tuple[int, ...]]
    kinds: list[str] = field(default_factory=list)
    # extra visual inputs for the same scenes (e.g. pruned bundles); training draws one view per batch
    views: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.questions)

    @classmethod
    def build(cls, visual_by_scene: dict[int, np.ndarray], items: Sequence[QAItem], dtype=np.float32, views=()):
        scene_ids = sorted({it.scene_id for it in items})
        row = {sid: i for i, sid in enumerate(scene_ids)}

        def stack(by_scene):
            return np.stack([by_scene[s] for s in scene_ids]).astype(dtype) if scene_ids else np.zeros((0, 0, 0), dtype)

        visual = stack(visual_by_scene)
        return cls(
            visual=visual,
            scene_index=np.array([row[it.scene_id] for it in items], dtype=np.int64),
            questions=[tuple(it.question) for it in items],
            answers=[tuple(it.answer) for it in items],
            kinds=[it.kind for it in items],
            views=[stack(v) for v in views],
        )

    @functools.cached_property
    def groups(self) -> list[np.ndarray]:
        """Item indices per visual row, in item order."""
        order = np.argsort(self.scene_index, kind="stable")
        bounds = np.searchsorted(self.scene_index[order], np.arange(self.visual.shape[0] + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.visual.shape[0])]

    def packed(self, rows: Sequence[int], vocab: Vocab, text_len: int | None = None, view: int = 0) -> tuple[np.ndarray, TextBatch]:
        """Visual rows plus one packed text row per scene (all its items as segments).

        ``view`` 0 is ``visual``; ``view`` i > 0 is ``views[i - 1]``.
        """
        texts = [[(self.questions[i], self.answers[i]) for i in self.groups[r]] for r in rows]
        visual = self.visual if view == 0 else self.views[view - 1]
        return visual[np.asarray(rows)], encode_packed(texts, vocab, text_len)


class AdamW:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.wd = lr, betas, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, keys, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        for k in keys:
            g = grads[k]
            m = self.m.setdefault(k, np.zeros_like(g))
            v = self.v.setdefault(k, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            if self.wd and params[k].ndim > 1:
                params[k] -= lr * self.wd * params[k]
            params[k] -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(params[k].dtype)


@dataclass
class StageResult:
    projector: Projector
    decoder: ToyDecoder | None
    losses: list[float]
    checksums: dict[str, str]


def _packed_len(data: VisualTextSet) -> int:
    return max(sum(len(data.questions[i]) + 1 + len(data.answers[i]) for i in g) for g in data.groups)


def _train(model: VisionLanguageModel, data: VisualTextSet, cfg: TrainConfig, on_step: Callable | None) -> list[float]:
    keys = [k for k in model.params if k.startswith(cfg.trainable_prefixes)]
    opt = AdamW(cfg.lr, weight_decay=cfg.weight_decay)
    rng = make_rng(cfg.seed)
    view_rng = make_rng(derive_seed(cfg.seed, 1))
    # one packed sequence per scene; ``cfg.batch`` counts sequences
    T = _packed_len(data)
    n = data.visual.shape[0]
    losses: list[float] = []
    initial = None
    step = 0
    total_steps = cfg.epochs * math.ceil(n / cfg.batch)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            view = int(view_rng.integers(len(data.views) + 1)) if data.views else 0
            visual, batch = data.packed(order[start : start + cfg.batch], model.vocab, T, view)
            loss, grads = model.loss_and_grads(visual, batch)
            if not math.isfinite(loss):
                raise DivergenceError("non-finite training loss", {"epoch": epoch, "step": step, "loss": loss})
            if initial is None:
                initial = loss
            elif loss > cfg.divergence_factor * initial:
                raise DivergenceError(
                    "training loss exceeded divergence bound",
                    {"epoch": epoch, "step": step, "loss": loss, "initial": initial, "factor": cfg.divergence_factor},
                )
            if cfg.grad_clip is not None:
                norm = math.sqrt(sum(float((grads[k].astype(np.float64) ** 2).sum()) for k in keys))
                if norm > cfg.grad_clip:
                    for k in keys:
                        grads[k] = grads[k] * (cfg.grad_clip / norm)
            lr = cfg.lr
            if cfg.warmup_steps and step < cfg.warmup_steps:
                lr = cfg.lr * (step + 1) / cfg.warmup_steps
            elif total_steps > cfg.warmup_steps:
                # cosine decay to 10% after warmup
                frac = (step - cfg.warmup_steps) / max(1, total_steps - cfg.warmup_steps)
                lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
            if lr > 0:
                opt.step(model.params, grads, keys, lr=lr)
            losses.append(loss)
            if on_step is not None:
                on_step({"stage": cfg.stage, "epoch": epoch, "step": step, "loss": loss, "lr": lr})
            step += 1
    return losses


def train_stage1(model: VisionLanguageModel, data: VisualTextSet, cfg: TrainConfig, on_step: Callable | None = None) -> StageResult:
    """Projector-only alignment; decoder weights are checked unchanged afterwards."""
    if cfg.stage != "pretrain":
        raise ConfigError("train_stage1 needs stage='pretrain'")
    before = model.decoder.checksum()
    losses = _train(model, data, cfg, on_step)
    after = model.decoder.checksum()
    if before != after:
        raise RuntimeError("decoder weights changed during projector pretraining")
    return StageResult(model.projector, None, losses, {"decoder": after, "projector": model.projector.checksum()})


def train_stage2(model: VisionLanguageModel, data: VisualTextSet, cfg: TrainConfig, on_step: Callable | None = None) -> StageResult:
    """Joint projector + decoder tuning."""
    if cfg.stage != "finetune":
        raise ConfigError("train_stage2 needs stage='finetune'")
    losses = _train(model, data, cfg, on_step)
    return StageResult(
        model.projector, model.decoder, losses,
        {"decoder": model.decoder.checksum(), "projector": model.projector.checksum()},
    )


def evaluate_loss(model: VisionLanguageModel, data: VisualTextSet, batch: int = 64) -> float:
    """Mean answer-token cross-entropy over the whole set."""
    T = _packed_len(data)
    n = data.visual.shape[0]
    total, count = 0.0, 0
    for start in range(0, n, batch):
        visual, b = data.packed(np.arange(start, min(start + batch, n)), model.vocab, T)
        loss, _ = model.loss_and_grads(visual, b, need_grads=False)
        k = int((b.targets != IGNORE).sum())
        total += loss * k
        count += k
    return total / max(count, 1)


# ---------------------------------------------------------------- checkpoint format
#
# container (magic b"MGCK", version 1), body:
#   u32 header length | UTF-8 JSON header {config, vocab, dtype, params: [[name, shape], ...]}
#   then every parameter in header order as little-endian f64, row-major.

CKPT_MAGIC = b"MGCK"
CKPT_VERSION = 1


def encode_checkpoint(model: VisionLanguageModel, extra: dict | None = None) -> bytes:
    names = sorted(model.params)
    header = {
        "config": asdict(model.cfg),
        "vocab": list(model.vocab.words),
        "dtype": np.dtype(model.dtype).name,
        "params": [[k, list(model.params[k].shape)] for k in names],
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = struct.pack("<I", len(hb)) + hb + b"".join(container.f64(model.params[k]) for k in names)
    return container.pack(CKPT_MAGIC, CKPT_VERSION, body)


def decode_checkpoint(data: bytes, path=None) -> VisionLanguageModel:
    return container.guarded(lambda: _decode_checkpoint(data, path), path)


def _decode_checkpoint(data: bytes, path) -> VisionLanguageModel:
    r = container.unpack(data, CKPT_MAGIC, CKPT_VERSION, path)
    (hlen,) = r.struct("<I")
    header = json.loads(r.bytes(hlen).decode())
    cfg = ModelConfig(**header["config"])
    vocab = Vocab(header["vocab"])
    dtype = np.dtype(header["dtype"])
    if dtype not in (np.float32, np.float64):
        raise FormatError("malformed", f"unsupported dtype {dtype}", path)
    params = {}
    for name, shape in header["params"]:
        shape = tuple(int(s) for s in shape)
        params[name] = r.array("<f8", int(np.prod(shape))).reshape(shape)
    r.finish()
    expected = set(init_params_shapes(cfg))
    if set(params) != expected:
        raise FormatError("malformed", "parameter names do not match the config", path)
    for k, shape in init_params_shapes(cfg).items():
        if params[k].shape != shape:
            raise FormatError("malformed", f"parameter {k} has shape {params[k].shape}, expected {shape}", path)
    return VisionLanguageModel(cfg, vocab, params, dtype=dtype)


def init_params_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    D, V, H = cfg.model_dim, cfg.vocab_size, cfg.projector_hidden
    shapes = {"proj.w1": (cfg.visual_dim, H), "proj.b1": (H,), "proj.w2": (H, D), "proj.b2": (D,), "dec.embed": (V, D)}
    for i in range(cfg.layers):
        pre = f"dec.b{i}."
        shapes.update({
            pre + "ln1_g": (D,), pre + "ln1_b": (D,), pre + "wqkv": (D, 3 * D), pre + "bqkv": (3 * D,),
            pre + "wo": (D, D), pre + "bo": (D,), pre + "ln2_g": (D,), pre + "ln2_b": (D,),
            pre + "w1": (D, 4 * D), pre + "b1": (4 * D,), pre + "w2": (4 * D, D), pre + "b2": (D,),
        })
    shapes.update({"dec.lnf_g": (D,), "dec.lnf_b": (D,), "dec.head_w": (D, V), "dec.head_b": (V,)})
    return shapes


def write_checkpoint(model: VisionLanguageModel, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, extra))


def read_checkpoint(path) -> VisionLanguageModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError("malformed", f"cannot read: {exc}", path) from exc
    return decode_checkpoint(data, path)

"""Train-once / evaluate-many experiment protocol and report emission.

One model is trained on the full oversampled bundle (CLS + pooled patches +
every object token) and every reduction plan is evaluated against that
single checkpoint. A patch-only model trained on the raw patch grid provides
the random-patch-drop control at matching budgets.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Dataset, generate_dataset, read_dataset
from .encoder import EncoderConfig, ImageFeatureSet, get_encoder
from .errors import ConfigError, InfeasiblePlanError
from .inversion import InversionConfig, ObjectToken, build_object_tokens
from .masks import Jitter, MaskSet, add_background, bbox_masks, budget_order, multi_tiled_masks, synth_proposals
from .numerics import avg_pool_2d, derive_seed, make_rng
from .scenes import QUESTION_KINDS, QAItem, SceneSpec, answer_candidates
from .tokens import PatchStrategy, ReductionPlan, TokenBundle, assemble, reduce
from .vlm import ModelConfig, TrainConfig, VisionLanguageModel, VisualTextSet, read_checkpoint, train_stage1, train_stage2, write_checkpoint

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MASK_FAMILIES = ("synthetic", "bbox", "tiled")

# stream ids mixed into the master seed
_TEST_STREAM = 0x7E57
_PROPOSAL_STREAM = 0x9A05
_DROP_STREAM = 0xD809
_TRAIN_STREAM = 0x7A1

DEFAULT_CONFIG: dict = {
    "schema_version": SCHEMA_VERSION,
    "output_dir": "runs/desk",
    "data": {
        "n_train": 2500,
        "n_test": 500,
        "qa_per_scene": 5,
        "scene": {},
        "train_dir": None,
        "test_dir": None,
    },
    "encoder": {},
    "proposals": {"n": 24, "jitter": {}, "dedup_threshold": 0.5},
    "inversion": {},
    "tokens": {
        "local_pool": 2,
        "scale": True,
        "scale_mode": "norm_retarget",
        "position_stage": "pre_scale",
        "background_position": True,
        # optional extra stage-2 views of each training scene with only this many object tokens
        "train_object_keep": [],
    },
    "model": {"model_dim": 64, "projector_hidden": 128, "layers": 2, "heads": 4, "context": 256},
    "stage1": {"lr": 1e-3, "batch": 64, "epochs": 2, "weight_decay": 0.0, "warmup_steps": 0},
    "stage2": {"lr": 1e-3, "batch": 32, "epochs": 14, "weight_decay": 0.01, "warmup_steps": 50},
    "plans": [
        {"name": "full", "plan": {"patch": {"kind": "keep_all"}, "object_keep": None}},
        {"name": "objects_20", "plan": {"patch": {"kind": "keep_all"}, "object_keep": 20}},
        {"name": "objects_5", "plan": {"patch": {"kind": "keep_all"}, "object_keep": 5}},
        {"name": "prune23_objects_5", "plan": {"patch": {"kind": "prune_random", "n": 23, "seed": 0}, "object_keep": 5}},
        {"name": "pool2_objects_5", "plan": {"patch": {"kind": "pool", "kernel": 2}, "object_keep": 5}},
    ],
    "baselines": {"patch_only": True, "random_patch_drop": True},
    "ablations": {
        "composition": True,
        "mask_types": list(MASK_FAMILIES),
        "mask_type_object_keep": 5,
        # "retrain": one model per mask family; "swap": reuse the synthetic-mask model
        "mask_type_training": "retrain",
        "tile_grids": [2, 3, 4, 5],
    },
    "reference_tokens": None,
    "eval_batch": 256,
    "workers": 1,
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        # free-form sub-dicts hold dataclass kwargs; validated when the dataclass is built
        if isinstance(base[k], dict) and isinstance(v, dict) and base[k] and k not in ("scene", "jitter"):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value``; value parsed as JSON, falling back to a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.split("."), value


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    out = copy.deepcopy(raw)
    for text in overrides:
        keys, value = parse_override(text)
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[keys[-1]] = value
    return out


@dataclass(frozen=True)
class NamedPlan:
    name: str
    plan: ReductionPlan


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    seed: int

    @classmethod
    def from_dict(cls, d: dict, seed: int) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        cfg = cls(_merge(DEFAULT_CONFIG, d), int(seed))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, seed: int, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot load config {path}: {exc}") from exc
        return cls.from_dict(apply_overrides(d, overrides), seed)

    def to_json(self) -> str:
        return json.dumps({**self.raw, "seed": self.seed}, indent=2, sort_keys=True)

    # typed views
    @property
    def scene_spec(self) -> SceneSpec:
        d = dict(self.raw["data"]["scene"])
        for k in ("shapes", "colors"):
            if k in d:
                d[k] = tuple(d[k])
        return SceneSpec(**d)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(**self.raw["encoder"])

    @property
    def inversion(self) -> InversionConfig:
        return InversionConfig(**self.raw["inversion"])

    @property
    def jitter(self) -> Jitter:
        return Jitter(**self.raw["proposals"]["jitter"])

    @property
    def plans(self) -> list[NamedPlan]:
        out = []
        for entry in self.raw["plans"]:
            if set(entry) != {"name", "plan"}:
                raise ConfigError(f"plan entries need exactly 'name' and 'plan', got {sorted(entry)}")
            out.append(NamedPlan(entry["name"], ReductionPlan.from_dict(entry["plan"])))
        return out

    def train_config(self, stage: str) -> TrainConfig:
        key = "stage1" if stage == "pretrain" else "stage2"
        return TrainConfig(stage=stage, seed=derive_seed(self.seed, _TRAIN_STREAM), **self.raw[key])

    def model_config(self, vocab_size: int, visual_dim: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, visual_dim=visual_dim, seed=self.seed, **self.raw["model"])

    @property
    def retrained_families(self) -> list[str]:
        """Mask families other than synthetic that get their own model."""
        ab = self.raw["ablations"]
        if ab["mask_type_training"] != "retrain":
            return []
        return [f for f in MASK_FAMILIES if f != "synthetic" and f in ab["mask_types"]]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def reference_tokens(self) -> int:
        ref = self.raw["reference_tokens"]
        return self.encoder.num_patches if ref is None else int(ref)

    @property
    def full_counts(self) -> dict[str, int]:
        enc = self.encoder
        pool = self.raw["tokens"]["local_pool"]
        g = enc.grid_side // pool
        return {"global": 1, "local": g * g, "object": self.raw["proposals"]["n"] + 1}

    def validate(self) -> None:
        enc, spec = self.encoder, self.scene_spec
        self.inversion, self.jitter  # dataclass validation
        if enc.image_side != spec.image_side:
            raise ConfigError(f"encoder image_side {enc.image_side} != scene image_side {spec.image_side}")
        pool = self.raw["tokens"]["local_pool"]
        if pool < 1 or enc.grid_side % pool:
            raise ConfigError(f"local_pool {pool} must divide the patch grid side {enc.grid_side}")
        n = self.raw["proposals"]["n"]
        if n < spec.max_objects:
            raise ConfigError(f"proposals.n={n} is below max_objects={spec.max_objects}")
        for stage in ("pretrain", "finetune"):
            self.train_config(stage)
        g = enc.grid_side // pool
        for p in self.plans:
            try:
                p.plan.predict_counts(self.full_counts, (g, g))
            except InfeasiblePlanError as exc:
                raise ConfigError(f"plan {p.name!r} is infeasible for the trained layout: {exc}") from exc
        for fam in self.raw["ablations"]["mask_types"]:
            if fam not in MASK_FAMILIES:
                raise ConfigError(f"unknown mask family {fam!r}")
        if self.raw["ablations"]["mask_type_training"] not in ("retrain", "swap"):
            raise ConfigError("ablations.mask_type_training must be 'retrain' or 'swap'")
        for k in self.raw["tokens"]["train_object_keep"]:
            if not isinstance(k, int) or not 0 <= k <= self.full_counts["object"]:
                raise ConfigError(f"train_object_keep entry {k!r} outside [0, {self.full_counts['object']}]")
        d = self.raw["data"]
        if d["n_train"] < 1 or d["n_test"] < 1:
            raise ConfigError("need at least one train and one test scene")


# ---------------------------------------------------------------- scene preparation


@dataclass
class PreparedScene:
    scene_id: int
    features: ImageFeatureSet
    local_grid: np.ndarray
    masksets: dict[str, MaskSet]
    tokens: dict[str, list[ObjectToken]]
    priority: dict[str, list[int]]


def _priority(mset: MaskSet, threshold: float) -> list[int]:
    """Member indices in test-time keep order: dedup survivors, suppressed, then background.

    A budget of k object tokens is spent on proposals; the background (no detector
    confidence) only enters once every proposal is kept.
    """
    order = budget_order(mset, threshold)
    if mset.background is not None:
        order = order + [len(mset.proposals)]
    return order


def prepare_scenes(cfg: ExperimentConfig, ds: Dataset, families: Sequence[str], on_progress: Callable | None = None) -> list[PreparedScene]:
    enc = get_encoder(cfg.encoder)
    inv = cfg.inversion
    tk = cfg.raw["tokens"]
    thr = cfg.raw["proposals"]["dedup_threshold"]
    out = []
    batch = 64
    for start in range(0, len(ds.scenes), batch):
        chunk = ds.scenes[start : start + batch]
        feats = enc.encode_batch(np.stack([s.image for s in chunk]))
        for scene, f in zip(chunk, feats):
            rng = make_rng(derive_seed(derive_seed(cfg.seed, _PROPOSAL_STREAM), scene.scene_id))
            synthetic = add_background(synth_proposals(scene, cfg.raw["proposals"]["n"], cfg.jitter, rng))
            msets = {}
            for fam in families:
                if fam == "synthetic":
                    msets[fam] = synthetic
                elif fam == "bbox":
                    msets[fam] = bbox_masks(synthetic)
                else:
                    msets[fam] = multi_tiled_masks(scene.image_side, cfg.raw["ablations"]["tile_grids"])
            toks = {
                fam: build_object_tokens(
                    m, f, inv,
                    position_stage=tk["position_stage"],
                    background_position=tk["background_position"],
                    workers=cfg.raw["workers"],
                )
                for fam, m in msets.items()
            }
            out.append(
                PreparedScene(
                    scene_id=scene.scene_id,
                    features=f,
                    local_grid=avg_pool_2d(f.patches, tk["local_pool"]),
                    masksets=msets,
                    tokens=toks,
                    priority={fam: _priority(m, thr) for fam, m in msets.items()},
                )
            )
        if on_progress is not None:
            on_progress(len(out), len(ds.scenes))
    return out


def mask_bundle(cfg: ExperimentConfig, prep: PreparedScene, family: str = "synthetic", object_keep: int | None = None) -> TokenBundle:
    """Bundle with the ``object_keep`` highest-priority object tokens (all if None)."""
    order = prep.priority[family]
    if object_keep is not None:
        if object_keep > len(order):
            raise InfeasiblePlanError("not enough object tokens", {"object": len(order)}, {"object": object_keep})
        order = order[:object_keep]
    objs = [prep.tokens[family][i] for i in order]
    tk = cfg.raw["tokens"]
    return assemble(prep.features.cls, prep.local_grid, objs, do_scale=tk["scale"], scale_mode=tk["scale_mode"])


def patch_bundle(prep: PreparedScene) -> TokenBundle:
    return assemble(None, prep.features.patches, [], do_scale=False)


def plan_visual(cfg: ExperimentConfig, prep: PreparedScene, plan: ReductionPlan) -> tuple[np.ndarray, TokenBundle]:
    """Mask-model input under a plan: IoU dedup + confidence keep order, then ``reduce``."""
    b = reduce(mask_bundle(cfg, prep, "synthetic", plan.object_keep), plan)
    return b.matrix(), b


# ---------------------------------------------------------------- evaluation


def majority_accuracy(train_items: Sequence[QAItem], test_items: Sequence[QAItem]) -> dict[str, float]:
    """Accuracy of always answering the most frequent training answer of each kind."""
    out = {}
    for kind in QUESTION_KINDS:
        answers = [it.answer for it in train_items if it.kind == kind]
        test = [it for it in test_items if it.kind == kind]
        if not answers or not test:
            continue
        values, counts = np.unique(np.array([a[0] for a in answers]), return_counts=True)
        best = int(values[np.argmax(counts)])
        out[kind] = float(np.mean([it.answer == (best,) for it in test]))
    return out


def evaluate(model: VisionLanguageModel, visual_by_scene: dict[int, np.ndarray], items: Sequence[QAItem], batch: int = 256) -> dict:
    """Exact-match accuracy per question kind (greedy, first token restricted to the kind's answers)."""
    data = VisualTextSet.build(visual_by_scene, items, dtype=model.dtype)
    correct = np.zeros(len(items), dtype=bool)
    for start in range(0, len(items), batch):
        idx = np.arange(start, min(start + batch, len(items)))
        visual = data.visual[data.scene_index[idx]]
        questions = [data.questions[i] for i in idx]
        allowed = [answer_candidates(data.kinds[i], model.vocab) for i in idx]
        max_len = max(len(data.answers[i]) for i in idx) + 1
        preds = model.generate_batch(visual, questions, max_len, allowed)
        for j, i in enumerate(idx):
            correct[i] = tuple(preds[j]) == data.answers[i]
    per_kind = {}
    for kind in QUESTION_KINDS:
        sel = [i for i, it in enumerate(items) if it.kind == kind]
        if sel:
            per_kind[kind] = float(correct[sel].mean())
    macro = float(np.mean(list(per_kind.values()))) if per_kind else float("nan")
    return {"per_kind": per_kind, "macro": macro, "n": len(items)}


# ---------------------------------------------------------------- reporting


def reduction_ratio(tokens: int, reference: int) -> float:
    return 1.0 - tokens / reference


def format_ratio(r: float) -> str:
    return f"{round(100 * r):d}%"


CSV_COLUMNS = (
    "section", "name", "model", "tokens", "n_global", "n_local", "n_object", "reduction_ratio",
    "acc_existence", "acc_count", "acc_color", "acc_position", "acc_macro", "n_eval", "checkpoint_sha256",
)


def _row(section, name, model_name, counts, reference, result, checksum, seconds) -> dict:
    tokens = sum(counts.values())
    row = {
        "section": section,
        "name": name,
        "model": model_name,
        "tokens": tokens,
        "n_global": counts.get("global", 0),
        "n_local": counts.get("local", 0),
        "n_object": counts.get("object", 0),
        "reduction_ratio": reduction_ratio(tokens, reference),
        "acc_macro": result["macro"],
        "n_eval": result["n"],
        "checkpoint_sha256": checksum,
        "seconds": seconds,
    }
    for kind in QUESTION_KINDS:
        row[f"acc_{kind}"] = result["per_kind"].get(kind, float("nan"))
    return row


def _fmt(col, v):
    if isinstance(v, float):
        return f"{v:.2f}" if col == "reduction_ratio" else f"{v:.4f}"
    return str(v)


def render_csv(rows: Sequence[dict]) -> str:
    """Stable column order, fixed float formatting, no timings: same run -> same bytes."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(c, r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def render_table(rows: Sequence[dict]) -> str:
    cols = ("section", "name", "model", "tokens", "RR", "exist", "count", "color", "pos", "macro", "sec")
    lines = []
    data = []
    for r in rows:
        data.append((
            r["section"], r["name"], r["model"], str(r["tokens"]), format_ratio(r["reduction_ratio"]),
            *(f"{100 * r[f'acc_{k}']:.1f}" for k in QUESTION_KINDS), f"{100 * r['acc_macro']:.1f}",
            f"{r.get('seconds', 0.0):.1f}",
        ))
    widths = [max(len(c), *(len(d[i]) for d in data)) if data else len(c) for i, c in enumerate(cols)]
    lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    lines.append("  ".join("-" * w for w in widths))
    for d in data:
        lines.append("  ".join(v.ljust(w) for v, w in zip(d, widths)))
    return "\n".join(lines) + "\n"


def write_report(results: dict, out_dir, stem: str = "results") -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = results.get("rows", [])
    paths = {"csv": out / f"{stem}.csv", "json": out / f"{stem}.json", "table": out / f"{stem}.txt"}
    paths["csv"].write_text(render_csv(rows))
    paths["json"].write_text(json.dumps(results, indent=2, sort_keys=True, default=_json_default))
    paths["table"].write_text(render_table(rows))
    return paths


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o)}")


def report(results_path) -> str:
    """Re-render the table (and CSV) from a stored ``results.json``."""
    path = Path(results_path)
    try:
        results = json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read results {path}: {exc}") from exc
    write_report(results, path.parent, path.stem)
    return render_table(results.get("rows", []))


# ---------------------------------------------------------------- orchestration


class RunLog:
    """Line-delimited JSON log records, mirrored to the ``logging`` module."""

    def __init__(self, path: Path | None):
        self.path = path
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a", encoding="utf-8")
        self.t0 = time.perf_counter()

    def __call__(self, event: str, **fields):
        rec = {"t": round(time.perf_counter() - self.t0, 3), "event": event, **fields}
        log.info("%s %s", event, json.dumps(fields, default=_json_default, sort_keys=True))
        if self._fh is not None:
            self._fh.write(json.dumps(rec, default=_json_default, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def generate_split(cfg: ExperimentConfig, split: str) -> Dataset:
    """In-memory split exactly as ``gen-data`` writes it; test ids start at 1_000_000."""
    d = cfg.raw["data"]
    if split == "train":
        return generate_dataset(cfg.scene_spec, d["n_train"], d["qa_per_scene"], cfg.seed)
    if split == "test":
        return generate_dataset(cfg.scene_spec, d["n_test"], d["qa_per_scene"], derive_seed(cfg.seed, _TEST_STREAM), first_id=1_000_000)
    raise ConfigError(f"unknown split {split!r}")


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.raw["data"]
    out = []
    for split in ("train", "test"):
        path = d[f"{split}_dir"]
        out.append(read_dataset(path) if path else generate_split(cfg, split))
    return out[0], out[1]


def _train_model(cfg, name, train: Dataset, visual: dict[int, np.ndarray], runlog, ckpt_dir: Path, views=()) -> VisionLanguageModel:
    dim = next(iter(visual.values())).shape[-1]
    model = VisionLanguageModel(cfg.model_config(len(train.vocab), dim), train.vocab, dtype=np.float32)
    enc_sum = get_encoder(cfg.encoder).checksum()

    def on_step(rec):
        if rec["step"] % 50 == 0:
            runlog("train_step", model=name, **rec)

    t = time.perf_counter()
    s1 = train_stage1(model, VisualTextSet.build(visual, train.captions), cfg.train_config("pretrain"), on_step)
    runlog("stage_done", model=name, stage="pretrain", first_loss=s1.losses[0] if s1.losses else None,
           last_loss=s1.losses[-1] if s1.losses else None, seconds=time.perf_counter() - t, **s1.checksums)
    t = time.perf_counter()
    s2 = train_stage2(model, VisualTextSet.build(visual, train.qa, views=views), cfg.train_config("finetune"), on_step)
    runlog("stage_done", model=name, stage="finetune", first_loss=s2.losses[0] if s2.losses else None,
           last_loss=s2.losses[-1] if s2.losses else None, seconds=time.perf_counter() - t, **s2.checksums)
    if get_encoder(cfg.encoder).checksum() != enc_sum:
        raise RuntimeError("encoder weights changed during training")
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_checkpoint(model, ckpt_dir / f"{name}.mgck", extra={"seed": cfg.seed})
    return model


def _mask_visuals(cfg, prepared, family, keep=None) -> dict[int, np.ndarray]:
    return {p.scene_id: mask_bundle(cfg, p, family, keep).matrix().astype(np.float32) for p in prepared}


def train_models(cfg: ExperimentConfig, runlog: RunLog | None = None, train: Dataset | None = None) -> dict[str, VisionLanguageModel]:
    runlog = runlog or RunLog(None)
    if train is None:
        train = load_data(cfg)[0]
    t = time.perf_counter()
    fams = ["synthetic"] + cfg.retrained_families
    prepared = prepare_scenes(cfg, train, fams, lambda i, n: runlog("prepare", split="train", done=i, total=n))
    runlog("prepared", split="train", scenes=len(prepared), seconds=time.perf_counter() - t)
    keeps = cfg.raw["tokens"]["train_object_keep"]

    mask_inputs = {fam: (_mask_visuals(cfg, prepared, fam), [_mask_visuals(cfg, prepared, fam, k) for k in keeps]) for fam in fams}
    patch_visual = {p.scene_id: patch_bundle(p).matrix().astype(np.float32) for p in prepared}
    del prepared
    ckpt = cfg.output_dir / "checkpoints"
    models = {}
    for fam in fams:
        name = mask_model_name(fam)
        full, views = mask_inputs.pop(fam)
        models[name] = _train_model(cfg, name, train, full, runlog, ckpt, views)
    if cfg.raw["baselines"]["patch_only"] or cfg.raw["baselines"]["random_patch_drop"]:
        models["patch"] = _train_model(cfg, "patch", train, patch_visual, runlog, ckpt)
    return models


def mask_model_name(family: str) -> str:
    return "mask" if family == "synthetic" else f"mask_{family}"


def load_models(cfg: ExperimentConfig) -> dict[str, VisionLanguageModel]:
    ckpt = cfg.output_dir / "checkpoints"
    models = {"mask": read_checkpoint(ckpt / "mask.mgck")}
    for name in ["patch"] + [mask_model_name(f) for f in cfg.retrained_families]:
        if (ckpt / f"{name}.mgck").exists():
            models[name] = read_checkpoint(ckpt / f"{name}.mgck")
    return models


def _eval_rows(cfg, section, entries, model_name, model, test, runlog):
    """``entries``: (name, visual_by_scene, counts)."""
    rows = []
    checksum = model.checksum()
    for name, visual, counts in entries:
        t = time.perf_counter()
        res = evaluate(model, visual, test.qa, cfg.raw["eval_batch"])
        row = _row(section, name, model_name, counts, cfg.reference_tokens, res, checksum, time.perf_counter() - t)
        runlog("eval", **{k: row[k] for k in ("section", "name", "model", "tokens", "acc_macro", "acc_existence", "checkpoint_sha256", "seconds")})
        rows.append(row)
    return rows


def _uniform_counts(bundles: Sequence[TokenBundle], what: str) -> dict[str, int]:
    counts = {tuple(sorted(b.counts.items())) for b in bundles}
    if len(counts) != 1:
        raise RuntimeError(f"{what}: token counts differ across scenes: {counts}")
    return dict(counts.pop())


def sweep(cfg, models, test: Dataset, prepared: Sequence[PreparedScene], runlog) -> list[dict]:
    """Every configured plan on the mask model, plus patch-model baselines at matching budgets."""
    entries = []
    for np_ in cfg.plans:
        pairs = [plan_visual(cfg, p, np_.plan) for p in prepared]
        counts = _uniform_counts([b for _, b in pairs], np_.name)
        entries.append((np_.name, {p.scene_id: v for p, (v, _) in zip(prepared, pairs)}, counts))
    rows = _eval_rows(cfg, "plans", entries, "mask", models["mask"], test, runlog)
    if "patch" not in models:
        return rows
    base = []
    full = {p.scene_id: patch_bundle(p) for p in prepared}
    n_patch = cfg.encoder.num_patches
    if cfg.raw["baselines"]["patch_only"]:
        base.append(("patch_only_full", {k: b.matrix() for k, b in full.items()}, {"global": 0, "local": n_patch, "object": 0}))
    if cfg.raw["baselines"]["random_patch_drop"]:
        budgets = sorted({r["tokens"] for r in rows if r["tokens"] < n_patch}, reverse=True)
        drop_seed = derive_seed(cfg.seed, _DROP_STREAM)
        for k in budgets:
            visual = {
                sid: reduce(b, ReductionPlan(PatchStrategy.prune_random(k, derive_seed(drop_seed, sid)))).matrix()
                for sid, b in full.items()
            }
            base.append((f"random_patch_drop_{k}", visual, {"global": 0, "local": k, "object": 0}))
    return rows + _eval_rows(cfg, "baselines", base, "patch", models["patch"], test, runlog)


def ablate(cfg, models, test: Dataset, prepared: Sequence[PreparedScene], runlog) -> list[dict]:
    """Token-composition (test-time type dropping) on the mask model; mask families at equal object budget.

    Each family is evaluated on its own model when one was trained, otherwise on the synthetic-mask model.
    """
    rows = []
    keep = cfg.raw["ablations"]["mask_type_object_keep"]
    if cfg.raw["ablations"]["composition"]:
        variants = [
            ("patch_only", ReductionPlan(object_keep=0, use_global=False)),
            ("patch_cls", ReductionPlan(object_keep=0, use_global=True)),
            ("patch_cls_mask", ReductionPlan(object_keep=keep, use_global=True)),
        ]
        entries = []
        for name, plan in variants:
            pairs = [plan_visual(cfg, p, plan) for p in prepared]
            entries.append((name, {p.scene_id: v for p, (v, _) in zip(prepared, pairs)}, _uniform_counts([b for _, b in pairs], name)))
        rows += _eval_rows(cfg, "composition", entries, "mask", models["mask"], test, runlog)
    for fam in cfg.raw["ablations"]["mask_types"]:
        bundles = [mask_bundle(cfg, p, fam, keep) for p in prepared]
        entry = (fam, {p.scene_id: b.matrix() for p, b in zip(prepared, bundles)}, _uniform_counts(bundles, fam))
        name = mask_model_name(fam)
        if name not in models:
            if fam in cfg.retrained_families:
                raise RuntimeError(f"no checkpoint for model {name!r}; run the train stage")
            name = "mask"
        rows += _eval_rows(cfg, "mask_types", [entry], name, models[name], test, runlog)
    return rows


def run_experiment(cfg: ExperimentConfig, stages: Sequence[str] = ("train", "sweep", "ablate"), stem: str = "results") -> dict:
    """Run the requested stages; partial results are written even if a stage fails.

    Without ``"train"`` the checkpoints of an earlier run in ``output_dir`` are used.
    """
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    runlog = RunLog(out / "log.jsonl")
    runlog("start", stages=list(stages), seed=cfg.seed)
    results = {"config": json.loads(cfg.to_json()), "rows": [], "status": "running", "reference_tokens": cfg.reference_tokens}
    t0 = time.perf_counter()
    try:
        train, test = load_data(cfg)
        results["majority"] = majority_accuracy(train.qa, test.qa)
        runlog("data", n_train=len(train.scenes), n_test=len(test.scenes), n_train_qa=len(train.qa), n_test_qa=len(test.qa))
        if "train" in stages:
            models = train_models(cfg, runlog, train)
        else:
            models = load_models(cfg)
        results["checkpoints"] = {k: m.checksum() for k, m in models.items()}
        if "sweep" in stages or "ablate" in stages:
            fams = ["synthetic"]
            if "ablate" in stages:
                fams = sorted(set(fams) | set(cfg.raw["ablations"]["mask_types"]), key=MASK_FAMILIES.index)
            t = time.perf_counter()
            prepared = prepare_scenes(cfg, test, fams, lambda i, n: runlog("prepare", split="test", done=i, total=n))
            runlog("prepared", split="test", scenes=len(prepared), seconds=time.perf_counter() - t)
            if "sweep" in stages:
                results["rows"] += sweep(cfg, models, test, prepared, runlog)
                write_report(results, out, stem)
            if "ablate" in stages:
                results["rows"] += ablate(cfg, models, test, prepared, runlog)
        results["status"] = "ok"
    except Exception as exc:
        results["status"] = "failed"
        results["error"] = f"{type(exc).__name__}: {exc}"
        runlog("failed", error=results["error"])
        raise
    finally:
        results["seconds"] = time.perf_counter() - t0
        write_report(results, out, stem)
        runlog("done", status=results["status"], seconds=results["seconds"])
        runlog.close()
    return results


def evaluate_plan(cfg: ExperimentConfig, plan: ReductionPlan, name: str = "plan") -> dict:
    """Evaluate one plan against the stored mask-model checkpoint."""
    models = load_models(cfg)
    test = load_data(cfg)[1] if cfg.raw["data"]["test_dir"] else generate_split(cfg, "test")
    prepared = prepare_scenes(cfg, test, ["synthetic"])
    pairs = [plan_visual(cfg, p, plan) for p in prepared]
    counts = _uniform_counts([b for _, b in pairs], name)
    return _eval_rows(
        cfg, "plans", [(name, {p.scene_id: v for p, (v, _) in zip(prepared, pairs)}, counts)],
        "mask", models["mask"], test, RunLog(None),
    )[0]

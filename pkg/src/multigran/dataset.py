"""Synthetic scene/QA datasets: in-memory generation and the on-disk layout.

Directory layout::

    manifest.json        canonical compact JSON (sorted keys); see below
    scenes/000000.ppm    binary P6 pixel maps
    masks/000000.mgmk    ground-truth object masks (RLE mask file, one per scene)
    objects.jsonl        {"scene_id", "objects": [{"shape", "color", "bbox"}]}
    captions.jsonl       {"scene_id", "kind", "question", "answer", "text"}
    qa.jsonl             same record shape as captions

The manifest holds generation parameters, the vocabulary, the sha256 of every
other file and a ``digest`` field: the sha256 of the manifest's own canonical
serialisation with ``digest`` removed. Loading rejects any manifest whose
bytes are not exactly that canonical form, so every modified byte anywhere
in the directory is detected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .masks import MaskProposal, MaskSet, read_masks, write_masks
from .numerics import derive_seed, make_rng
from .scenes import QAItem, QuestionMaker, Scene, SceneObject, SceneSpec, Vocab, caption_item, check_answer, default_vocab, render_scene

SCHEMA_VERSION = 1
DATASET_FORMAT = "multigran-dataset"


@dataclass(frozen=True, eq=False)
class Dataset:
    spec: SceneSpec
    seed: int
    qa_per_scene: int
    vocab: Vocab
    scenes: list[Scene]
    captions: list[QAItem]
    qa: list[QAItem]

    def same_as(self, other: "Dataset") -> bool:
        def scene_eq(a: Scene, b: Scene):
            return (
                a.scene_id == b.scene_id
                and np.array_equal(a.pixels, b.pixels)
                and len(a.objects) == len(b.objects)
                and all(
                    x.shape == y.shape and x.color == y.color and x.bbox == y.bbox and np.array_equal(x.mask, y.mask)
                    for x, y in zip(a.objects, b.objects)
                )
            )

        return (
            self.spec == other.spec
            and self.seed == other.seed
            and self.qa_per_scene == other.qa_per_scene
            and self.vocab == other.vocab
            and len(self.scenes) == len(other.scenes)
            and all(scene_eq(a, b) for a, b in zip(self.scenes, other.scenes))
            and self.captions == other.captions
            and self.qa == other.qa
        )


def generate_dataset(spec: SceneSpec, n_scenes: int, qa_per_scene: int, seed: int, first_id: int = 0) -> Dataset:
    """Scenes get independent streams ``derive_seed(seed, scene_id)``; QA answers are self-checked."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    vocab = default_vocab()
    maker = QuestionMaker(spec, vocab)
    scenes, captions, qa = [], [], []
    for sid in range(first_id, first_id + n_scenes):
        rng = make_rng(derive_seed(seed, sid))
        scene = render_scene(spec, rng, sid)
        scenes.append(scene)
        captions.append(caption_item(scene, vocab))
        for item in maker.items(scene, rng, qa_per_scene):
            if not check_answer(item, scene, vocab):
                raise RuntimeError(f"generator produced an inconsistent answer for scene {sid}: {item}")
            qa.append(item)
    return Dataset(spec, seed, qa_per_scene, vocab, scenes, captions, qa)


# ---------------------------------------------------------------- PPM


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def decode_ppm(data: bytes, path=None) -> np.ndarray:
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6":
        raise FormatError("magic", "not a binary P6 pixel map", path)
    try:
        w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise FormatError("malformed", f"bad pixel map header: {exc}", path) from exc
    if maxval != 255 or w < 1 or h < 1:
        raise FormatError("malformed", f"unsupported pixel map {w}x{h} max {maxval}", path)
    header = f"P6\n{w} {h}\n255\n".encode()
    if not data.startswith(header):
        raise FormatError("malformed", "non-canonical pixel map header", path)
    body = data[len(header):]
    if len(body) != w * h * 3:
        raise FormatError("truncated", f"pixel data has {len(body)} bytes, expected {w * h * 3}", path)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------- directory I/O


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _item_record(item: QAItem, vocab: Vocab) -> dict:
    return {
        "scene_id": item.scene_id,
        "kind": item.kind,
        "question": list(item.question),
        "answer": list(item.answer),
        "text": " ".join(vocab.decode(item.question)) + " => " + " ".join(vocab.decode(item.answer)),
    }


def _jsonl(records) -> bytes:
    return b"".join(_canonical(r) + b"\n" for r in records)


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    files: dict[str, bytes] = {}
    for scene in ds.scenes:
        files[f"scenes/{scene.scene_id:06d}.ppm"] = encode_ppm(scene.pixels)
        mset = MaskSet(
            proposals=tuple(
                MaskProposal(mask=o.mask, bbox=o.bbox, confidence=1.0, source_id=i) for i, o in enumerate(scene.objects)
            ),
            image_side=scene.image_side,
        )
        path = out / f"masks/{scene.scene_id:06d}.mgmk"
        write_masks(mset, path)
        files[f"masks/{scene.scene_id:06d}.mgmk"] = path.read_bytes()
    files["objects.jsonl"] = _jsonl(
        {"scene_id": s.scene_id, "objects": [{"shape": o.shape, "color": o.color, "bbox": list(o.bbox)} for o in s.objects]}
        for s in ds.scenes
    )
    files["captions.jsonl"] = _jsonl(_item_record(it, ds.vocab) for it in ds.captions)
    files["qa.jsonl"] = _jsonl(_item_record(it, ds.vocab) for it in ds.qa)
    for rel, data in files.items():
        if not rel.startswith("masks/"):
            (out / rel).write_bytes(data)
    spec = asdict(ds.spec)
    spec["shapes"] = list(spec["shapes"])
    spec["colors"] = list(spec["colors"])
    manifest = {
        "format": DATASET_FORMAT,
        "schema_version": SCHEMA_VERSION,
        "seed": ds.seed,
        "n_scenes": len(ds.scenes),
        "scene_ids": [s.scene_id for s in ds.scenes],
        "qa_per_scene": ds.qa_per_scene,
        "spec": spec,
        "vocab": list(ds.vocab.words),
        "files": {rel: _sha(data) for rel, data in sorted(files.items())},
    }
    manifest["digest"] = _sha(_canonical(manifest))
    (out / "manifest.json").write_bytes(_canonical(manifest))
    return out


def _read(root: Path, rel: str) -> bytes:
    try:
        return (root / rel).read_bytes()
    except OSError as exc:
        raise FormatError("malformed", f"cannot read {rel}: {exc}", root / rel) from exc


def _read_manifest(root: Path) -> dict:
    path = root / "manifest.json"
    raw = _read(root, "manifest.json")
    try:
        manifest = json.loads(raw.decode("ascii"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError("malformed", f"manifest is not valid JSON: {exc}", path) from exc
    if not isinstance(manifest, dict) or _canonical(manifest) != raw:
        raise FormatError("malformed", "manifest is not in canonical form", path)
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError("magic", f"not a {DATASET_FORMAT} manifest", path)
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise FormatError("version", f"unsupported schema_version {manifest.get('schema_version')!r}", path)
    body = {k: v for k, v in manifest.items() if k != "digest"}
    if manifest.get("digest") != _sha(_canonical(body)):
        raise FormatError("checksum", "manifest digest mismatch", path)
    return manifest


def _records(data: bytes, rel: str, root: Path) -> list[dict]:
    try:
        return [json.loads(line) for line in data.decode("ascii").splitlines()]
    except (UnicodeDecodeError, ValueError) as exc:
        raise FormatError("malformed", f"{rel}: {exc}", root / rel) from exc


def read_dataset(data_dir) -> Dataset:
    """Load and verify a dataset directory; any mismatch raises ``FormatError``."""
    root = Path(data_dir)
    m = _read_manifest(root)
    try:
        return _load(root, m)
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError("malformed", f"{type(exc).__name__}: {exc}", root) from exc


def _load(root: Path, m: dict) -> Dataset:
    blobs = {}
    for rel, digest in m["files"].items():
        data = _read(root, rel)
        if _sha(data) != digest:
            raise FormatError("checksum", f"sha256 mismatch for {rel}", root / rel)
        blobs[rel] = data
    spec_d = dict(m["spec"])
    spec_d["shapes"] = tuple(spec_d["shapes"])
    spec_d["colors"] = tuple(spec_d["colors"])
    spec = SceneSpec(**spec_d)
    vocab = Vocab(m["vocab"])
    objects = {r["scene_id"]: r["objects"] for r in _records(blobs["objects.jsonl"], "objects.jsonl", root)}
    scenes = []
    for sid in m["scene_ids"]:
        pixels = decode_ppm(blobs[f"scenes/{sid:06d}.ppm"], root / f"scenes/{sid:06d}.ppm")
        mset = read_masks(root / f"masks/{sid:06d}.mgmk")
        objs = objects[sid]
        if len(objs) != len(mset.proposals):
            raise FormatError("malformed", f"scene {sid}: object and mask counts differ", root)
        scenes.append(
            Scene(
                scene_id=sid,
                pixels=pixels,
                objects=tuple(
                    SceneObject(shape=o["shape"], color=o["color"], bbox=tuple(o["bbox"]), mask=p.mask)
                    for o, p in zip(objs, mset.proposals)
                ),
            )
        )

    def items(rel):
        return [
            QAItem(r["kind"], tuple(r["question"]), tuple(r["answer"]), r["scene_id"])
            for r in _records(blobs[rel], rel, root)
        ]

    if len(scenes) != m["n_scenes"]:
        raise FormatError("malformed", "scene count does not match the manifest", root)
    return Dataset(spec, m["seed"], m["qa_per_scene"], vocab, scenes, items("captions.jsonl"), items("qa.jsonl"))


def gen_dataset(spec: SceneSpec, n_scenes: int, qa_per_scene: int, seed: int, out_dir) -> Path:
    return write_dataset(generate_dataset(spec, n_scenes, qa_per_scene, seed), out_dir)

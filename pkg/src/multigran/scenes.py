"""Synthetic shape scenes with exact ground-truth masks, captions and QA items."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (230, 30, 30),
    "green": (30, 200, 60),
    "blue": (40, 60, 240),
    "yellow": (240, 225, 30),
}
BACKGROUND_RGB = (128, 128, 128)
SHAPES = ("square", "circle", "triangle")
QUESTION_KINDS = ("existence", "count", "color", "position")
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six")

SPECIALS = ("<pad>", "<sep>", "<eos>", "<describe>")
FUNCTION_WORDS = ("is", "there", "a", "what", "color", "the", "how", "many", "objects", "where", "?", ",", ".")
ANSWER_WORDS = ("yes", "no", "left", "right")


class Vocab:
    """Fixed word list with id lookup; ids are list positions."""

    def __init__(self, words):
        self.words = tuple(words)
        if len(set(self.words)) != len(self.words):
            raise ConfigError("duplicate words in vocabulary")
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self):
        return len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.words == other.words

    def __hash__(self):
        return hash(self.words)

    def id(self, word: str) -> int:
        return self._ids[word]

    def ids(self, words) -> tuple[int, ...]:
        return tuple(self._ids[w] for w in words)

    def decode(self, ids) -> list[str]:
        return [self.words[i] for i in ids]

    @property
    def pad(self) -> int:
        return self._ids["<pad>"]

    @property
    def sep(self) -> int:
        return self._ids["<sep>"]

    @property
    def eos(self) -> int:
        return self._ids["<eos>"]


def default_vocab() -> Vocab:
    return Vocab(SPECIALS + FUNCTION_WORDS + tuple(COLORS) + SHAPES + ANSWER_WORDS + NUMBER_WORDS)


def answer_candidates(kind: str, vocab: Vocab) -> tuple[int, ...]:
    """Token ids a well-formed answer of this kind may start with."""
    if kind == "existence":
        return vocab.ids(("yes", "no"))
    if kind == "count":
        return vocab.ids(NUMBER_WORDS)
    if kind == "color":
        return vocab.ids(tuple(COLORS))
    if kind == "position":
        return vocab.ids(("left", "right"))
    raise ConfigError(f"unknown question kind {kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    image_side: int = 48
    min_objects: int = 1
    max_objects: int = 4
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    min_size: int = 7
    max_size: int = 11
    margin: int = 2
    max_tries: int = 500

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.max_objects > len(self.shapes) * len(self.colors):
            raise ConfigError("more objects than distinct (color, shape) pairs")
        if self.max_size + 2 * self.margin > self.image_side:
            raise ConfigError("objects do not fit in the image")
        for c in self.colors:
            if c not in COLORS:
                raise ConfigError(f"unknown color {c!r}")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigError(f"unknown shape {s!r}")


@dataclass(frozen=True, eq=False)
class SceneObject:
    shape: str
    color: str
    bbox: tuple[int, int, int, int]  # inclusive x0, y0, x1, y1
    mask: np.ndarray

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1 + 1) / 2.0, (y0 + y1 + 1) / 2.0


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: int
    pixels: np.ndarray  # (S, S, 3) uint8
    objects: tuple[SceneObject, ...] = field(default_factory=tuple)

    @property
    def image_side(self) -> int:
        return self.pixels.shape[0]

    @property
    def image(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    @property
    def object_masks(self) -> list[np.ndarray]:
        return [o.mask for o in self.objects]

    def has(self, color: str, shape: str) -> bool:
        return any(o.color == color and o.shape == shape for o in self.objects)


def shape_mask(shape: str, side: int, x0: int, y0: int, size: int) -> np.ndarray:
    m = np.zeros((side, side), dtype=bool)
    ys, xs = np.mgrid[0:size, 0:size]
    if shape == "square":
        local = np.ones((size, size), dtype=bool)
    elif shape == "circle":
        c = (size - 1) / 2.0
        local = (xs - c) ** 2 + (ys - c) ** 2 <= (size / 2.0) ** 2
    elif shape == "triangle":
        # apex at the top center, base along the bottom row
        c = (size - 1) / 2.0
        half = (ys + 1) / size * (size / 2.0)
        local = np.abs(xs - c) <= half
    else:
        raise ConfigError(f"unknown shape {shape!r}")
    m[y0 : y0 + size, x0 : x0 + size] = local
    return m


def render_scene(spec: SceneSpec, rng: np.random.Generator, scene_id: int = 0) -> Scene:
    """Place non-overlapping objects (bbox gap >= margin) with distinct (color, shape)."""
    side = spec.image_side
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    pairs = [(c, s) for c in spec.colors for s in spec.shapes]
    chosen = rng.choice(len(pairs), size=k, replace=False)
    boxes: list[tuple[int, int, int, int]] = []
    objects = []
    pixels = np.empty((side, side, 3), dtype=np.uint8)
    pixels[:] = BACKGROUND_RGB
    for idx in chosen:
        color, shape = pairs[int(idx)]
        for _ in range(spec.max_tries):
            size = int(rng.integers(spec.min_size, spec.max_size + 1))
            x0 = int(rng.integers(spec.margin, side - spec.margin - size + 1))
            y0 = int(rng.integers(spec.margin, side - spec.margin - size + 1))
            box = (x0, y0, x0 + size - 1, y0 + size - 1)
            if all(
                box[0] > b[2] + spec.margin
                or b[0] > box[2] + spec.margin
                or box[1] > b[3] + spec.margin
                or b[1] > box[3] + spec.margin
                for b in boxes
            ):
                break
        else:
            raise RuntimeError(f"scene {scene_id}: could not place {k} objects after {spec.max_tries} tries")
        boxes.append(box)
        m = shape_mask(shape, side, x0, y0, size)
        pixels[m] = COLORS[color]
        objects.append(SceneObject(shape=shape, color=color, bbox=_tight(m), mask=m))
    return Scene(scene_id=scene_id, pixels=pixels, objects=tuple(objects))


def _tight(m):
    ys, xs = np.nonzero(m)
    return int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max())


@dataclass(frozen=True)
class QAItem:
    kind: str
    question: tuple[int, ...]
    answer: tuple[int, ...]
    scene_id: int


def caption_words(scene: Scene) -> list[str]:
    """Objects left to right as ``color shape`` pairs joined by commas, ending in a period."""
    words: list[str] = []
    for o in sorted(scene.objects, key=lambda o: (o.center[0], o.center[1])):
        if words:
            words.append(",")
        words += [o.color, o.shape]
    return words + ["."]


def caption_item(scene: Scene, vocab: Vocab) -> QAItem:
    return QAItem("caption", vocab.ids(["<describe>"]), vocab.ids(caption_words(scene)), scene.scene_id)


class QuestionMaker:
    """Generates QA items; existence answers alternate yes/no across all scenes."""

    def __init__(self, spec: SceneSpec, vocab: Vocab, position_margin: float = 0.1):
        self.spec = spec
        self.vocab = vocab
        self.position_margin = position_margin
        self._existence_count = 0

    def _existence(self, scene: Scene, rng) -> QAItem:
        want_yes = self._existence_count % 2 == 0
        self._existence_count += 1
        if want_yes:
            o = scene.objects[int(rng.integers(len(scene.objects)))]
            color, shape = o.color, o.shape
        else:
            absent = [(c, s) for c in self.spec.colors for s in self.spec.shapes if not scene.has(c, s)]
            color, shape = absent[int(rng.integers(len(absent)))]
        words = ["is", "there", "a", color, shape, "?"]
        return QAItem("existence", self.vocab.ids(words), self.vocab.ids(["yes" if want_yes else "no"]), scene.scene_id)

    def _count(self, scene: Scene, rng) -> QAItem:
        words = ["how", "many", "objects", "?"]
        return QAItem("count", self.vocab.ids(words), self.vocab.ids([NUMBER_WORDS[len(scene.objects)]]), scene.scene_id)

    def _color(self, scene: Scene, rng) -> QAItem | None:
        shapes = [o.shape for o in scene.objects]
        unique = [o for o in scene.objects if shapes.count(o.shape) == 1]
        if not unique:
            return None
        o = unique[int(rng.integers(len(unique)))]
        words = ["what", "color", "is", "the", o.shape, "?"]
        return QAItem("color", self.vocab.ids(words), self.vocab.ids([o.color]), scene.scene_id)

    def _position(self, scene: Scene, rng) -> QAItem | None:
        side = scene.image_side
        clear = [o for o in scene.objects if abs(o.center[0] / side - 0.5) >= self.position_margin]
        if not clear:
            return None
        o = clear[int(rng.integers(len(clear)))]
        words = ["where", "is", "the", o.color, o.shape, "?"]
        ans = "left" if o.center[0] / side < 0.5 else "right"
        return QAItem("position", self.vocab.ids(words), self.vocab.ids([ans]), scene.scene_id)

    def items(self, scene: Scene, rng, qa_per_scene: int = 5) -> list[QAItem]:
        makers = [self._existence, self._existence, self._count, self._color, self._position]
        out = []
        for make in makers[:qa_per_scene]:
            item = make(scene, rng)
            if item is not None:
                out.append(item)
        return out


def check_answer(item: QAItem, scene: Scene, vocab: Vocab) -> bool:
    """Re-derive the answer from ground truth; used as a generator self-check."""
    q = vocab.decode(item.question)
    a = vocab.decode(item.answer)
    if item.kind == "existence":
        return a == (["yes"] if scene.has(q[3], q[4]) else ["no"])
    if item.kind == "count":
        return a == [NUMBER_WORDS[len(scene.objects)]]
    if item.kind == "color":
        match = [o for o in scene.objects if o.shape == q[4]]
        return len(match) == 1 and a == [match[0].color]
    if item.kind == "position":
        match = [o for o in scene.objects if o.color == q[3] and o.shape == q[4]]
        if len(match) != 1:
            return False
        return a == (["left"] if match[0].center[0] / scene.image_side < 0.5 else ["right"])
    if item.kind == "caption":
        return a == caption_words(scene)
    return False

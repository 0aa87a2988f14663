import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multigran.dataset import decode_ppm, encode_ppm, gen_dataset, generate_dataset, read_dataset, write_dataset
from multigran.errors import ConfigError, FormatError
from multigran.numerics import make_rng
from multigran.scenes import (
    QUESTION_KINDS, SceneSpec, answer_candidates, caption_item, check_answer, default_vocab, render_scene, shape_mask,
)


@pytest.fixture(scope="module")
def small_ds():
    return generate_dataset(SceneSpec(), 12, 5, seed=3)


@given(st.integers(0, 2**31))
def test_scene_objects_disjoint_and_distinct(seed):
    s = render_scene(SceneSpec(), make_rng(seed))
    pairs = [(o.color, o.shape) for o in s.objects]
    assert len(set(pairs)) == len(pairs)
    masks = s.object_masks
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            assert not (masks[i] & masks[j]).any()


def test_shape_masks():
    sq = shape_mask("square", 16, 2, 3, 5)
    assert sq.sum() == 25 and sq[3, 2] and sq[7, 6]
    assert shape_mask("circle", 16, 0, 0, 9).sum() < 81
    tri = shape_mask("triangle", 16, 0, 0, 9)
    assert tri[8].sum() > tri[0].sum()
    with pytest.raises(ConfigError):
        shape_mask("hexagon", 16, 0, 0, 4)


def test_spec_validation():
    with pytest.raises(ConfigError):
        SceneSpec(min_objects=3, max_objects=2)
    with pytest.raises(ConfigError):
        SceneSpec(colors=("mauve",))
    with pytest.raises(ConfigError):
        SceneSpec(image_side=10)


def test_same_seed_same_dataset(small_ds):
    assert small_ds.same_as(generate_dataset(SceneSpec(), 12, 5, seed=3))
    assert not small_ds.same_as(generate_dataset(SceneSpec(), 12, 5, seed=4))


def test_existence_balanced():
    ds = generate_dataset(SceneSpec(), 41, 5, seed=0)
    ex = [it for it in ds.qa if it.kind == "existence"]
    yes = sum(it.answer == ds.vocab.ids(["yes"]) for it in ex)
    assert abs(yes - (len(ex) - yes)) <= 1


def test_answers_verified(small_ds):
    scenes = {s.scene_id: s for s in small_ds.scenes}
    for it in small_ds.qa + small_ds.captions:
        assert check_answer(it, scenes[it.scene_id], small_ds.vocab)
    assert {it.kind for it in small_ds.qa} <= set(QUESTION_KINDS)


def test_wrong_answer_rejected(small_ds):
    it = next(i for i in small_ds.qa if i.kind == "count")
    scene = small_ds.scenes[[s.scene_id for s in small_ds.scenes].index(it.scene_id)]
    bad = type(it)(it.kind, it.question, small_ds.vocab.ids(["six"]), it.scene_id)
    assert not check_answer(bad, scene, small_ds.vocab) or len(scene.objects) == 6


def test_answer_candidates_cover_answers(small_ds):
    for it in small_ds.qa:
        assert it.answer[0] in answer_candidates(it.kind, small_ds.vocab)
    with pytest.raises(ConfigError):
        answer_candidates("riddle", small_ds.vocab)


def test_caption_left_to_right(small_ds):
    vocab = default_vocab()
    s = small_ds.scenes[0]
    words = vocab.decode(caption_item(s, vocab).answer)
    assert words[-1] == "."
    assert len([w for w in words if w == ","]) == len(s.objects) - 1


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_ppm_round_trip(h, w, seed):
    px = make_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    assert np.array_equal(decode_ppm(encode_ppm(px)), px)


def test_ppm_errors():
    good = encode_ppm(np.zeros((2, 2, 3), dtype=np.uint8))
    for bad in (b"P5" + good[2:], good[:-1], good.replace(b"255", b"256"), b"P6\n2  2\n255\n" + bytes(12)):
        with pytest.raises(FormatError):
            decode_ppm(bad)


def test_dataset_round_trip(tmp_path, small_ds):
    path = write_dataset(small_ds, tmp_path / "ds")
    back = read_dataset(path)
    assert back.same_as(small_ds)
    assert (path / "scenes" / f"{small_ds.scenes[0].scene_id:06d}.ppm").exists()
    manifest = json.loads((path / "manifest.json").read_text())
    assert manifest["n_scenes"] == 12 and "digest" in manifest


def test_dataset_rewrite_is_byte_identical(tmp_path, small_ds):
    a = write_dataset(small_ds, tmp_path / "a")
    b = write_dataset(read_dataset(a), tmp_path / "b")
    for f in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_gen_dataset(tmp_path):
    path = gen_dataset(SceneSpec(), 3, 5, 9, tmp_path / "g")
    assert read_dataset(path).same_as(generate_dataset(SceneSpec(), 3, 5, 9))


def test_dataset_tamper_detected(tmp_path, small_ds):
    path = write_dataset(small_ds, tmp_path / "ds")
    qa = path / "qa.jsonl"
    qa.write_bytes(qa.read_bytes().replace(b'"kind":"count"', b'"kind":"color"', 1))
    with pytest.raises(FormatError) as e:
        read_dataset(path)
    assert e.value.kind == "checksum"
    (path / "manifest.json").write_text(json.dumps({"a": 1}, indent=1))
    with pytest.raises(FormatError):
        read_dataset(path)
    with pytest.raises(FormatError):
        read_dataset(tmp_path / "nowhere")


def test_n_scenes_validated():
    with pytest.raises(ValueError):
        generate_dataset(SceneSpec(), 0, 5, 0)

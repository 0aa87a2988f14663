import json

import numpy as np
import pytest

from multigran.errors import ConfigError
from multigran.experiment import (
    ExperimentConfig, apply_overrides, format_ratio, generate_split, majority_accuracy, mask_bundle,
    parse_override, plan_visual, prepare_scenes, reduction_ratio, render_csv, render_table, run_experiment,
)
from multigran.tokens import PatchStrategy, ReductionPlan

TINY = {
    "data": {"n_train": 8, "n_test": 4, "qa_per_scene": 5},
    "proposals": {"n": 6},
    "inversion": {"steps": 5},
    "stage1": {"epochs": 1, "batch": 4},
    "stage2": {"epochs": 1, "batch": 4, "warmup_steps": 0},
    "plans": [
        {"name": "full", "plan": {"object_keep": None}},
        {"name": "objects_5", "plan": {"object_keep": 5}},
    ],
}


def tiny(tmp_path, seed=0, **extra):
    raw = json.loads(json.dumps(TINY))
    raw["output_dir"] = str(tmp_path)
    raw.update(extra)
    return ExperimentConfig.from_dict(raw, seed)


def test_default_config_is_valid():
    cfg = ExperimentConfig.from_dict({}, 0)
    assert cfg.full_counts == {"global": 1, "local": 36, "object": 25}
    assert cfg.reference_tokens == 144
    assert sum(cfg.full_counts.values()) == 62


@pytest.mark.parametrize("name,tokens", [("full", 62), ("objects_20", 57), ("objects_5", 42), ("prune23_objects_5", 29), ("pool2_objects_5", 15)])
def test_default_plan_counts(name, tokens):
    cfg = ExperimentConfig.from_dict({}, 0)
    plan = {p.name: p.plan for p in cfg.plans}[name]
    assert sum(plan.predict_counts(cfg.full_counts, (6, 6)).values()) == tokens


def test_config_rejections():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"bogus": 1}, 0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"schema_version": 2}, 0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"plans": [{"name": "x", "plan": {"object_keep": 99}}]}, 0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"tokens": {"local_pool": 5}}, 0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"stage1": {"epochs": -1}}, 0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"proposals": {"n": 2}}, 0)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"ablations": {"mask_types": ["sam"]}}, 0)


def test_overrides():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("a=text") == (["a"], "text")
    raw = apply_overrides({}, ["stage2.epochs=4", 'output_dir="x"'])
    assert raw == {"stage2": {"epochs": 4}, "output_dir": "x"}
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_config_load(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"stage2": {"epochs": 3}}))
    cfg = ExperimentConfig.load(p, 5, ["stage1.epochs=1"])
    assert cfg.raw["stage2"]["epochs"] == 3 and cfg.raw["stage1"]["epochs"] == 1 and cfg.seed == 5
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p, 0)


def test_reduction_ratio_formatting():
    assert reduction_ratio(62, 62) == 0.0
    assert format_ratio(reduction_ratio(144, 576)) == "75%"
    assert format_ratio(reduction_ratio(57, 576)) == "90%"


def test_splits_disjoint_and_seeded(tmp_path):
    cfg = tiny(tmp_path)
    train, test = generate_split(cfg, "train"), generate_split(cfg, "test")
    assert not {s.scene_id for s in train.scenes} & {s.scene_id for s in test.scenes}
    assert train.same_as(generate_split(cfg, "train"))
    with pytest.raises(ConfigError):
        generate_split(cfg, "val")


def test_prepared_scene_priority_and_bundles(tmp_path):
    cfg = tiny(tmp_path)
    ds = generate_split(cfg, "test")
    prep = prepare_scenes(cfg, ds, ["synthetic", "bbox", "tiled"])
    p = prep[0]
    syn = p.masksets["synthetic"]
    assert p.priority["synthetic"][-1] == len(syn.proposals)  # background last
    assert sorted(p.priority["synthetic"]) == list(range(len(syn)))
    assert len(p.tokens["tiled"]) == 54
    full = mask_bundle(cfg, p)
    assert full.counts == {"global": 1, "local": 36, "object": 7}
    v, b = plan_visual(cfg, p, ReductionPlan(PatchStrategy.pool(2), object_keep=5))
    assert v.shape == (15, 64) and b.counts == {"global": 1, "local": 9, "object": 5}
    assert not b.object_is_background.any()
    assert mask_bundle(cfg, p).object_is_background.sum() == 1
    again = prepare_scenes(cfg, ds, ["synthetic"])[0]
    assert np.array_equal(mask_bundle(cfg, again).matrix(), full.matrix())


def test_majority_accuracy():
    from multigran.scenes import QAItem

    tr = [QAItem("count", (1,), (5,), 0), QAItem("count", (1,), (5,), 1), QAItem("count", (1,), (6,), 2)]
    te = [QAItem("count", (1,), (5,), 3), QAItem("count", (1,), (6,), 4)]
    assert majority_accuracy(tr, te) == {"count": 0.5}


def test_run_is_deterministic_and_reported(tmp_path):
    a = run_experiment(tiny(tmp_path / "a"))
    run_experiment(tiny(tmp_path / "b"))
    assert a["status"] == "ok"
    csv_a = (tmp_path / "a" / "results.csv").read_bytes()
    assert csv_a == (tmp_path / "b" / "results.csv").read_bytes()
    names = [(r["section"], r["name"]) for r in a["rows"]]
    assert ("plans", "full") in names and ("baselines", "patch_only_full") in names
    assert ("composition", "patch_cls_mask") in names and ("mask_types", "tiled") in names
    assert len({r["checkpoint_sha256"] for r in a["rows"] if r["section"] == "plans"}) == 1
    fam_models = {r["name"]: r["model"] for r in a["rows"] if r["section"] == "mask_types"}
    assert fam_models == {"synthetic": "mask", "bbox": "mask_bbox", "tiled": "mask_tiled"}
    assert len({r["tokens"] for r in a["rows"] if r["section"] == "mask_types"}) == 1
    assert render_csv(a["rows"]).splitlines()[0].startswith("section,name,model,tokens")
    assert "RR" in render_table(a["rows"])
    log = [json.loads(l) for l in (tmp_path / "a" / "log.jsonl").read_text().splitlines()]
    assert log[0]["event"] == "start" and log[-1]["event"] == "done"


def test_swap_mode_reuses_the_synthetic_model(tmp_path):
    cfg = tiny(tmp_path, ablations={"composition": False, "mask_type_training": "swap"}, baselines={"patch_only": False, "random_patch_drop": False})
    res = run_experiment(cfg, stages=("train", "ablate"))
    assert {r["model"] for r in res["rows"]} == {"mask"}
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["mask.mgck"]


def test_pruned_training_views_change_the_model(tmp_path):
    base = {"ablations": {"composition": False, "mask_types": ["synthetic"]}, "baselines": {"patch_only": False, "random_patch_drop": False}}
    plain = run_experiment(tiny(tmp_path / "a", **base), stages=("train",))
    viewed = run_experiment(tiny(tmp_path / "b", tokens={"train_object_keep": [2]}, **base), stages=("train",))
    assert plain["checkpoints"]["mask"] != viewed["checkpoints"]["mask"]


@pytest.mark.parametrize("bad", [{"ablations": {"mask_type_training": "both"}}, {"tokens": {"train_object_keep": [99]}}, {"tokens": {"train_object_keep": [-1]}}])
def test_training_options_are_validated(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad, 0)


def test_failed_run_keeps_partial_results(tmp_path):
    cfg = tiny(tmp_path)
    with pytest.raises(Exception):
        run_experiment(cfg, stages=("sweep",))  # no checkpoints yet
    res = json.loads((tmp_path / "results.json").read_text())
    assert res["status"] == "failed" and "error" in res

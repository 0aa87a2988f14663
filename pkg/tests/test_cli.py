import json

import pytest

from multigran import cli, experiment

from test_experiment import TINY


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "out")}))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """Tiny run shared by the eval/report tests."""
    d = tmp_path_factory.mktemp("cli")
    p = d / "cfg.json"
    p.write_text(json.dumps({**TINY, "output_dir": str(d / "out")}))
    assert cli.main(["run", "--config", str(p), "--seed", "0"]) == 0
    return p, d / "out"


def test_init_config_roundtrips(capsys):
    assert cli.main(["init-config"]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads(json.dumps(experiment.DEFAULT_CONFIG))


def test_seed_is_mandatory(config):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--config", str(config)])
    assert exc.value.code == 2


@pytest.mark.parametrize("override", ["nope.x=1", "stage2.batch=0", "plans=[{\"name\": \"x\", \"plan\": {\"object_keep\": 99}}]"])
def test_bad_config_exits_2(config, override, capsys):
    assert cli.main(["train", "--config", str(config), "--seed", "0", "--set", override]) == 2
    assert "error:" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["run", "--config", str(tmp_path / "bad.json"), "--seed", "0"]) == 2


def test_runtime_failure_exits_1_with_partial_results(config, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("simulated")

    monkeypatch.setattr(experiment, "train_models", boom)
    assert cli.main(["run", "--config", str(config), "--seed", "0"]) == 1
    res = json.loads((tmp_path / "out" / "results.json").read_text())
    assert res["status"] == "failed" and "simulated" in res["error"]


def test_gen_data_then_corrupt_input_exits_3(config, tmp_path):
    assert cli.main(["gen-data", "--config", str(config), "--seed", "0"]) == 0
    train_dir = tmp_path / "out" / "data" / "train"
    assert train_dir.is_dir()
    target = sorted(p for p in train_dir.iterdir() if p.is_file())[0]
    target.write_bytes(target.read_bytes()[:-3] + b"xyz")
    args = ["train", "--config", str(config), "--seed", "0", "--set", f"data.train_dir={json.dumps(str(train_dir))}"]
    assert cli.main(args) == 3


def test_eval_plan_and_plan_name(trained, capsys):
    cfg, out = trained
    capsys.readouterr()
    assert cli.main(["eval", "--config", str(cfg), "--seed", "0", "--plan-name", "objects_5"]) == 0
    by_name = capsys.readouterr().out
    assert cli.main(["eval", "--config", str(cfg), "--seed", "0", "--plan", '{"object_keep": 5}']) == 0
    by_json = capsys.readouterr().out
    row = json.loads((out / "results.json").read_text())["rows"][1]
    assert row["name"] == "objects_5"
    assert f"{100 * row['acc_macro']:.1f}" in by_name
    assert by_name.splitlines()[2].split()[3:10] == by_json.splitlines()[2].split()[3:10]


def test_eval_errors(trained, capsys):
    cfg, out = trained
    assert cli.main(["eval", "--config", str(cfg), "--seed", "0", "--plan-name", "missing"]) == 2
    assert cli.main(["eval", "--config", str(cfg), "--seed", "0", "--plan", "{bad"]) == 2
    assert cli.main(["eval", "--config", str(cfg), "--seed", "0", "--plan", '{"object_keep": 500}']) == 2


def test_corrupt_checkpoint_exits_3(trained, tmp_path):
    cfg, out = trained
    ckpt = tmp_path / "ck"
    (ckpt / "checkpoints").mkdir(parents=True)
    data = (out / "checkpoints" / "mask.mgck").read_bytes()
    (ckpt / "checkpoints" / "mask.mgck").write_bytes(data[:100] + bytes([data[100] ^ 1]) + data[101:])
    assert cli.main(["sweep", "--config", str(cfg), "--seed", "0", "--out", str(ckpt)]) == 3


def test_report_rerenders(trained, capsys):
    _, out = trained
    table = (out / "results.txt").read_text()
    (out / "results.txt").unlink()
    capsys.readouterr()
    assert cli.main(["report", str(out / "results.json")]) == 0
    assert capsys.readouterr().out == table == (out / "results.txt").read_text()
    assert cli.main(["report", str(out / "missing.json")]) == 2

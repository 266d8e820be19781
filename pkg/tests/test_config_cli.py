import json
import shutil

import pytest

from retmask.cli import EXIT_ABORTED, EXIT_CONFIG, EXIT_OK, EXIT_PREREQ, main
from retmask.config import CONFIG_VERSION, ConfigError, load_config, make_config
from retmask.pipeline import PipelineError, compare, tree_hashes

TINY = ["--set", "model.d_model=32", "--set", "model.d_mlp=64", "--set", "pretrain.max_steps=300",
        "--set", "pretrain.induction_steps=150", "--set", "pretrain.n_eval=50",
        "--set", "tasks.n_instructions=80", "--set", "tasks.n_eval=20", "--set", "tasks.n_detect=20",
        "--set", "synth.smaller_model.max_steps=20"]


def test_defaults_and_overrides():
    cfg = make_config()
    assert cfg["version"] == CONFIG_VERSION and cfg.seed == 42
    c2 = cfg.with_overrides(**{"train.beta": 0.2})
    assert c2["train"]["beta"] == 0.2 and cfg["train"]["beta"] == 0.1
    assert c2.hash() != cfg.hash()
    assert cfg.stage_seed("init") == make_config().stage_seed("init") != cfg.stage_seed("synth")


def test_unknown_key_and_version(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        make_config().with_overrides(**{"train.bogus": 1})
    p = tmp_path / "c.json"
    make_config().save(p)
    assert load_config(p).hash() == make_config().hash()
    data = json.loads(p.read_text())
    data["version"] = CONFIG_VERSION + 1
    p.write_text(json.dumps(data))
    with pytest.raises(ConfigError, match="version"):
        load_config(p)


def test_cli_config_errors(tmp_path, capsys):
    assert main(["detect", "--out", str(tmp_path / "r"), "--set", "nope.x=1"]) == EXIT_CONFIG
    assert main(["pretrain", "--out", str(tmp_path / "r"), "--rejected-sampler", "oracle"]) == EXIT_CONFIG


def test_missing_prerequisite_exit_code(tmp_path, capsys):
    assert main(["detect", "--out", str(tmp_path / "r")]) == EXIT_PREREQ
    assert "run pretrain first" in capsys.readouterr().err


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv("RETMASK_OUTPUT_ROOT", str(tmp_path))
    assert main(["init-config", str(tmp_path / "c.json")]) == EXIT_OK
    assert main(["eval", "--out", "rel"]) == EXIT_PREREQ
    assert not (tmp_path / "rel" / "eval").exists()


@pytest.fixture(scope="module")
def tiny_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["run-all", "--out", str(root / "a"), *TINY]) == EXIT_OK
    # a second strategy reusing the pretrain/detect/ablate outputs of the first
    (root / "b").mkdir()
    for stage in ("pretrain", "detect", "ablate"):
        shutil.copytree(root / "a" / stage, root / "b" / stage)
    assert main(["run-all", "--out", str(root / "b"), "--rejected-sampler", "judged-pair", *TINY]) == EXIT_OK
    return root


def test_run_all_outputs_and_tagging(tiny_runs):
    a, b = tiny_runs / "a", tiny_runs / "b"
    for rel in ("pretrain/model.ckpt", "detect/scores.csv", "ablate/mask.json", "synth/pairs.jsonl",
                "dpo/model.ckpt", "eval/summary.json", "report/manifest.json", "run_manifest.json"):
        assert (a / rel).exists(), rel
    assert json.loads((a / "run_manifest.json").read_text())["strategy"] == "retmask"
    assert json.loads((b / "run_manifest.json").read_text())["strategy"] == "judged-pair"
    assert json.loads((b / "eval" / "summary.json").read_text())["strategy"] == "judged-pair"
    assert (a / "pretrain" / "model.ckpt").read_bytes() == (b / "pretrain" / "model.ckpt").read_bytes()


def test_rerun_is_up_to_date_and_dirty_dir_refused(tiny_runs, capsys):
    a = tiny_runs / "a"
    before = tree_hashes(a)
    assert main(["run-all", "--out", str(a), *TINY]) == EXIT_OK
    assert tree_hashes(a) == before
    # same directory, different pretraining config: refuse to overwrite
    assert main(["pretrain", "--out", str(a), *TINY, "--set", "pretrain.max_steps=301"]) == EXIT_CONFIG
    assert "--force" in capsys.readouterr().err


def test_compare(tiny_runs, tmp_path):
    a, b = tiny_runs / "a", tiny_runs / "b"
    rows = compare([a, b])
    assert [r["strategy"] for r in rows] == ["retmask", "judged-pair"]
    assert rows[0]["niah_base"] == rows[1]["niah_base"]
    assert compare([a, a])[0] == compare([a, a])[1]
    with pytest.raises(PipelineError):
        compare([a])
    assert main(["compare", str(a), str(b), "--output", str(tmp_path / "cmp.csv")]) == EXIT_OK
    assert (tmp_path / "cmp.csv").read_text().splitlines()[0].startswith("run,strategy")
    # runs evaluated on different NIAH sets are not comparable
    c = tmp_path / "c"
    shutil.copytree(b, c)
    s = json.loads((c / "eval" / "summary.json").read_text())
    s["eval_set_hash"] = "0" * 16
    (c / "eval" / "summary.json").write_text(json.dumps(s))
    with pytest.raises(PipelineError, match="different test sets"):
        compare([a, c])


def test_aborted_synthesis_is_reported(tiny_runs, tmp_path):
    a = tiny_runs / "a"
    # every rejected generation is cut off before the stop token
    code = main(["run-all", "--out", str(tmp_path / "x"), *TINY, "--set", "synth.max_new_tokens=1"])
    assert code == EXIT_ABORTED
    stats = json.loads((tmp_path / "x" / "synth" / "stats.json").read_text())
    assert stats["aborted"] and stats["n_tuples"] == 0
    assert not (tmp_path / "x" / "dpo").exists()
    rows = compare([a, tiny_runs / "b", tmp_path / "x"])
    assert rows[2]["status"].startswith("aborted") and rows[2]["n_pairs"] == 0
    assert rows[2]["niah_trained"] != rows[2]["niah_trained"]  # NaN
    with pytest.raises(PipelineError, match="two completed"):
        compare([a, tmp_path / "x"])

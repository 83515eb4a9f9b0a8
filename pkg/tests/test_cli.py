import argparse
import json

import pytest

from antiuav.cli import build_parser, main


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "bench"
    assert main(["synth", "--out", str(root), "--train", "2", "--val", "1", "--test", "2",
                 "--num-frames", "20", "--seed", "5"]) == 0
    return root


def subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


@pytest.mark.parametrize("command", sorted(subparsers()))
def test_every_flag_is_documented(command, capsys):
    sp = subparsers()[command]
    for action in sp._actions:
        if isinstance(action, argparse._HelpAction):
            continue
        assert action.help, f"{command} {action.option_strings} lacks help"
    assert main([command, "--help"]) == 0
    out = capsys.readouterr().out
    for action in sp._actions:
        for opt in action.option_strings:
            assert opt in out


@pytest.mark.parametrize(
    "argv",
    [["bogus"], ["synth"], ["eval", "--data", "/nonexistent", "--results", "x=y"], ["synth", "--out", "x", "--train", "0"],
     ["train", "--data", "/nonexistent", "--out", "m.ckpt"], ["eval", "--no-such-flag"]],
)
def test_invalid_input_exits_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_synth_rerun_and_collision(bench, capsys):
    args = ["synth", "--out", str(bench), "--train", "2", "--val", "1", "--test", "2", "--num-frames", "20"]
    assert main(args + ["--seed", "5"]) == 0
    assert main(args + ["--seed", "6"]) == 1
    assert "already exist" in capsys.readouterr().err


def test_default_seed_is_printed(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "b"), "--num-frames", "8"]) == 0
    assert "seed: 42 (default)" in capsys.readouterr().out


def test_config_file(bench, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"data: {bench}\nsplit: val\n")
    assert main(["stats", "--config", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["num_sequences"] == 1
    cfg.write_text("no_such_key: 1\n")
    assert main(["stats", "--config", str(cfg)]) == 1


def test_data_from_environment(bench, monkeypatch, capsys):
    monkeypatch.setenv("ANTIUAV_DATA", str(bench))
    assert main(["stats", "--split", "test"]) == 0
    assert json.loads(capsys.readouterr().out)["num_sequences"] == 2


def test_train_track_eval_plot(bench, tmp_path, capsys):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--data", str(bench), "--steps", "6", "--steps-per-epoch", "3", "--out", str(ckpt)]) == 0
    assert ckpt.is_file()
    lines = (tmp_path / "m.ckpt.log.jsonl").read_text().splitlines()
    assert sum(json.loads(ln)["kind"] == "step" for ln in lines) == 6
    assert main(["track", "--data", str(bench), "--ckpt", str(ckpt), "--out", str(tmp_path / "toy")]) == 0
    for name in ("oracle", "absent", "noisy"):
        assert main(["track", "--data", str(bench), "--tracker", name, "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    assert main(["eval", "--data", str(bench), "--results", f"toy={tmp_path / 'toy'}",
                 "--results", f"oracle={tmp_path / 'oracle'}", "--results", f"absent={tmp_path / 'absent'}",
                 "--out", str(tmp_path / "rep")]) == 0
    table = capsys.readouterr().out
    assert "| oracle |" in table and table.index("| absent |") < table.index("| oracle |")
    summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert {s["tracker"] for s in summary} == {"toy", "oracle", "absent"}
    assert main(["plot", "--data", str(bench), "--results", str(tmp_path / "noisy"),
                 "--out", str(tmp_path / "curves")]) == 0
    assert len((tmp_path / "curves" / "success.csv").read_text().splitlines()) == 21


def test_eval_without_results_for_a_modality(bench, tmp_path):
    assert main(["track", "--data", str(bench), "--tracker", "oracle", "--out", str(tmp_path / "o")]) == 0
    assert main(["eval", "--data", str(bench), "--protocol", "3", "--results", f"o={tmp_path / 'o'}"]) == 1

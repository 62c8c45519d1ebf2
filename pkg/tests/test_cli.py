import json
import subprocess
import sys

import pytest

from deductmwp.cli import run

TINY = ["--epochs", "2", "--hidden", "8"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    data, ckpt = d / "train.jsonl", d / "m.ckpt"
    assert run(["gen", "--out", str(data), "--count", "20", "--seed", "3"]) == 0
    assert run(["train", "--data", str(data), "--ckpt", str(ckpt), "--out", str(d / "m.json"), *TINY]) == 0
    return d, data, ckpt


def test_gen_writes_requested_count(tmp_path):
    out = tmp_path / "g.jsonl"
    assert run(["gen", "--out", str(out), "--count", "7", "--templates", "add,mul"]) == 0
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert len(rows) == 7 and {"id", "text", "answer", "equation"} <= set(rows[0])


def test_gen_unknown_template(tmp_path, capsys):
    assert run(["gen", "--out", str(tmp_path / "g.jsonl"), "--templates", "nope"]) == 1
    assert "error:" in capsys.readouterr().err


def test_train_outputs(trained):
    d, _, ckpt = trained
    assert ckpt.read_bytes().startswith(b"DMWPCKPT")
    metrics = json.loads((d / "m.json").read_text())
    assert metrics["n"] == 20 and metrics["seed"] == 1
    assert metrics["config_echo"]["hidden"] == 8
    assert (d / "m.ckpt.log.csv").read_text().startswith("epoch,loss")


def test_eval_to_stdout(trained, capsys):
    _, data, ckpt = trained
    assert run(["eval", "--data", str(data), "--ckpt", str(ckpt)]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert 0.0 <= metrics["value_accuracy"] <= 1.0


def test_eval_rejects_file(trained, tmp_path):
    _, data, ckpt = trained
    bad = tmp_path / "bad.jsonl"
    bad.write_text(data.read_text() + "{broken\n")
    assert run(["eval", "--data", str(bad), "--ckpt", str(ckpt), "--out", str(tmp_path / "e.json"),
                "--rejects", str(tmp_path / "r.jsonl")]) == 0
    assert json.loads((tmp_path / "r.jsonl").read_text().splitlines()[0])["line"] == 21


def test_solve_prints_equation(trained, capsys):
    _, _, ckpt = trained
    assert run(["solve", "--ckpt", str(ckpt), "--text", "Tom had 8 apples. He ate 2. How many are left?"]) == 0
    assert " = " in capsys.readouterr().out


def test_inspect_json(trained, tmp_path):
    _, _, ckpt = trained
    out = tmp_path / "i.json"
    assert run(["inspect", "--ckpt", str(ckpt), "--text", "Add 3 and 4. What is it?", "--max-steps", "2",
                "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())["steps"]) == 2


@pytest.mark.parametrize("argv", [
    ["train", "--data", "missing.jsonl", "--ckpt", "x.ckpt"],
    ["eval", "--data", "missing.jsonl", "--ckpt", "missing.ckpt"],
    ["solve", "--ckpt", "missing.ckpt", "--text", "1 and 2?"],
])
def test_missing_files_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1


def test_empty_corpus(tmp_path, capsys):
    (tmp_path / "e.jsonl").write_text("")
    assert run(["train", "--data", str(tmp_path / "e.jsonl"), "--ckpt", str(tmp_path / "c"), *TINY]) == 1
    assert "empty corpus" in capsys.readouterr().err


def test_text_without_numbers(trained, capsys):
    _, _, ckpt = trained
    assert run(["solve", "--ckpt", str(ckpt), "--text", "No numbers here?"]) == 1
    assert "error:" in capsys.readouterr().err


def test_not_a_checkpoint(tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"hello")
    assert run(["solve", "--ckpt", str(junk), "--text", "Add 1 and 2?"]) == 1


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--lr"], ["gen"], ["eval", "--data", "a", "--ckpt", "b",
                                                                            "--tol", "-1"]])
def test_usage_errors_exit_2(argv):
    assert run(argv) == 2


def test_verbose_flag_after_subcommand(tmp_path):
    assert run(["gen", "--out", str(tmp_path / "g.jsonl"), "--count", "2", "-v"]) == 0


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "deductmwp", "gen", "--out", str(tmp_path / "g.jsonl"),
                           "--count", "3"], capture_output=True, text=True)
    assert proc.returncode == 0 and "wrote 3" in proc.stdout

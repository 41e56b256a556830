import json
import os
import subprocess
import sys

import pytest

from erp_mtl.cli import main
from erp_mtl.experiment import read_manifest, run_dir
from conftest import quick_experiment


def _config_file(tmp_path, **over):
    cfg = quick_experiment(tmp_path / "results", **over).to_dict()
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


def test_synth_and_validate(tmp_path, capsys):
    assert main(["synth-data", "-o", str(tmp_path / "syn"), "--seed", "3", "--sentences", "12",
                 "--signals", "N400,READ", "--noise", "1.0"]) == 0
    out = capsys.readouterr().out
    assert "ceiling\tN400\t0.500000" in out
    assert main(["validate-data", str(tmp_path / "syn" / "words.tsv")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["sentences"] == 12 and report["signals"] == ["N400", "READ"]


def test_validate_exit_codes(tmp_path, capsys):
    assert main(["validate-data", str(tmp_path / "missing.tsv")]) == 2
    (tmp_path / "empty.tsv").write_text("")
    assert main(["validate-data", str(tmp_path / "empty.tsv")]) == 1
    (tmp_path / "bad.tsv").write_text("sentence_id\tword_index\tparticipant_id\tword\tpos\tN400\ns\tx\tp\tw\tNOUN\t1\n")
    assert main(["validate-data", str(tmp_path / "bad.tsv")]) == 1
    assert "word_index" in capsys.readouterr().err


def test_bad_generator_settings(tmp_path):
    assert main(["synth-data", "-o", str(tmp_path), "--noise", "-1"]) == 1
    assert main(["synth-data", "-o", str(tmp_path), "--config", str(tmp_path / "none.json")]) == 2


def test_lm_train(tmp_path, capsys):
    cfg = _config_file(tmp_path, lm={"learning_rate": 1e-2})
    assert main(["lm-train", "--config", str(cfg), "--corpus", str(tmp_path / "nope.txt"), "-o", str(tmp_path)]) == 2
    assert "corpus not found" in capsys.readouterr().err
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("the cat sat on the mat\nthe dog sat on the log\na cat saw a dog\n" * 4)
    assert main(["lm-train", "--config", str(cfg), "--corpus", str(corpus), "--epochs", "5", "-o", str(tmp_path / "e1")]) == 0
    first = capsys.readouterr().out
    nll = first.splitlines()[0].split("\t")[1].split()
    assert float(nll[3]) < float(nll[1])
    assert main(["lm-train", "--config", str(cfg), "--corpus", str(corpus), "--epochs", "5", "-o", str(tmp_path / "e2")]) == 0
    second = capsys.readouterr().out
    sha = [ln.split("sha256 ")[1] for ln in first.splitlines()[:2]]
    assert sha == [ln.split("sha256 ")[1] for ln in second.splitlines()[:2]]
    assert (tmp_path / "e1" / "forward.ckpt").exists() and (tmp_path / "e1" / "backward.ckpt").exists()


def test_train_report_and_mismatch(tmp_path, capsys):
    cfg = _config_file(tmp_path)
    out = tmp_path / "results"
    assert main(["train", "--config", str(cfg), "--signals", "N400,P600", "--runs", "2"]) == 0
    assert read_manifest(run_dir(out, "N400+P600", 1)) is not None
    assert main(["train", "--config", str(cfg), "--signals", "N400,P600", "--runs", "2"]) == 0
    assert "2 already present" in capsys.readouterr().out
    # a different seed into the same directory is refused
    assert main(["train", "--config", str(cfg), "--signals", "N400", "--seed", "99"]) == 1
    assert "already holds" in capsys.readouterr().err
    assert main(["report", str(out)]) == 0
    assert (out / "report" / "pove_summary.tsv").exists()
    assert main(["report", str(tmp_path / "nothing")]) == 2
    (tmp_path / "blank").mkdir()
    assert main(["report", str(tmp_path / "blank")]) == 1


def test_train_needs_signals(tmp_path):
    assert main(["train", "--config", str(_config_file(tmp_path))]) == 1


def test_sweep_dry_run_and_erp_combos(tmp_path, capsys):
    six = {"synthetic": {"seed": 1, "n_sentences": 12, "n_participants": 2, "lm_sentences": 0,
                         "signals": ["ELAN", "LAN", "N400", "EPNP", "P600", "PNP"]}}
    cfg = _config_file(tmp_path, data=six, runs=1)
    assert main(["sweep", "--config", str(cfg), "--sweep", "erp-combos", "--dry-run"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 64 and lines[-1].startswith("63 variation(s) x 1 run(s)")
    assert main(["sweep", "--config", str(cfg), "--sweep", "erp-combos", "--no-checkpoints"]) == 0
    dirs = [p for p in (tmp_path / "results").iterdir() if p.is_dir()]
    assert len(dirs) == 63
    splits = {read_manifest(run_dir(tmp_path / "results", d.name, 0))["split_hash"] for d in dirs}
    assert len(splits) == 1


def test_numerical_abort_exit_code(tmp_path, capsys):
    cfg = _config_file(tmp_path, runs=1)
    assert main(["train", "--config", str(cfg), "--signals", "N400", "--lr", "1e30"]) == 3
    assert "failed" in capsys.readouterr().err


def test_bad_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"runs": -1}')
    assert main(["train", "--config", str(p), "--signals", "N400"]) == 1
    assert main(["train", "--config", str(tmp_path / "absent.json"), "--signals", "N400"]) == 2


def test_console_script_and_env_workers(tmp_path):
    cfg = _config_file(tmp_path, workers=None, runs=2)
    env = {**os.environ, "ERP_MTL_WORKERS": "2"}
    proc = subprocess.run([sys.executable, "-m", "erp_mtl.cli", "-v", "train", "--config", str(cfg),
                           "--signals", "N400"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    assert "2 run(s) completed" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "erp_mtl.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "erp-mtl" in proc.stdout
    env["ERP_MTL_WORKERS"] = "zero"
    proc = subprocess.run([sys.executable, "-m", "erp_mtl.cli", "train", "--config", str(cfg), "--signals", "N400"],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 1

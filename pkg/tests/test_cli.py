import json

import pytest

from urpa.cli import main


@pytest.fixture
def small_toml(tmp_path):
    p = tmp_path / "small.toml"
    p.write_text(
        "n_source = 300\nn_target_pool = 200\neval_set_size = 40\nsource_steps = 20\n"
        "theorem_samples = 4\ntheorem_G = [8, 32]\nadapt.k_shots = 20\ngrpo.batch_size = 8\n"
    )
    return p


def test_run_and_rerun(tmp_path, small_toml, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(small_toml), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "adapted (target test)" in text and "mIoU" in text
    assert json.loads((out / "config.json").read_text())["output_dir"] == str(out)
    assert main(["eval", "--config", str(small_toml), "--out", str(out)]) == 0


def test_staged_commands(tmp_path, small_toml):
    out = tmp_path / "o"
    assert main(["gen", "--config", str(small_toml), "--out", str(out)]) == 0
    assert (out / "target_shots.jsonl").exists() and not (out / "source.ckpt").exists()
    assert main(["train-source", "--config", str(small_toml), "--out", str(out)]) == 0
    assert (out / "source.ckpt").exists()


def test_usage_and_config_errors(tmp_path, small_toml, capsys):
    assert main(["adapt", "--shots", "150"]) == 1
    assert main(["frobnicate"]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 1
    assert main(["run", "--shots", "100", "--config", str(small_toml)]) == 1  # K=100 is not few-shot for a pool of 200
    bad = tmp_path / "bad.toml"
    bad.write_text("adapt.bogus = 1\n")
    assert main(["run", "--config", str(bad)]) == 1
    assert "bogus" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path, small_toml, capsys):
    blocker = tmp_path / "occupied"
    blocker.write_text("not a directory")
    assert main(["gen", "--config", str(small_toml), "--out", str(blocker)]) == 2
    assert "run failed" in capsys.readouterr().err


def test_theorem_command(tmp_path, capsys):
    assert main(["theorem", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "pinsker_violations" in out and "FAIL" not in out
    rows = [json.loads(l) for l in (tmp_path / "theorem_checks.jsonl").read_text().splitlines()]
    assert len(rows) == 4 and all(r["result"] == "PASS" for r in rows)


def test_ablate_command(tmp_path, small_toml, capsys):
    assert main(["ablate", "--config", str(small_toml), "--out", str(tmp_path), "--variants", "no_confidence",
                 "--n-seeds", "1"]) == 0
    assert "no_confidence" in capsys.readouterr().out
    assert (tmp_path / "ablation.jsonl").exists()
    assert main(["ablate", "--config", str(small_toml), "--out", str(tmp_path), "--variants", "bogus"]) == 1

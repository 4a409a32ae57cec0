import shutil
import subprocess

import pytest

from refml.cli import ConfigError, ExperimentConfig, load_config, main
from refml.model import PAPER_SPEC, build, save_params

TINY = [
    "--set", "conditions=1.0:0.3:1.0, 1.3:0.5:0.9",
    "--set", "num_classes=3", "--set", "n_way=3", "--set", "windows_per_class=4",
    "--set", "input_length=32", "--set", "conv_units=2:3:2", "--set", "hidden_dim=4",
    "--set", "shots=1", "--set", "q_query=2", "--set", "rounds=3", "--set", "seeds=0",
    "--set", "methods=REFML,FedAvg,FedAvg-FT,Local", "--set", "encoder_steps=1",
    "--set", "finetune_steps=1",
]


def test_profiles_load():
    desk = load_config("desk")
    assert (desk.input_length, desk.rounds, desk.n_way) == (256, 50, 4)
    paper = load_config("paper")
    assert (paper.input_length, paper.rounds) == (1024, 1000)
    assert paper.arch().flatten_length == 4096


def test_unknown_key_is_named(capsys):
    with pytest.raises(ConfigError, match="'epochs'"):
        load_config(None, ["epochs=3"])
    assert main(["generate", "--set", "bogus_key=1"]) == 1
    assert "bogus_key" in capsys.readouterr().err


def test_config_file_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "x.cfg"
    cfg.write_text("rounds = 3\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(str(cfg))


def test_validation_errors_exit_1(tmp_path):
    assert main(["run", "--set", "q_query=0", "--dry-run"]) == 1
    assert main(["run", "--set", "rounds=-1", "--dry-run"]) == 1
    assert main(["run", "--set", "source=csv", "--set", f"data_dir={tmp_path / 'nope'}"]) == 1
    assert main(["run", "--set", "methods=FedNova", "--dry-run"]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 1


def test_text_round_trip():
    cfg = load_config("desk", ["test_label_map=0:1,1:0", "folds=1,2>0; 0,2>1"])
    again = ExperimentConfig().with_text(cfg.to_text())
    assert again == cfg


def test_dry_run_prints_config(tmp_path, capsys):
    assert main(["run", "--config", "desk", "--dry-run", "--out", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "rounds = 50" in out and "input_length = 256" in out
    assert not (tmp_path / "o").exists()


def test_generate_idempotent(tmp_path):
    args = ["generate", *TINY, "--set", "conditions=1.0:0.3:1.0, 1.3:0.5:0.9, 1.1:0.2:1.0"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["condition_0.csv", "condition_1.csv", "condition_2.csv"]
    for name in files:
        a = (tmp_path / "a" / name).read_bytes()
        assert a == (tmp_path / "b" / name).read_bytes()
        assert len(a.decode().splitlines()) == 3 * 4


def test_run_emits_declared_files_and_reproduces(tmp_path):
    out = tmp_path / "run"
    assert main(["run", *TINY, "--out", str(out)]) == 0
    manifest = (out / "manifest.txt").read_text()
    declared = [line.split("= ", 1)[1] for line in manifest.splitlines()
                if line.startswith("# artifact = ")]
    assert "results.csv" in declared and any(d.endswith(".meta") for d in declared)
    for rel in declared:
        assert (out / rel).is_file(), rel
    actual = {str(p.relative_to(out)) for p in out.rglob("*") if p.is_file()}
    assert actual == set(declared)
    summary = (out / "summary.csv").read_bytes()
    assert summary.splitlines()[0] == b"method,shots,mean,std"
    assert len((out / "results.csv").read_text().splitlines()) == 1 + 4 * 2

    # the manifest alone reproduces the run, at any --jobs
    again = tmp_path / "again"
    assert main(["run", "--config", str(out / "manifest.txt"), "--out", str(again), "--jobs", "2"]) == 0
    assert (again / "summary.csv").read_bytes() == summary
    assert (again / "results.csv").read_bytes() == (out / "results.csv").read_bytes()


def test_run_from_csv_dir(tmp_path):
    data = tmp_path / "data"
    assert main(["generate", *TINY, "--out", str(data)]) == 0
    out = tmp_path / "run"
    assert main(["run", *TINY, "--set", "source=csv", "--set", f"data_dir={data}",
                 "--set", "save_checkpoints=false", "--out", str(out)]) == 0
    synth = tmp_path / "synth"
    assert main(["run", *TINY, "--set", "save_checkpoints=false", "--out", str(synth)]) == 0
    assert (out / "summary.csv").read_bytes() == (synth / "summary.csv").read_bytes()


def test_cross_equipment_label_map(tmp_path):
    src, dst = tmp_path / "src", tmp_path / "dst"
    assert main(["generate", *TINY, "--out", str(src)]) == 0
    assert main(["generate", *TINY, "--set", "data_seed=9", "--out", str(dst)]) == 0
    out = tmp_path / "run"
    args = ["run", *TINY, "--set", "source=csv", "--set", f"data_dir={src}",
            "--set", f"test_data_dir={dst}", "--set", "test_label_map=0:2,1:1,2:0",
            "--set", "folds=0,1>0,1", "--set", "methods=FedAvg", "--out", str(out)]
    assert main(args) == 0
    assert len((out / "results.csv").read_text().splitlines()) == 2
    # cross-source folds must be explicit
    assert main([*args[:-2], "--set", "folds=auto"]) == 1


def test_failed_cells_recorded_exit_2(tmp_path):
    out = tmp_path / "run"
    code = main(["run", *TINY, "--set", "q_query=4", "--set", "methods=FedAvg", "--out", str(out)])
    assert code == 2
    assert "nan" in (out / "results.csv").read_text()
    assert "failed_cell" in (out / "manifest.txt").read_text()


def test_inspect_paper_checkpoint(tmp_path, capsys):
    path = tmp_path / "p.bin"
    save_params(build(PAPER_SPEC, 0), path)
    assert main(["inspect", str(path)]) == 0
    out = capsys.readouterr().out
    assert f"spec hash: {PAPER_SPEC.digest().hex()}" in out
    assert "flatten length: 4096" in out
    assert "predictor: 4096 -> 256 -> 10" in out
    assert "encoder.conv1.weight" in out and "shape=(16, 1, 3)" in out
    assert "hash verified" in out


def test_inspect_corrupt_files(tmp_path, capsys):
    path = tmp_path / "p.bin"
    save_params(build(PAPER_SPEC, 0), path)
    raw = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[: len(raw) // 2])
    assert main(["inspect", str(tmp_path / "t.bin")]) == 1
    assert "corrupt checkpoint" in capsys.readouterr().err
    (tmp_path / "m.bin").write_bytes(b"NOTACKPT" + raw[8:])
    assert main(["inspect", str(tmp_path / "m.bin")]) == 1
    assert "magic" in capsys.readouterr().err


def test_console_entry_point():
    exe = shutil.which("refml")
    assert exe is not None
    res = subprocess.run([exe, "run", "--config", "desk", "--dry-run"], capture_output=True, text=True)
    assert res.returncode == 0 and "n_way = 4" in res.stdout

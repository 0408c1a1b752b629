import csv
import hashlib
import json
import subprocess
import sys

import pytest

from leo_rach.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, UsageError, main, parse_args


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Toy dataset plus a model trained on it."""
    root = tmp_path_factory.mktemp("toy")
    assert main(["gen-data", "--seed", "3", "--out", str(root / "data"),
                 "--set", "n_per_class_per_snr=8", "--set", "snr_grid=[-10, -12]"]) == EXIT_OK
    assert main(["train", "--seed", "3", "--out", str(root / "model"),
                 "--set", f"dataset={root / 'data' / 'dataset.bin'}", "--set", "epochs=2"]) == EXIT_OK
    return root


def test_parse_config_then_overrides(tmp_path):
    base = tmp_path / "base"
    base.write_text(json.dumps({"n_users": 50, "scheme": "withhold"}))
    rc = parse_args(["simulate", "--seed", "1", "--config", str(base), "--set", "n_users=200"])
    assert rc.params["n_users"] == 200
    assert rc.params["scheme"] == "withhold"
    assert rc.seed == 1


def test_unknown_key_rejected(capsys):
    assert main(["simulate", "--seed", "1", "--set", "n_userz=5"]) == EXIT_USAGE
    assert "n_userz" in capsys.readouterr().err


def test_unknown_key_in_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"epochz": 3}')
    with pytest.raises(UsageError, match="epochz"):
        parse_args(["train", "--seed", "0", "--config", str(cfg), "--set", "dataset=x"])


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate", "--set", "n_users=3"],  # no seed
        ["simulate", "--seed", "1", "--set", "novalue"],
        ["simulate", "--seed", "1", "--config", "/nonexistent/cfg.json"],
        ["train", "--seed", "1"],  # no dataset
        ["frobnicate", "--seed", "1"],
    ],
)
def test_usage_errors(argv, tmp_path, capsys):
    assert main([*argv, "--out", str(tmp_path)] if argv[0] != "frobnicate" else argv) == EXIT_USAGE


def test_malformed_config_file(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{not json")
    assert main(["simulate", "--seed", "1", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_USAGE


def test_train_emits_three_artifacts(toy):
    model = toy / "model"
    for name in ("weights.bin", "loss_history.csv", "confusion.csv", "manifest.json"):
        assert (model / name).exists()
    hist = read_rows(model / "loss_history.csv")
    assert [r["epoch"] for r in hist] == ["1", "2"]


def test_manifest_checksums(toy):
    for sub in ("data", "model"):
        man = json.loads((toy / sub / "manifest.json").read_text())
        assert man["seed"] == 3
        for name, digest in man["artifacts"].items():
            assert hashlib.sha256((toy / sub / name).read_bytes()).hexdigest() == digest
        text = json.dumps(man["config"], sort_keys=True)
        assert man["config_sha256"] == hashlib.sha256(text.encode()).hexdigest()


def test_eval_reports_per_snr(toy, tmp_path):
    out = tmp_path / "eval"
    argv = ["eval", "--seed", "0", "--out", str(out),
            "--set", f"weights={toy / 'model' / 'weights.bin'}", "--set", f"dataset={toy / 'data' / 'dataset.bin'}"]
    assert main(argv) == EXIT_OK
    rows = read_rows(out / "eval.csv")
    assert [float(r["snr_db"]) for r in rows] == [-12.0, -10.0]
    assert all(0.0 <= float(r["accuracy"]) <= 1.0 for r in rows)


def test_eval_refuses_mismatched_k(toy, tmp_path, capsys):
    assert main(["gen-data", "--seed", "1", "--out", str(tmp_path / "k3"), "--set", "k_max=3",
                 "--set", "n_per_class_per_snr=2", "--set", "snr_grid=[-10]"]) == EXIT_OK
    argv = ["eval", "--seed", "0", "--out", str(tmp_path / "e"),
            "--set", f"weights={toy / 'model' / 'weights.bin'}", "--set", f"dataset={tmp_path / 'k3' / 'dataset.bin'}"]
    assert main(argv) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "K=6" in err and "K=3" in err
    assert not any((tmp_path / "e").iterdir())


def test_runtime_failure_cleans_outputs(tmp_path, capsys):
    out = tmp_path / "x"
    assert main(["simulate", "--seed", "1", "--out", str(out), "--set", "detector=trained_classifier"]) == EXIT_RUNTIME
    assert "weights" in capsys.readouterr().err
    assert list(out.iterdir()) == []


def test_simulate_with_trace(tmp_path):
    out = tmp_path / "s"
    assert main(["simulate", "--seed", "2", "--out", str(out), "--set", "n_users=20", "--set", "trace=true"]) == EXIT_OK
    (row,) = read_rows(out / "metrics.csv")
    assert row["n_users"] == "20" and row["rep"] == "0"
    assert len((out / "trace.jsonl").read_text().splitlines()) == 20


def test_simulate_with_trained_classifier(toy, tmp_path):
    out = tmp_path / "s"
    argv = ["simulate", "--seed", "2", "--out", str(out), "--set", "n_users=10", "--set", "n_slots=20",
            "--set", "detector=trained_classifier",
            "--set", f"weights={toy / 'model' / 'weights.bin'}", "--set", f"confusion={toy / 'model' / 'confusion.csv'}"]
    assert main(argv) == EXIT_OK
    assert read_rows(out / "metrics.csv")[0]["detector"] == "trained_classifier"


def test_sweep_row_counts(tmp_path):
    out = tmp_path / "w"
    argv = ["sweep", "--seed", "4", "--out", str(out), "--set", "user_counts=[10,20,30]",
            "--set", "n_reps=2", "--set", "n_slots=100"]
    assert main(argv) == EXIT_OK
    assert len(read_rows(out / "metrics.csv")) == 3 * 3 * 2
    assert len(read_rows(out / "summary.csv")) == 3 * 3


@pytest.mark.parametrize(
    "argv",
    [
        ["sweep", "--set", "user_counts=[10,40]", "--set", "n_reps=2", "--set", "n_slots=100"],
        ["gen-data", "--set", "n_per_class_per_snr=4", "--set", "snr_grid=[-10]"],
        ["simulate", "--set", "n_users=30"],
    ],
)
def test_identical_invocations_are_byte_identical(tmp_path, argv):
    outs = []
    for i in range(2):
        out = tmp_path / str(i)
        assert main([argv[0], "--seed", "9", "--out", str(out), *argv[1:]]) == EXIT_OK
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1]


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "leo_rach", "simulate", "--seed", "1", "--out", str(tmp_path), "--set", "n_users=3"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "leo_rach", "simulate"], capture_output=True, text=True)
    assert proc.returncode == 2

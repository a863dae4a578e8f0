import hashlib
import json
import subprocess
import sys


from selfprog.cli import main

FAST_CLS = [
    "--dataset", "blobs", "--blob-classes", "3", "--train-size", "150", "--eval-size", "60",
    "--eval-epochs", "1", "--workers", "1", "--no-plots",
]


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_dataset_count_and_determinism(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen-dataset", "--family", "transformer", "--count", "500", "--seed", "7", "--out", str(a)]) == 0
    assert main(["gen-dataset", "--family", "transformer", "--count", "500", "--seed", "7", "--out", str(b)]) == 0
    assert len(a.read_text().splitlines()) == 500
    assert _sha(a) == _sha(b)
    assert json.loads((tmp_path / "a.jsonl.manifest.json").read_text())["command"] == "gen-dataset"


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["gen-dataset", "--count", "5"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["self-program", "--episodes", "-1", "--out", str(tmp_path)]) == 2
    assert main(["self-program", "--refiner", "external", "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_runtime_failures_exit_1(tmp_path):
    assert main(["emit-metrics", "--logs", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "m")]) == 1
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert main(["train-refiner", "--pairs-file", str(bad), "--out", str(tmp_path / "r.ckpt")]) == 1


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# defaults for a tiny run\ncount = 30\nseed = 3\n")
    out = tmp_path / "p.jsonl"
    assert main(["gen-dataset", "--config", str(cfg), "--seed", "4", "--out", str(out)]) == 0
    manifest = json.loads((tmp_path / "p.jsonl.manifest.json").read_text())
    assert manifest["config"]["count"] == 30 and manifest["config"]["seed"] == 4
    cfg.write_text("colour = blue\n")
    assert main(["gen-dataset", "--config", str(cfg), "--count", "3", "--out", str(out)]) == 2


def test_self_program_zero_episodes(tmp_path):
    out = tmp_path / "run"
    args = ["self-program", "--episodes", "0", "--pair-count", "64", "--subset-size", "32", "--out", str(out)]
    assert main(args) == 0
    assert (out / "episodes.jsonl").read_text() == ""
    assert "config.d_ff = 1024" in (out / "final_spec.txt").read_text()


def test_program_classifier_outputs_and_replay(tmp_path):
    out = tmp_path / "run"
    assert main(["program-classifier", "--episodes", "2", "--candidates", "3", *FAST_CLS, "--out", str(out)]) == 0
    for name in ("episodes.jsonl", "final_spec.txt", "episodes.csv", "loss_curves.csv", "design_params.csv", "param_counts.csv", "manifest.json"):
        assert (out / name).exists(), name
    again = tmp_path / "replayed"
    assert main(["replay", "--manifest", str(out / "manifest.json"), "--out", str(again)]) == 0
    for path in sorted(out.iterdir()):
        if path.name != "timings.jsonl":
            assert _sha(path) == _sha(again / path.name), path.name


def test_sweep_mode_emits_grid(tmp_path):
    out = tmp_path / "sweep"
    args = ["program-classifier", "--sweep", "candidates=1,2", "--sweep-episodes", "1,2", *FAST_CLS, "--out", str(out)]
    assert main(args) == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "n_candidates,n_episodes,total_candidates,seed,accuracy,param_count"
    assert len(lines) == 5


def test_eval_spec_reports_json(tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text("c0 n1 s16\n")
    out = tmp_path / "report.json"
    assert main(["eval-spec", "--track", "classifier", "--spec", str(spec), *FAST_CLS[:-3], "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["train_status"] == "ok" and 0 <= report["accuracy"] <= 1


def test_gen_images_roundtrip_through_idx(tmp_path):
    out = tmp_path / "imgs"
    assert main(["gen-images", "--kind", "glyphs", "--count", "40", "--out", str(out)]) == 0
    run = tmp_path / "run"
    args = ["program-classifier", "--dataset", "idx", "--data-dir", str(out), "--train-size", "30", "--eval-size", "10",
            "--episodes", "1", "--candidates", "1", "--eval-epochs", "1", "--workers", "1", "--no-plots", "--out", str(run)]
    assert main(args) == 0
    digests = json.loads((run / "manifest.json").read_text())["dataset_digests"]
    assert all(v.startswith("sha256:") for v in digests.values())


def test_console_entry_point_help():
    proc = subprocess.run([sys.executable, "-m", "selfprog.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for command in ("gen-dataset", "train-refiner", "self-program", "program-classifier", "eval-spec", "emit-metrics"):
        assert command in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "selfprog.cli", "self-program"], capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stdout == ""


def test_sweep_accepts_seed_zero(tmp_path):
    out = tmp_path / "sweep"
    args = ["program-classifier", "--sweep", "candidates=1", "--sweep-episodes", "1", "--sweep-seeds", "0,3", *FAST_CLS, "--out", str(out)]
    assert main(args) == 0
    rows = (out / "sweep.csv").read_text().splitlines()[1:]
    assert [r.split(",")[3] for r in rows] == ["0", "3"]
    assert main([*args[:-2], "--sweep-seeds", "-1", "--out", str(out)]) == 2


def test_program_classifier_with_refiner_checkpoint(tmp_path):
    ckpt = tmp_path / "refiner.ckpt"
    context = ["--input-shape", "8,8,1", "--num-classes", "3"]
    train = ["train-refiner", "--family", "cnn", "--pair-count", "200", *context, "--out", str(ckpt)]
    assert main(train) == 0
    out = tmp_path / "run"
    run = ["program-classifier", "--episodes", "2", "--candidates", "2", "--refiner", "learned",
           "--refiner-checkpoint", str(ckpt), *FAST_CLS, "--out", str(out)]
    assert main(run) == 0
    logs = [json.loads(line) for line in (out / "episodes.jsonl").read_text().splitlines()]
    assert len(logs) == 2 and logs[0]["refiner"] == {"backend": "learned", "pretrained": True}
    manifest = json.loads((out / "manifest.json").read_text())
    assert "refiner_checkpoint" in manifest["dataset_digests"]
    # a checkpoint trained for another input shape is refused
    other = tmp_path / "other.ckpt"
    assert main(["train-refiner", "--family", "cnn", "--pair-count", "50", "--out", str(other)]) == 0
    assert main([*run[:-2], "--refiner-checkpoint", str(other), "--out", str(tmp_path / "x")]) == 2

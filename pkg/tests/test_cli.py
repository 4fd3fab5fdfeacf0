import hashlib
import json
import shutil
import subprocess
import sys

import pytest

from diagfusion.cli import main
from diagfusion.telemetry import load_deployment, load_labels

TOY_SIM = {"cases": {"count": 30}}
TOY_RUN = {"embed_epochs": 5, "gnn_epochs": 60, "target_size": 100, "hidden": 16}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def tree_digest(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["simulate", write_json(root / "sim.json", TOY_SIM), str(root / "data")]) == 0
    cfg = write_json(root / "run.json", TOY_RUN)
    assert main(["train", str(root / "data"), str(root / "models"), "--config", cfg]) == 0
    return root


def test_simulate_writes_five_files(toy):
    names = sorted(p.name for p in (toy / "data").iterdir())
    assert names == ["deployment.json", "labels.jsonl", "logs.jsonl", "metrics.jsonl", "traces.jsonl"]


def test_simulate_rerun_identical(toy, tmp_path):
    assert main(["simulate", str(toy / "sim.json"), str(tmp_path / "again")]) == 0
    assert tree_digest(tmp_path / "again") == tree_digest(toy / "data")


def test_simulate_bad_topology_exit_2(tmp_path, capsys):
    bad = {"topology": [{"caller": "frontend", "callee": "auth"}, {"caller": "auth", "callee": "frontend"}]}
    assert main(["simulate", write_json(tmp_path / "bad.json", bad), str(tmp_path / "out")]) == 2
    assert "cycle" in capsys.readouterr().err


def test_train_outputs_and_manifest(toy):
    models = toy / "models"
    for name in ("embedding.json", "gnn.json", "parse_tree.json", "graph.json", "manifest.json"):
        assert (models / name).exists()
    assert (models / "cache" / "events.jsonl").exists()
    manifest = json.loads((models / "manifest.json").read_text())
    assert manifest["dim"] == 100 and manifest["augment"] is True and manifest["seed"] == 0
    assert manifest["hyperparameters"]["gnn_epochs"] == 60
    assert manifest["train_cases"] == 20


def test_train_is_byte_reproducible_and_flags_override(toy, tmp_path):
    out = tmp_path / "m"
    args = ["train", str(toy / "data"), str(out), "--config", str(toy / "run.json")]
    assert main(args) == 0
    for name in ("embedding.json", "gnn.json", "parse_tree.json", "graph.json", "manifest.json"):
        assert (out / name).read_bytes() == (toy / "models" / name).read_bytes()

    out2 = tmp_path / "m2"
    assert main(args[:2] + [str(out2)] + args[3:] + ["--dim", "12", "--no-augment", "--k-hops", "1",
                                                     "--seed", "3", "--lead-minutes", "5"]) == 0
    manifest = json.loads((out2 / "manifest.json").read_text())
    assert manifest["dim"] == 12 and manifest["augment"] is False and manifest["seed"] == 3
    assert manifest["hyperparameters"]["k_hops"] == 1 and manifest["hyperparameters"]["lead_minutes"] == 5
    assert manifest["hyperparameters"]["gnn_epochs"] == 60     # still from the file


def test_train_repeat(toy, tmp_path):
    cfg = write_json(tmp_path / "c.json", {**TOY_RUN, "dim": 8, "gnn_epochs": 5})
    assert main(["train", str(toy / "data"), str(tmp_path / "r"), "--config", cfg, "--repeat", "2"]) == 0
    seeds = [json.loads((tmp_path / "r" / f"rep-{i}" / "manifest.json").read_text())["seed"] for i in range(2)]
    assert seeds == [0, 1]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_4(toy, tmp_path, capsys):
    cfg = write_json(tmp_path / "c.json", {**TOY_RUN, "embed_lr": 1e305})
    assert main(["train", str(toy / "data"), str(tmp_path / "x"), "--config", cfg]) == 4
    assert "numeric failure" in capsys.readouterr().err


def test_train_config_errors_exit_2(toy, tmp_path):
    assert main(["train", str(toy / "data"), str(tmp_path / "x"),
                 "--config", write_json(tmp_path / "c.json", {"dimm": 3})]) == 2
    assert main(["train", str(toy / "data"), str(tmp_path / "x"), "--dim", "0"]) == 2
    assert main(["train", str(tmp_path / "nowhere"), str(tmp_path / "x")]) == 2


def test_train_missing_labels_exit_3(toy, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(toy / "data", data)
    (data / "labels.jsonl").unlink()
    assert main(["train", str(data), str(tmp_path / "x")]) == 3


def first_test_case(toy):
    dep = load_deployment(toy / "data" / "deployment.json")
    return load_labels(toy / "data" / "labels.jsonl", dep)[-1]


def test_diagnose_window(toy, tmp_path, capsys):
    case = first_test_case(toy)
    out = tmp_path / "d.json"
    assert main(["diagnose", str(toy / "data"), str(toy / "models"), str(case.start), str(case.end),
                 "-o", str(out)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads(out.read_text())
    assert 1 <= len(printed["ranked_instances"]) <= 5
    assert abs(sum(g["p"] for g in printed["ranked_groups"]) - 1) < 1e-9
    assert abs(sum(t["p"] for t in printed["failure_type"]) - 1) < 1e-9


def test_diagnose_empty_window_exit_3(toy, capsys):
    far = 10 ** 13
    assert main(["diagnose", str(toy / "data"), str(toy / "models"), str(far), str(far + 60_000)]) == 3
    assert "empty diagnosis window" in capsys.readouterr().err


def test_diagnose_without_metric_files(toy, tmp_path):
    data = tmp_path / "data"
    shutil.copytree(toy / "data", data)
    (data / "metrics.jsonl").unlink()
    case = first_test_case(toy)
    assert main(["diagnose", str(data), str(toy / "models"), str(case.start), str(case.end),
                 "-o", str(tmp_path / "d.json")]) == 0
    assert main(["diagnose", str(toy / "data"), str(toy / "models"), str(case.start), str(case.end),
                 "--disable-modality", "metric", "-o", str(tmp_path / "d2.json")]) == 0


def test_diagnose_missing_models_exit_3(toy, tmp_path):
    assert main(["diagnose", str(toy / "data"), str(tmp_path), "0", "1"]) == 3


def test_evaluate_report(toy, tmp_path):
    out = tmp_path / "eval"
    assert main(["evaluate", str(toy / "data"), str(toy / "models"), "-o", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    values = [*report["a_at_k"].values(), report["avg_at_5"], report["precision"], report["recall"], report["f1"]]
    assert all(0 <= v <= 1 for v in values)
    assert report["avg_at_5"] == sum(report["a_at_k"][str(k)] for k in range(1, 6)) / 5
    assert report["n_cases"] == 10
    assert len((out / "cases.csv").read_text().splitlines()) == 11


PERFECT_SIM = {"groups": [{"name": "web", "instances": 1}, {"name": "db", "instances": 1}],
               "topology": [{"caller": "web", "callee": "db"}], "n_hosts": 2,
               "cases": {"count": 20, "mix": {"memory_up": 1, "login_error": 1}}}
PERFECT_RUN = {"embed_epochs": 20, "gnn_epochs": 200, "target_size": 50, "hidden": 16, "dim": 16}


def test_evaluate_perfect_toy_model(tmp_path):
    assert main(["simulate", write_json(tmp_path / "s.json", PERFECT_SIM), str(tmp_path / "data")]) == 0
    assert main(["train", str(tmp_path / "data"), str(tmp_path / "m"),
                 "--config", write_json(tmp_path / "r.json", PERFECT_RUN)]) == 0
    assert main(["evaluate", str(tmp_path / "data"), str(tmp_path / "m"), str(tmp_path / "data" / "labels.jsonl"),
                 "-o", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["avg_at_5"] == 1.0 and report["f1"] == 1.0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "diagfusion.cli", "simulate", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "config_path" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "diagfusion.cli", "train"], capture_output=True, text=True)
    assert proc.returncode == 2

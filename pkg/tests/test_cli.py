import json
import subprocess
import sys

import pytest

from ffsense import cli
from ffsense.analysis import read_dump
from ffsense.fixtures import write_reference_fixture, write_synthetic_dataset
from ffsense.report import REPORT_FILES

SMALL_CONFIG = """\
seed = 5
epochs = 25
batch_size = 4
learning_rate = 0.0003
input_size = 32
stage_blocks = 1,1
base_width = 8
bridge_width = 8
head_epochs = 20
head_hidden = 32
"""


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def reference(tmp_path_factory):
    return write_reference_fixture(tmp_path_factory.mktemp("reference"))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run split/train/predict/analyze/report once on a small synthetic set."""
    root = tmp_path_factory.mktemp("pipeline")
    manifest = write_synthetic_dataset(root / "data", n_subjects=4, n_poses=4, size=32)
    (root / "small.cfg").write_text(SMALL_CONFIG)
    steps = [
        ["split", "--manifest", manifest, "--out", root / "split.json", "--seed", 1],
        ["train", "--manifest", manifest, "--split", root / "split.json", "--config", root / "small.cfg",
         "--out", root / "ckpt"],
        ["predict", "--checkpoints", root / "ckpt", "--manifest", manifest, "--split", root / "split.json",
         "--subset", "all", "--out", root / "preds.jsonl"],
        ["analyze", "--predictions", root / "preds.jsonl", "--manifest", manifest, "--split", root / "split.json",
         "--out", root / "analysis"],
        ["report", "--analysis", root / "analysis", "--out", root / "reports"],
    ]
    codes = [cli.main([str(a) for a in step]) for step in steps]
    return root, manifest, codes


def test_validate_reference_manifest(capsys, reference):
    code, out, _ = run(capsys, "validate", "--manifest", reference[0])
    assert code == 0
    assert out.startswith("OK: 102 subjects, 2040 images")


def test_validate_dangling_subject(capsys, tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text(json.dumps({"kind": "image", "image_id": "i", "subject_id": "s99", "pose": "x"}) + "\n")
    code, _, err = run(capsys, "validate", "--manifest", path)
    assert code == 1 and "s99" in err


def test_validate_unreadable_path(capsys, tmp_path):
    code, _, err = run(capsys, "validate", "--manifest", tmp_path / "absent.jsonl")
    assert code == 2 and "absent.jsonl" in err


def test_pipeline_exit_codes(pipeline):
    assert pipeline[2] == [0, 0, 0, 0, 0]


def test_train_outputs(pipeline):
    root = pipeline[0] / "ckpt"
    for name in ("identity.ckpt", "age.ckpt", "gender.ckpt", "ethnicity.ckpt", "identity_report.json",
                 "age_report.json", "gender_report.json", "ethnicity_report.json", "train_summary.json"):
        assert (root / name).is_file(), name
    assert any((root / "feature_cache").rglob("index.json"))
    report = json.loads((root / "identity_report.json").read_text())
    assert len(report["epochs"]) == 25 and report["final"]["train_accuracy"] >= 0.99


def test_analysis_agrees_with_training_report(pipeline):
    root = pipeline[0]
    trained = json.loads((root / "ckpt" / "identity_report.json").read_text())["final"]["test_accuracy"]
    analyzed = json.loads((root / "analysis" / "identity_classification_test.json").read_text())["accuracy"]
    assert analyzed == trained


def test_predict_keeps_input_order(pipeline):
    root = pipeline[0]
    split = json.loads((root / "split.json").read_text())
    assert [r.image_id for r in read_dump(root / "preds.jsonl")] == split["train"] + split["test"]


def test_report_files(pipeline):
    assert sorted(p.name for p in (pipeline[0] / "reports").iterdir()) == sorted(REPORT_FILES)
    assert len(REPORT_FILES) == 11


def test_report_rerun_is_byte_identical(capsys, pipeline):
    root = pipeline[0]
    code, _, _ = run(capsys, "report", "--analysis", root / "analysis", "--out", root / "again")
    assert code == 0
    for name in REPORT_FILES:
        assert (root / "again" / name).read_bytes() == (root / "reports" / name).read_bytes()


def test_train_missing_config_key(capsys, pipeline, tmp_path):
    root, manifest, _ = pipeline
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL_CONFIG.replace("epochs = 25\n", ""))
    code, _, err = run(capsys, "train", "--manifest", manifest, "--split", root / "split.json",
                       "--config", cfg, "--out", tmp_path / "out")
    assert code == 1 and "epochs" in err


def test_predict_empty_id_list(capsys, pipeline, tmp_path):
    root, manifest, _ = pipeline
    ids = tmp_path / "ids.txt"
    ids.write_text("")
    code, _, _ = run(capsys, "predict", "--checkpoints", root / "ckpt", "--manifest", manifest,
                     "--ids", ids, "--out", tmp_path / "p.jsonl")
    assert code == 0 and (tmp_path / "p.jsonl").read_text() == ""


def test_predict_corrupt_image(capsys, pipeline, tmp_path):
    root, manifest, _ = pipeline
    data = tmp_path / "data"
    data.mkdir()
    lines = manifest.read_text().splitlines()
    victim, rewritten = None, []
    for line in lines:
        obj = json.loads(line)
        if obj["kind"] == "image" and victim is None:
            victim = obj["image_id"]
            (data / "broken.png").write_bytes(b"definitely not a png")
            obj["uri"] = "broken.png"
        elif obj["kind"] == "image":
            obj["uri"] = str(manifest.parent / obj["uri"])
        rewritten.append(json.dumps(obj) + "\n")
    (data / "manifest.jsonl").write_text("".join(rewritten))
    ids = tmp_path / "ids.txt"
    second = json.loads(lines[-1])["image_id"]
    ids.write_text(f"{victim}\n{second}\n")
    code, _, _ = run(capsys, "predict", "--checkpoints", root / "ckpt", "--manifest", data / "manifest.jsonl",
                     "--ids", ids, "--out", tmp_path / "p.jsonl")
    records = [json.loads(x) for x in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert code == 1
    assert records[0]["image_id"] == victim and "error" in records[0]
    assert records[1]["image_id"] == second and "error" not in records[1]


def test_analyze_reference_dump(capsys, reference, tmp_path):
    manifest, dump = reference
    code, out, _ = run(capsys, "analyze", "--predictions", dump, "--manifest", manifest, "--out", tmp_path)
    assert code == 0
    assert "breaking filters (d > 0.75): Hipster Look Filter Snapchat\n" in out
    distortion = json.loads((tmp_path / "distortion.json").read_text())
    assert [f for f, row in distortion["rows"].items() if row["breaking"]] == ["hipster_look"]


def test_analyze_unfiltered_copy_has_zero_distortion(capsys, reference, tmp_path):
    manifest, dump = reference
    records = [json.loads(x) for x in dump.read_text().splitlines()]
    baseline = {r["subject_id"]: r for r in records if r["image_id"].endswith("_neutral_front")}
    for r in records:
        if r["filter_id"] != "none":
            r["identity_probs"] = baseline[r["subject_id"]]["identity_probs"]
            r["predicted_identity"] = baseline[r["subject_id"]]["predicted_identity"]
    flat = tmp_path / "flat.jsonl"
    flat.write_text("".join(json.dumps(r) + "\n" for r in records))
    code, out, _ = run(capsys, "analyze", "--predictions", flat, "--manifest", manifest, "--out", tmp_path / "a")
    assert code == 0 and "none" in out
    rows = json.loads((tmp_path / "a" / "distortion.json").read_text())["rows"]
    assert all(row["mean_d"] == 0 for row in rows.values())


def test_analyze_missing_baseline_names_subject(capsys, reference, tmp_path):
    manifest, dump = reference
    kept = [x for x in dump.read_text().splitlines() if json.loads(x)["image_id"] != "s001_neutral_front"]
    partial = tmp_path / "partial.jsonl"
    partial.write_text("\n".join(kept) + "\n")
    code, _, err = run(capsys, "analyze", "--predictions", partial, "--manifest", manifest, "--out", tmp_path / "a")
    assert code == 1 and "s001" in err


def test_report_missing_inputs(capsys, tmp_path):
    (tmp_path / "distortion.json").write_text("{}")
    code, _, err = run(capsys, "report", "--analysis", tmp_path, "--out", tmp_path / "r")
    assert code == 2
    assert "age_deviation.json" in err and "analysis.json" in err and "distortion.json," not in err


def test_console_entry_point(tmp_path):
    done = subprocess.run([sys.executable, "-m", "ffsense.cli", "validate", "--manifest", tmp_path / "x"],
                          capture_output=True, text=True)
    assert done.returncode == 2

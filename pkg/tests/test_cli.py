import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from boxood.cli import main
from boxood.dataset import Annotation, BoundingBox, DetectionDataset, ImageRecord, load_dataset, save_dataset
from boxood.detector import CropDetector, TrainConfig, TrainResult, read_training_log, save_checkpoint
from boxood.metrics import TABLE_HEADER, MetricsReport
from boxood.prompts import TEMPLATE_SHA256
from boxood.shapes import make_desk_fixture
from boxood.synthesis import SynthesisManifest

from stubs import generator_service


@pytest.fixture(scope="module")
def shapes(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes")
    make_desk_fixture(root / "data", seed=5, n_train=24, n_test=10, n_ood=10)
    return root


def write_config(root, name="cfg.yaml", **over):
    cfg = {
        "paths": {"in_annotations": "data/train/annotations.json",
                  "in_test_annotations": "data/test/annotations.json",
                  "ood_test_annotations": "data/ood_raw/annotations.json",
                  "output_root": "runs"},
        "strategy": "generic",
        "n_outlier_images": 10,
        "train": {"epochs": 3, "lr_decay_epochs": [1, 2]},
        "seed": 1,
    }
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(cfg.get(k), dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    p = root / name
    p.write_text(yaml.safe_dump(cfg))
    return p


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_prompts_lists_twenty(capsys):
    code, out, _ = run(["prompts"], capsys)
    lines = out.splitlines()
    assert code == 0 and len(lines) == 20
    assert "made of plastic that constantly reconfigures" in lines[8]
    assert lines[0].startswith(" 1  ")


def test_prompts_raw_checksum(capsys):
    code, out, _ = run(["prompts", "--raw"], capsys)
    assert code == 0 and hashlib.sha256(out.encode()).hexdigest() == TEMPLATE_SHA256


def test_console_script_module_entry():
    res = subprocess.run([sys.executable, "-m", "boxood.cli", "prompts"], capture_output=True, text=True)
    assert res.returncode == 0 and len(res.stdout.splitlines()) == 20


def test_distance_without_sigma_fails_before_work(shapes, tmp_path, capsys):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path, strategy="distance")
    code, _, err = run(["synthesize", "-c", cfg], capsys)
    assert code == 2
    payload = json.loads(err)
    assert set(payload) == {"stage", "code", "message"}
    assert payload["code"] == 2 and "sigma" in payload["message"]
    assert not (tmp_path / "runs").exists()


def test_unknown_key_is_config_error(shapes, tmp_path, capsys):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path, bogus=1)
    code, _, err = run(["train", "-c", cfg], capsys)
    assert code == 2 and "bogus" in json.loads(err)["message"]


def test_missing_paths_is_config_error(tmp_path, capsys):
    cfg = write_config(tmp_path)
    code, _, err = run(["synthesize", "-c", cfg], capsys)
    assert code == 2 and json.loads(err)["stage"] == "synthesize"
    assert not (tmp_path / "runs").exists()


def test_synthesize_and_idempotence(shapes, tmp_path, capsys):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path)
    code, out, _ = run(["synthesize", "-c", cfg], capsys)
    assert code == 0
    summary = json.loads(out)
    synth = tmp_path / "runs" / summary["run_id"] / "generic" / "synth"
    assert len(list((synth / "ood_images").glob("*.png"))) == 10
    assert len(SynthesisManifest.read(synth / "manifest.jsonl")) == 10
    assert summary["variants"][0]["images"] == 10 and summary["variants"][0]["failures"] == 0
    stamp = (synth / "manifest.jsonl").stat().st_mtime_ns
    code, out, _ = run(["synthesize", "-c", cfg], capsys)
    assert code == 0 and json.loads(out)["variants"][0]["status"] == "already complete"
    assert (synth / "manifest.jsonl").stat().st_mtime_ns == stamp


def test_sigma_sweep_makes_one_directory_per_value(shapes, tmp_path, capsys):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path, strategy="distance", sigma=[0.01, 0.1, 1.0, 2.5, 5.0], n_outlier_images=2)
    code, out, _ = run(["synthesize", "-c", cfg], capsys)
    assert code == 0
    run_dir = tmp_path / "runs" / json.loads(out)["run_id"]
    assert sorted(p.name for p in run_dir.iterdir() if p.is_dir()) == \
        sorted(["sigma_0.01", "sigma_0.1", "sigma_1", "sigma_2.5", "sigma_5"])
    m = SynthesisManifest.read(run_dir / "sigma_2.5" / "synth" / "manifest.jsonl")
    assert {e.sigma for e in m.entries} == {2.5}


def test_train_without_synthesis_is_training_error(shapes, tmp_path, capsys):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path)
    code, _, err = run(["train", "-c", cfg], capsys)
    payload = json.loads(err)
    assert code == 4 and payload["stage"] == "train"
    assert "OOD" in payload["message"] and "synthesize" in payload["message"]


def test_full_scale_is_emitted_not_run(tmp_path, capsys):
    code, out, _ = run(["train", "--full-scale"], capsys)
    assert code == 0
    full = yaml.safe_load(out)
    assert "faster" in json.dumps(full).lower()
    code, out, _ = run(["train", "--full-scale", tmp_path / "fs.yaml"], capsys)
    assert code == 0 and "not executed" in out and (tmp_path / "fs.yaml").is_file()


def test_env_overrides(shapes, tmp_path, capsys, monkeypatch):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path, n_outlier_images=2)
    _, out, _ = run(["synthesize", "-c", cfg], capsys)
    plain = json.loads(out)["run_id"]
    monkeypatch.setenv("BOXOOD_SEED", "77")
    with generator_service("remote-gen") as svc:
        monkeypatch.setenv("BOXOOD_GENERATOR_URL", svc.url)
        code, out, _ = run(["synthesize", "-c", cfg], capsys)
        assert code == 0 and len(svc.requests) >= 2
    rid = json.loads(out)["run_id"]
    assert rid != plain
    m = SynthesisManifest.read(tmp_path / "runs" / rid / "generic" / "synth" / "manifest.jsonl")
    assert {e.generator_id for e in m.entries} == {"remote-gen"}
    assert json.loads((tmp_path / "runs" / rid / "config.json").read_text())["seed"] == 77


def test_unreachable_generator_is_transport_error(shapes, tmp_path, capsys, monkeypatch):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path, n_outlier_images=2,
                       generator={"mock": False, "url": "http://127.0.0.1:9/", "retries": 0, "timeout": 1})
    code, _, err = run(["synthesize", "-c", cfg], capsys)
    assert code == 3 and json.loads(err)["code"] == 3


def test_end_to_end_small(shapes, tmp_path, capsys):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path, train={"epochs": 3, "lr_decay_epochs": [1, 2], "loss_variant": "bce"})
    assert run(["synthesize", "-c", cfg], capsys)[0] == 0
    code, out, _ = run(["train", "-c", cfg], capsys)
    assert code == 0
    info = json.loads(out)
    run_dir = tmp_path / "runs" / info["run_id"]
    assert [v["variant"] for v in info["variants"]] == ["generic", "baseline"]
    log = read_training_log(run_dir / "generic" / "train" / "training_log.csv")
    assert [r["epoch"] for r in log] == [1, 2, 3]

    code, out, _ = run(["evaluate", "-c", cfg], capsys)
    assert code == 0
    assert out.splitlines()[0] == "| " + " | ".join(TABLE_HEADER) + " |"
    rep = MetricsReport.from_json((run_dir / "generic" / "eval" / "report.json").read_text())
    assert 0 <= rep.auroc <= 100 and len(rep.config_digest) == 64
    assert rep.extra["baseline_crop_accuracy"] is not None
    for name in ("scores.csv", "row.md", "row.csv", "outliers.png"):
        assert (run_dir / "generic" / "eval" / name).is_file()
    code, out, _ = run(["report", "--run-dir", run_dir], capsys)
    assert code == 0 and "(published)" in out and "| generic |" in out
    code, out, _ = run(["report", "-c", cfg, "--no-reference"], capsys)
    assert code == 0 and "(published)" not in out

    # identical config reruns detect completed stages
    code, out, _ = run(["train", "-c", cfg], capsys)
    assert {v["status"] for v in json.loads(out)["variants"]} == {"already complete"}


def test_training_is_reproducible_across_runs(shapes, tmp_path, capsys):
    (tmp_path / "data").symlink_to(shapes / "data")
    logs = []
    for root in ("runs_a", "runs_b"):
        cfg = write_config(tmp_path, name=f"{root}.yaml", paths={"output_root": root}, train_baseline=False)
        assert run(["synthesize", "-c", cfg], capsys)[0] == 0
        code, out, _ = run(["train", "-c", cfg], capsys)
        assert code == 0
        rid = json.loads(out)["run_id"]
        logs.append(read_training_log(tmp_path / root / rid / "generic" / "train" / "training_log.csv"))
    assert logs[0] == logs[1]


# -- perfect separation -------------------------------------------------------

def _flat_dataset(root, color, cats, n, cat_id):
    (root / "images").mkdir(parents=True)
    images, anns = [], []
    for i in range(1, n + 1):
        Image.fromarray(np.full((64, 64, 3), color, np.uint8)).save(root / "images" / f"{i}.png")
        images.append(ImageRecord(i, f"images/{i}.png", 64, 64))
        anns.append(Annotation(i, BoundingBox(4 + i % 5, 6, 48, 50, cat_id)))
    ds = DetectionDataset(cats, images, anns, root=str(root))
    save_dataset(ds, root / "annotations.json")
    return ds


def _brightness_model():
    """Class-0 logit = 10 x mean brightness, so the energy falls as crops get brighter."""
    m = CropDetector(2)
    with torch.no_grad():
        m(torch.zeros(1, 3, 32, 32))
        for layer in m.backbone:
            if isinstance(layer, torch.nn.Conv2d):
                layer.weight.zero_()
                layer.weight[:, :, 1, 1] = 1.0 / layer.in_channels
                layer.bias.zero_()
        m.penultimate.weight.fill_(1.0 / m.penultimate.in_features)
        m.penultimate.bias.zero_()
        m.cls_head.weight.zero_()
        m.cls_head.weight[0].fill_(10.0 / m.cls_head.in_features)
        m.cls_head.bias.zero_()
        for p in m.ood_head.parameters():
            p.zero_()
        m.ood_head.fc1.weight[0, 0] = -1.0
        m.ood_head.fc2.weight[0, 0] = 1.0
    m.eval()
    return m


def test_evaluate_perfect_separation(tmp_path, capsys):
    cats = [(1, "circle"), (2, "square")]
    _flat_dataset(tmp_path / "train", 255, cats, 3, 1)
    _flat_dataset(tmp_path / "test", 255, cats, 8, 1)
    _flat_dataset(tmp_path / "ood", 0, [(1, "circle"), (2, "square"), (3, "triangle")], 6, 3)
    model = _brightness_model()
    save_checkpoint(TrainResult(model, model.ood_head.export(), [], TrainConfig(), cats), tmp_path / "m.pt")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"paths": {
        "in_annotations": "train/annotations.json", "in_test_annotations": "test/annotations.json",
        "ood_test_annotations": "ood/annotations.json", "output_root": "runs"}}))
    code, out, _ = run(["evaluate", "-c", cfg, "--checkpoint", tmp_path / "m.pt"], capsys)
    assert code == 0
    assert "| generic | 0.00 | 100.00 |" in out
    report = next((tmp_path / "runs").glob("*/generic/eval/report.json"))
    rep = MetricsReport.from_json(report.read_text())
    assert (rep.auroc, rep.fpr95, rep.counts) == (100.0, 0.0, (8, 6))


def test_evaluate_category_mismatch(tmp_path, capsys):
    cats3 = [(1, "circle"), (2, "square"), (3, "star")]
    _flat_dataset(tmp_path / "train", 255, cats3, 2, 1)
    _flat_dataset(tmp_path / "test", 255, cats3, 2, 1)
    _flat_dataset(tmp_path / "ood", 0, [(1, "triangle")], 2, 1)
    model = _brightness_model()
    save_checkpoint(TrainResult(model, model.ood_head.export(), [], TrainConfig(),
                                [(1, "circle"), (2, "square")]), tmp_path / "m.pt")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"paths": {
        "in_annotations": "train/annotations.json", "in_test_annotations": "test/annotations.json",
        "ood_test_annotations": "ood/annotations.json"}}))
    code, _, err = run(["evaluate", "-c", cfg, "--checkpoint", tmp_path / "m.pt"], capsys)
    assert code == 5 and "categories" in json.loads(err)["message"]


def test_evaluate_without_checkpoint(shapes, tmp_path, capsys):
    (tmp_path / "data").symlink_to(shapes / "data")
    cfg = write_config(tmp_path)
    code, _, err = run(["evaluate", "-c", cfg], capsys)
    assert code == 5 and "train" in json.loads(err)["message"]


def test_convert_voc_cli(tmp_path, capsys):
    base = tmp_path / "VOC2012"
    (base / "Annotations").mkdir(parents=True)
    (base / "ImageSets" / "Main").mkdir(parents=True)
    (base / "ImageSets" / "Main" / "val.txt").write_text("a\n")
    (base / "Annotations" / "a.xml").write_text(
        "<annotation><size><width>10</width><height>10</height></size><object><name>cat</name>"
        "<difficult>0</difficult><bndbox><xmin>1</xmin><ymin>1</ymin><xmax>5</xmax><ymax>6</ymax>"
        "</bndbox></object></annotation>")
    code, out, _ = run(["convert-voc", tmp_path, "--set", "VOC2012:val", "--out", tmp_path / "o.json"], capsys)
    assert code == 0 and json.loads(out)["annotations"] == 1
    assert load_dataset(tmp_path / "o.json").annotations[0].box.w == 5
    code, _, err = run(["convert-voc", tmp_path, "--set", "VOC2012", "--out", tmp_path / "o.json"], capsys)
    assert code == 2


def test_make_shapes_cli(tmp_path, capsys):
    code, out, _ = run(["make-shapes", tmp_path / "fx", "--n-train", 4, "--n-test", 2, "--n-ood", 2], capsys)
    assert code == 0
    paths = json.loads(out)
    assert load_dataset(paths["train"]).counts()[1] == 4

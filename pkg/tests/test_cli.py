import csv
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from forgeloc.cli import main
from forgeloc.config import parse_kv
from forgeloc.imageio import write_image
from forgeloc.metrics import image_auc

SYNTH = ["--set", "pristine=20", "--set", "splice=2", "--set", "copymove=2"]
PHASE = {
    1: ["--set", "layers=3", "--set", "width=4", "--set", "steps=2"],
    2: ["--set", "widths=8,8,16,16", "--set", "heads=1,1,2,2", "--set", "sr_ratios=4,2,1,1",
        "--set", "decoder_dim=8", "--set", "epochs=1", "--set", "batch_size=8", "--set", "crop_size=64"],
    3: ["--set", "hidden=16", "--set", "decoder_dim=8", "--set", "epochs=1", "--set", "batch_size=8"],
}


def _train(manifest, out, phase, seed=0, extra=()):
    return main(["train", "--phase", str(phase), "--manifest", str(manifest), "--out", str(out),
                 "--seed", str(seed), *PHASE[phase], *extra])


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--out", str(data), "--seed", "3", *SYNTH]) == 0
    ckpt = root / "ckpt"
    for phase in (1, 2, 3):
        assert _train(data / "manifest.jsonl", ckpt, phase) == 0
    return root, data / "manifest.jsonl", ckpt


def test_synth_writes_manifest_and_echo(run):
    root, manifest, _ = run
    echo = parse_kv((manifest.parent / "synth.resolved.cfg").read_text())
    assert echo["pristine"] == "20" and echo["seed"] == "3"
    assert len(manifest.read_text().splitlines()) == 24


def test_synth_creates_nested_output_dir(tmp_path):
    out = tmp_path / "a" / "b"
    assert main(["synth", "--out", str(out), "--set", "pristine=1", "--set", "splice=0",
                 "--set", "copymove=0", "--set", "image_size=32", "--set", "region_min=4",
                 "--set", "region_max=8"]) == 0
    assert (out / "manifest.jsonl").exists()


def test_unknown_config_key_named(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("pristine = 3\nbogus_key = 1\n")
    assert main(["synth", "--out", str(tmp_path / "o"), "--config", str(cfg)]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_bad_value_named(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--set", "splice=lots"]) == 2
    assert "splice" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("pristine = 2\nsplice = 0\ncopymove = 0\nimage_size = 32\nregion_min = 4\nregion_max = 8\n")
    assert main(["synth", "--out", str(tmp_path / "o"), "--config", str(cfg), "--set", "pristine=1"]) == 0
    echo = parse_kv((tmp_path / "o" / "synth.resolved.cfg").read_text())
    assert echo["pristine"] == "1" and echo["image_size"] == "32"


def test_train_outputs(run):
    _, _, ckpt = run
    for name in ("fingerprint.ckpt", "fusion.ckpt", "detector.ckpt"):
        assert (ckpt / name).exists()
    for phase in (1, 2, 3):
        assert (ckpt / f"phase{phase}.resolved.cfg").exists()
        rows = (ckpt / f"phase{phase}_loss.csv").read_text().splitlines()
        assert rows[0] == "step,loss" and len(rows) > 1


def test_train_rerun_same_seed_same_losses(run, tmp_path):
    _, manifest, ckpt = run
    assert _train(manifest, tmp_path, 1) == 0
    assert (tmp_path / "phase1_loss.csv").read_text() == (ckpt / "phase1_loss.csv").read_text()


def test_phase2_without_fingerprint_names_it(run, tmp_path, capsys):
    _, manifest, _ = run
    assert _train(manifest, tmp_path / "empty", 2) == 3
    assert "fingerprint.ckpt" in capsys.readouterr().err


def test_phase3_without_fusion_names_it(run, tmp_path, capsys):
    _, manifest, ckpt = run
    (tmp_path / "fingerprint.ckpt").write_bytes((ckpt / "fingerprint.ckpt").read_bytes())
    assert _train(manifest, tmp_path, 3) == 3
    assert "fusion.ckpt" in capsys.readouterr().err


def test_missing_manifest_is_data_error(tmp_path):
    assert _train(tmp_path / "nope.jsonl", tmp_path, 1) == 4


@pytest.mark.parametrize("hw", [(128, 128), (70, 45)])
def test_analyze_resolution_and_determinism(run, tmp_path, hw):
    _, _, ckpt = run
    img = tmp_path / "in.png"
    write_image(img, np.random.default_rng(0).uniform(size=(*hw, 3)))
    assert main(["analyze", str(img), "--checkpoints", str(ckpt), "--out", str(tmp_path / "a")]) == 0
    assert main(["analyze", str(img), "--checkpoints", str(ckpt), "--out", str(tmp_path / "b")]) == 0
    for name in ("in_anomaly.png", "in_confidence.png", "in_report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for name in ("in_anomaly.png", "in_confidence.png"):
        with Image.open(tmp_path / "a" / name) as im:
            assert im.size == (hw[1], hw[0]) and im.mode == "L"
    rep = json.loads((tmp_path / "a" / "in_report.json").read_text())
    assert 0 < rep["score"] < 1
    assert list(rep["features"]) == ["a_avg", "a_max", "a_msq", "a_min", "c_avg", "c_max", "c_msq", "c_min"]
    assert rep["anomaly_png"] == "in_anomaly.png"


def test_analyze_errors(run, tmp_path):
    _, _, ckpt = run
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert main(["analyze", str(bad), "--checkpoints", str(ckpt), "--out", str(tmp_path)]) == 4
    good = tmp_path / "g.png"
    write_image(good, np.zeros((32, 32, 3)))
    assert main(["analyze", str(good), "--checkpoints", str(tmp_path / "none"), "--out", str(tmp_path)]) == 3


def test_evaluate_summary_and_csv(run, tmp_path):
    _, manifest, ckpt = run
    out = tmp_path / "ev"
    assert main(["evaluate", "--manifest", str(manifest), "--checkpoints", str(ckpt), "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    for key in ("f1_fixed", "f1_best", "auc", "balanced_accuracy", "tnr", "tpr"):
        assert key in summary
    with open(out / "results.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 24
    auc = image_auc([float(r["score"]) for r in rows], [r["label"] == "fake" for r in rows])
    assert summary["auc"] == pytest.approx(auc, abs=1e-12)


def test_evaluate_grid_cells(run, tmp_path):
    _, manifest, ckpt = run
    grid = tmp_path / "grid.cfg"
    grid.write_text("jpeg = 100, 70, 40\n")
    out = tmp_path / "g"
    assert main(["evaluate", "--manifest", str(manifest), "--checkpoints", str(ckpt), "--out", str(out),
                 "--grid", str(grid)]) == 0
    assert sorted(p.name for p in out.glob("*summary.json")) == [
        "jpeg_100_summary.json", "jpeg_40_summary.json", "jpeg_70_summary.json"]


def test_evaluate_identity_cell_matches_plain(run, tmp_path):
    _, manifest, ckpt = run
    grid = tmp_path / "grid.cfg"
    grid.write_text("identity =\n")
    main(["evaluate", "--manifest", str(manifest), "--checkpoints", str(ckpt), "--out", str(tmp_path / "g"),
          "--grid", str(grid)])
    main(["evaluate", "--manifest", str(manifest), "--checkpoints", str(ckpt), "--out", str(tmp_path / "p")])
    assert (tmp_path / "g" / "identity_results.csv").read_bytes() == (tmp_path / "p" / "results.csv").read_bytes()


def test_evaluate_bad_grid_parameter(run, tmp_path):
    _, manifest, ckpt = run
    grid = tmp_path / "grid.cfg"
    grid.write_text("blur = 4\n")
    assert main(["evaluate", "--manifest", str(manifest), "--checkpoints", str(ckpt), "--out", str(tmp_path),
                 "--grid", str(grid)]) == 2


def test_evaluate_mask_mismatch_lists_ids(run, tmp_path, capsys):
    _, manifest, ckpt = run
    lines = manifest.read_text().splitlines()
    recs = [json.loads(l) for l in lines]
    broken = []
    for r in recs:
        r = dict(r)
        for k in ("image_path", "mask_path"):
            if k in r:
                r[k] = str(manifest.parent / r[k])
        if r["kind"] == "splice":
            r.pop("mask_path")
        broken.append(json.dumps(r))
    bad = tmp_path / "bad.jsonl"
    bad.write_text("\n".join(broken) + "\n")
    assert main(["evaluate", "--manifest", str(bad), "--checkpoints", str(ckpt), "--out", str(tmp_path)]) == 4
    err = capsys.readouterr().err
    assert "splice_0020" in err and "splice_0021" in err


def test_evaluate_does_not_touch_inputs(run, tmp_path):
    _, manifest, ckpt = run
    before = {p: p.read_bytes() for p in Path(ckpt).iterdir()}
    main(["evaluate", "--manifest", str(manifest), "--checkpoints", str(ckpt), "--out", str(tmp_path)])
    assert {p: p.read_bytes() for p in Path(ckpt).iterdir()} == before


def test_evaluate_dataset_threshold_flag(run, tmp_path):
    _, manifest, ckpt = run
    assert main(["evaluate", "--manifest", str(manifest), "--checkpoints", str(ckpt), "--out", str(tmp_path),
                 "--dataset-threshold"]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert 0.0 <= summary["dataset_threshold"] <= 1.0
    assert 0.0 <= summary["f1_dataset_best"] <= 1.0

import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from dualview_fuse import __version__
from dualview_fuse.cli import main
from dualview_fuse.core import GreyImage, save_grey

OCC = {
    "backends": {
        "main": {"kind": "oracle", "miss_rate_main": 1.0, "seed": 7},
        "aux": {"kind": "oracle", "seed": 7},
        "experts": {"kind": "oracle"},
    }
}


@pytest.fixture(scope="module")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "ds"
    assert main(["synth", "--benchmark", "occlusion", "--n", "12", "--seed", "3", "--out", str(root)]) == 0
    return root


def test_version(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_unknown_subcommand_exits_1(capsys):
    assert main(["frobnicate"]) == 1
    assert main([]) == 1
    assert main(["run"]) == 1  # missing required args


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dualview_fuse", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


def test_synth_refuses_overwrite(synth_root):
    assert main(["synth", "--n", "1", "--out", str(synth_root)]) == 1


def test_validate(synth_root, capsys):
    capsys.readouterr()
    assert main(["validate", str(synth_root)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["n_scenes"] == 12 and stats["per_category"]["UM"] >= 12


def test_validate_bad_root(tmp_path):
    assert main(["validate", str(tmp_path / "missing")]) == 1


def test_saliency(tmp_path, capsys):
    img = np.ones((60, 80))
    img[10:40, 20:50] = 0.0
    save_grey(GreyImage(img), tmp_path / "x.png")
    assert main(["saliency", str(tmp_path / "x.png"), "--dump-map", str(tmp_path / "map.png")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert json.loads(lines[0]) == {"bbox": [20.0, 10.0, 50.0, 40.0], "area": 900}
    assert (tmp_path / "map.png").exists()


def test_estimate_lambda(tmp_path, capsys):
    (tmp_path / "p.json").write_text(json.dumps([{"aux": [10, 20], "main": [15, 30]}, [[40, 60], [60, 90]]]))
    assert main(["estimate-lambda", str(tmp_path / "p.json")]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1.5, abs=1e-12)
    (tmp_path / "e.json").write_text("[]")
    assert main(["estimate-lambda", str(tmp_path / "e.json")]) == 1


def test_run_eval_sweep(synth_root, tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(OCC))
    out = tmp_path / "out.jsonl"
    assert main(["--jobs", "2", "run", str(synth_root), "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("out.jsonl", "out.main.jsonl", "out.aux_refined.jsonl", "out.manifest.json"):
        assert (tmp_path / name).exists(), name
    manifest = json.loads((tmp_path / "out.manifest.json").read_text())
    assert manifest["seeds"]["main"] == 7 and manifest["dataset"]["n_scenes"] == 12
    capsys.readouterr()
    assert main(["eval", str(out), str(synth_root), "--json", str(tmp_path / "rep.json")]) == 0
    assert "UM" in capsys.readouterr().out
    rep = json.loads((tmp_path / "rep.json").read_text())
    assert rep["per_category"]["UM"]["0.50"] == 100.0
    assert main(
        [
            "sweep", "--main", str(tmp_path / "out.main.jsonl"), "--aux", str(tmp_path / "out.aux_refined.jsonl"),
            "--root", str(synth_root), "--thresholds", "0.5,1.0", "--csv", str(tmp_path / "s.csv"),
            "--json", str(tmp_path / "s.json"),
        ]
    ) == 0
    rows = json.loads((tmp_path / "s.json").read_text())
    assert [r["threshold"] for r in rows] == [0.5, 1.0]
    assert rows[0]["per_category_ap50"]["UM"] > rows[1]["per_category_ap50"]["UM"]
    assert (tmp_path / "s.csv").read_text().startswith("threshold,")


def test_run_conf_threshold_one_is_main_only(synth_root, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(OCC))
    out = tmp_path / "o.jsonl"
    assert main(["run", str(synth_root), "--config", str(cfg), "--out", str(out), "--conf-threshold", "1.0"]) == 0
    assert out.read_bytes() == (tmp_path / "o.main.jsonl").read_bytes()


def test_run_unreachable_backend_exits_2(synth_root, tmp_path, caplog):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"backends": {"main": {"kind": "external", "command": "/nonexistent/detector {request}"}}}))
    with caplog.at_level(logging.ERROR):
        code = main(["--jobs", "1", "run", str(synth_root), "--config", str(cfg), "--out", str(tmp_path / "x.jsonl")])
    assert code == 2
    assert "scene_00000" in caplog.text


def test_eval_unknown_scene_exits_1(synth_root, tmp_path):
    (tmp_path / "d.jsonl").write_text(json.dumps({"scene_id": "ghost", "category": "UM", "bbox": [0, 0, 5, 5], "score": 0.5}) + "\n")
    assert main(["eval", str(tmp_path / "d.jsonl"), str(synth_root)]) == 1


def test_bad_config_exits_1(synth_root, tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"fusion": {"conf_threshold": 2.0}}))
    assert main(["run", str(synth_root), "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o.jsonl")]) == 1
    (tmp_path / "c2.json").write_text(json.dumps({"bogus": 1}))
    assert main(["run", str(synth_root), "--config", str(tmp_path / "c2.json"), "--out", str(tmp_path / "o.jsonl")]) == 1


def test_export_crops_and_pseudolabel(synth_root, tmp_path, capsys):
    capsys.readouterr()
    assert main(["export-crops", str(synth_root), "--categories", "UM", "--out", str(tmp_path / "crops")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["per_category"]["UM"] >= 12
    assert main(["pseudolabel", str(synth_root), "--out", str(tmp_path / "pl")]) == 0
    assert (tmp_path / "pl" / "aux_pseudolabels.json").exists()

import json

import pytest
import yaml
from click.testing import CliRunner

from srnerf.cli import ConfigError, main, resolve_config
from srnerf.renderer import read_png
from srnerf.training import STRATEGIES

TINY = {
    "dataset": {"kind": "toy", "options": {"image_size": 32, "n_train": 3, "n_val": 1, "n_test": 2,
                                           "supersample": 1}},
    "train": {"warmup_iters": 20, "warmup_batch": 64, "upsample_iters": [], "n_samples": 16, "patch_size": 16,
              "sr_blocks": 1, "sr_channels": 4, "epochs": 1, "checkpoint_every": 1,
              "field": {"resolution": [8, 8, 8], "density_rank": 2, "appearance_rank": 2,
                        "appearance_channels": 4, "hidden": 8}},
    "ablate": {"strategies": ["FT-GridPatch", "FT-RandPatch"], "seeds": [0, 1]},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def test_config_precedence(config):
    cfg = resolve_config(config, {"train": {"seed": 5}})
    assert cfg["train"]["seed"] == 5
    assert cfg["train"]["warmup_iters"] == 20
    assert cfg["train"]["learning_rate"] == 1e-4  # built-in default survives
    assert resolve_config(None)["train"]["warmup_iters"] == 5000


def test_config_errors_are_listed_together(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"train": {"ratio": 3, "bogus": 1, "strategy": "nope"}, "extra": {}}))
    with pytest.raises(ConfigError) as err:
        resolve_config(bad)
    text = "\n".join(err.value.problems)
    for needle in ("ratio", "train.bogus", "unknown section 'extra'", "nope"):
        assert needle in text


def test_unknown_strategy_lists_all_six(config, tmp_path):
    res = CliRunner().invoke(main, ["train", "--config", str(config), "--strategy", "Magic",
                                    "--out", str(tmp_path / "run")])
    assert res.exit_code != 0
    for name in STRATEGIES:
        assert name in res.output
    assert not (tmp_path / "run").exists()


def test_missing_dataset_path_fails_before_work(tmp_path, monkeypatch):
    monkeypatch.delenv("SRNERF_DATA_ROOT", raising=False)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"dataset": {"kind": "blender", "path": str(tmp_path / "nowhere")}}))
    res = CliRunner().invoke(main, ["train", "--config", str(cfg), "--out", str(tmp_path / "r")])
    assert res.exit_code != 0 and "does not exist" in res.output


def test_data_root_environment_variable(tmp_path, monkeypatch):
    invoke("make-toy", "--out", tmp_path / "scenes" / "toy", "--image-size", 16)
    monkeypatch.setenv("SRNERF_DATA_ROOT", str(tmp_path / "scenes"))
    cfg = resolve_config(None, {"dataset": {"kind": "blender", "path": "toy"}})
    from srnerf.cli import load_scene
    assert load_scene(cfg).resolution() == (16, 16)


def test_warmup_only_run(config, tmp_path):
    run = tmp_path / "run"
    invoke("train", "--config", config, "--epochs", 0, "--out", run)
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["config"]["train"]["epochs"] == 0
    for key in ("code_version", "device", "started", "finished", "seed", "outputs"):
        assert key in manifest
    assert "warmup_field.npz" in manifest["outputs"] and (run / "last.npz").is_file()
    assert manifest["invocations"][-1]["status"] == "ok"


def test_train_refuses_to_overwrite_and_resumes(config, tmp_path):
    run = tmp_path / "run"
    invoke("train", "--config", config, "--out", run)
    res = CliRunner().invoke(main, ["train", "--config", str(config), "--out", str(run)])
    assert res.exit_code != 0 and "--resume" in res.output
    invoke("train", "--resume", "--epochs", 2, "--out", run)
    manifest = json.loads((run / "manifest.json").read_text())
    assert len(list(run.glob("manifest*.json"))) == 1
    assert len(manifest["invocations"]) == 2 and manifest["invocations"][-1]["epoch"] == 2
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 2


def test_render_and_eval(config, tmp_path):
    run = tmp_path / "run"
    invoke("train", "--config", config, "--out", run)
    invoke("render", run, "--out", tmp_path / "hr")
    invoke("render", run, "--sr", "off", "--repeats", 0, "--out", tmp_path / "lr")
    hr = sorted((tmp_path / "hr").glob("*.png"))
    lr = sorted((tmp_path / "lr").glob("*.png"))
    assert len(hr) == len(lr) == 2
    assert read_png(hr[0]).shape == (32, 32, 3) and read_png(lr[0]).shape == (16, 16, 3)
    timing = json.loads((tmp_path / "hr" / "timing.json").read_text())
    assert timing["frames"] == 2 and timing["profile"]["n_frames"] == 2

    invoke("eval", run, "--out", tmp_path / "e1")
    invoke("eval", run, "--out", tmp_path / "e2")
    for name in ("report.json", "report.txt"):
        assert (tmp_path / "e1" / name).read_bytes() == (tmp_path / "e2" / name).read_bytes()
    rows = json.loads((tmp_path / "e1" / "report.json").read_text())["rows"]
    assert len(rows) == 1 and rows[0]["method"] == "FT-RandPatch"


def test_eval_ground_truth_against_itself(tmp_path):
    scene = tmp_path / "scene"
    invoke("make-toy", "--out", scene, "--image-size", 24)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"dataset": {"kind": "blender", "path": str(scene)}}))
    invoke("eval", "--config", cfg, "--renders", f"gt={scene / 'test'}", "--renders", f"gt2={scene / 'test'}",
           "--out", tmp_path / "rep")
    report = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert len(report["rows"]) == 2
    assert report["rows"][0]["ssim"] == 1.0
    assert "99.00" in (tmp_path / "rep" / "report.txt").read_text()


def test_eval_missing_renders(tmp_path):
    scene = tmp_path / "scene"
    invoke("make-toy", "--out", scene, "--image-size", 16)
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"dataset": {"kind": "blender", "path": str(scene)}}))
    (tmp_path / "empty").mkdir()
    res = CliRunner().invoke(main, ["eval", "--config", str(cfg), "--renders", f"x={tmp_path / 'empty'}",
                                    "--out", str(tmp_path / "rep")])
    assert res.exit_code != 0 and "missing render" in res.output


def test_ablate_matrix_and_resume(config, tmp_path):
    out = tmp_path / "abl"
    invoke("ablate", "--config", config, "--out", out)
    summary = json.loads((out / "ablation.json").read_text())
    assert len(summary["cells"]) == 4 and len(summary["rows"]) == 2
    assert all(c["status"] == "ok" for c in summary["cells"])
    text = (out / "ablation.txt").read_text()
    assert "Train Time(m)" in text and "+-" in text
    stamp = (out / "cells" / "FT-GridPatch-s0" / "last.npz").stat().st_mtime_ns
    invoke("ablate", "--resume", "--out", out)
    assert (out / "cells" / "FT-GridPatch-s0" / "last.npz").stat().st_mtime_ns == stamp
    assert json.loads((out / "ablation.json").read_text())["cells"] == summary["cells"]


def test_ablate_records_failed_cells(config, tmp_path):
    out = tmp_path / "abl"
    invoke("ablate", "--config", config, "--strategy", "Pretrained,FT-GridPatch", "--seed", 0, "--out", out)
    summary = json.loads((out / "ablation.json").read_text())
    status = {c["strategy"]: c["status"] for c in summary["cells"]}
    assert status == {"Pretrained": "failed", "FT-GridPatch": "ok"}
    assert (out / "cells" / "Pretrained-s0" / "error.json").is_file()
    assert summary["rows"][0]["n"] == 0 and summary["rows"][0]["failed"] == 1

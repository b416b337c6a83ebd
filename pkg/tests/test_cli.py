import hashlib
import re
import json
from pathlib import Path

import pytest
import yaml

from hcpercept.cli import main, param_table
from hcpercept.config import ConfigError
from hcpercept.metrics import validate_report
from hcpercept.runconfig import load_run_config
from hcpercept.scenegen.loaders import load_dataset, read_manifest
from hcpercept.scenegen.samples import TOY_SIZES, task_classes


def tree_digest(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "MANIFEST.json"}


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    assert main(["gen-data", "--out", str(root / "data"), "--seed", "3"]) == 0
    return root / "data"


def write_config(path: Path, **doc) -> Path:
    path.write_text(yaml.safe_dump(doc))
    return path


# ---------------------------------------------------------------- config

def test_precedence_file_env_flags(tmp_path):
    cfg_path = write_config(tmp_path / "c.yaml", seed=1, steps=10, sharing_mode="per_task_type")
    assert load_run_config(cfg_path, env={}).seed == 1
    assert load_run_config(cfg_path, env={"HCP_SEED": "2"}).seed == 2
    cfg = load_run_config(cfg_path, env={"HCP_SEED": "2", "HCP_STEPS": "7"}, flags={"seed": 3})
    assert (cfg.seed, cfg.steps, cfg.sharing_mode) == (3, 7, "per_task_type")


def test_config_rejections(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(write_config(tmp_path / "a.yaml", sed=1), env={})
    with pytest.raises(ConfigError):
        load_run_config(write_config(tmp_path / "b.yaml", plan={"learning_rate": 1}), env={})
    with pytest.raises(ConfigError):
        load_run_config(write_config(tmp_path / "c.yaml", model={"encoder": {"depht": 2}}), env={})
    with pytest.raises(ConfigError):
        load_run_config(None, env={"HCP_SEED": "abc"})
    with pytest.raises(ConfigError):
        load_run_config(write_config(tmp_path / "d.yaml", manifests=["missing.yaml"]), env={})


# ---------------------------------------------------------------- gen-data

def test_gen_data_layout_and_reload(generated):
    dirs = sorted(p.name for p in generated.iterdir() if p.is_dir())
    assert dirs == ["par", "peddet", "pose", "reid", "seg"]
    for name in ("MANIFEST.json", "resolved_config.yaml", "datasets.yaml"):
        assert (generated / name).is_file()
    manifests = read_manifest(generated / "datasets.yaml")
    assert len(manifests) == 5
    for m in manifests:
        res = load_dataset(m, TOY_SIZES, generated)
        assert len(res.samples) == 16 and res.skipped == 0


def test_gen_data_is_byte_identical(generated, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
    assert tree_digest(generated) == tree_digest(tmp_path / "again")


# ---------------------------------------------------------------- train / eval / report

@pytest.fixture(scope="module")
def trained(generated, tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "run.yaml", manifests=[str(generated / "datasets.yaml")],
                       plan={"warmup_steps": 1, "drop_path": 0.0}, synthetic={"samples": 4, "identities": 2})
    assert main(["train", "--config", str(cfg), "--steps", "3", "--out", str(root / "out")]) == 0
    return root, cfg


def test_train_outputs(trained):
    root, _ = trained
    out = root / "out"
    assert (out / "checkpoint.pt").is_file()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["step"] for x in lines] == [1, 2, 3]
    manifest = json.loads((out / "MANIFEST.json").read_text())
    listed = {f["path"] for f in manifest["files"]}
    assert {"checkpoint.pt", "metrics.jsonl", "train_summary.json", "resolved_config.yaml"} <= listed


def test_train_resume_continues_step_counter(trained, tmp_path):
    root, cfg = trained
    out = tmp_path / "resumed"
    code = main(["train", "--config", str(cfg), "--steps", "5", "--out", str(out),
                 "--checkpoint", str(root / "out" / "checkpoint.pt")])
    assert code == 0
    steps = [json.loads(x)["step"] for x in (out / "metrics.jsonl").read_text().splitlines()]
    assert steps == [4, 5]


def test_eval_and_export(trained, capsys):
    root, cfg = trained
    out = root / "out"
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(out / "checkpoint.pt"), "--out", str(out)]) == 0
    report = json.loads((out / "eval_report.json").read_text())
    validate_report(report)
    assert len(report["metrics"]) >= 5 and set(report["counts"]) == {
        "reid-generated", "par-generated", "seg-generated", "pose-generated", "peddet-generated"}
    assert main(["export-report", "--out", str(out)]) == 0
    md = (out / "report.md").read_text()
    assert "## Evaluation" in md and "## Training" in md


def test_eval_missing_checkpoint(tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pt")]) == 1
    assert "does not exist" in capsys.readouterr().err


def test_export_report_empty_dir(tmp_path):
    assert main(["export-report", "--out", str(tmp_path)]) == 1


def test_unknown_command_and_bad_flag():
    assert main(["frobnicate"]) == 1
    assert main(["train", "--sharing-mode", "nope"]) == 1


# ---------------------------------------------------------------- inspect-params / prompt-tune

def test_inspect_params_full(capsys, tmp_path):
    assert main(["inspect-params", "--preset", "full", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "Encoder" in text and "Task-agnostic" in text
    t = json.loads((tmp_path / "params.json").read_text())
    assert abs(t["encoder"] / 91.1e6 - 1) <= 0.02
    assert t["task_agnostic_ratio"] >= 0.999


def test_param_table_sharing_modes():
    totals = [param_table(load_run_config(None, env={}, flags={"preset": "full", "sharing_mode": m}))["total"]
              for m in ("baseline", "per_task_interpreter", "per_task_type", "encoder_only")]
    assert totals == sorted(totals) and len(set(totals)) == 4


def test_prompt_tune_new_task(trained, tmp_path, capsys):
    root, _ = trained
    cfg = write_config(tmp_path / "p.yaml", datasets=[{"dataset_id": "pose-new", "task_type": "pose",
                                                        "task_id": "pose-new", "format": "synthetic", "root": ".",
                                                        "batch_size": 4, "options": {"samples": 4}}],
                       plan={"warmup_steps": 1})
    code = main(["prompt-tune", "--config", str(cfg), "--checkpoint", str(root / "out" / "checkpoint.pt"),
                 "--steps", "3", "--out", str(tmp_path / "pt")])
    assert code == 0
    res = json.loads((tmp_path / "pt" / "prompt_tune.json").read_text())
    assert res["frozen_unchanged"] is True and res["steps"] == 3
    # content and positional vectors of a fresh pose task, one query per joint
    assert res["learnable"] == 2 * len(task_classes("pose")) * 64
    assert re.search(r"Frozen weights unchanged\s+True", capsys.readouterr().out)


CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_shipped_configs_load(generated, tmp_path):
    cfg = load_run_config(CONFIGS / "prompt-pose.yaml", env={})
    assert cfg.mask_mode == "prompt_queries" and cfg.datasets[0].task_type == "pose"
    # the joint config points at ../generated relative to its own directory
    (tmp_path / "configs").mkdir()
    (tmp_path / "configs" / "toy-joint.yaml").write_text((CONFIGS / "toy-joint.yaml").read_text())
    (tmp_path / "generated").symlink_to(generated)
    cfg = load_run_config(tmp_path / "configs" / "toy-joint.yaml", env={})
    assert len(cfg.datasets) == 5 and cfg.train_plan().total_steps == 3000

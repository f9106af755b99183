import json

import pytest

from conftest import tiny_pipeline_dict
from mmdit_compress import cli
from mmdit_compress.checkpoint import load_checkpoint
from mmdit_compress.config import ConfigError, PipelineConfig, apply_overrides, load_config, parse_override
from mmdit_compress.pipeline import OUTPUT_ROOT_ENV, STAGES, LockError, Pipeline, output_lock, resolve_output_dir
from mmdit_compress.report import reduction, reference_backbone_reduction, stage_report


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(tiny_pipeline_dict(root / "out")))
    code = cli.run(["run-all", "--config", str(cfg_path)])
    assert code == 0
    return root, cfg_path, root / "out"


def write_cfg(tmp_path, **extra):
    d = tiny_pipeline_dict(tmp_path / "out")
    d.update(extra)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(d))
    return path


# -- config

def test_default_config_roundtrip():
    cfg = PipelineConfig()
    cfg.validate()
    again = PipelineConfig.from_dict(json.loads(cfg.to_json()))
    assert again.to_dict() == cfg.to_dict()
    assert cfg.protected == [0, 11]
    assert (cfg.distill.steps, cfg.finetune.steps, cfg.align.steps, cfg.finetune_lite.steps) == (2000, 5000, 1500, 2500)
    assert (cfg.distill.lr, cfg.finetune.lr, cfg.align.lr, cfg.finetune_lite.lr) == (1e-3, 3e-4, 1e-3, 3e-4)


@pytest.mark.parametrize("override,field", [
    ("prune.target_keep=1", "prune.target_keep"),
    ("hybrid.n_dual=0", "hybrid.n_dual"),
    ("importance.omega=\"cubic\"", "importance.omega"),
    ("model.d_model=30", "model"),
])
def test_validation_names_field(override, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        load_config(None, [override])


def test_override_parsing():
    assert parse_override("prune.target_keep=4") == (["prune", "target_keep"], 4)
    assert parse_override("output_dir=runs/x") == (["output_dir"], "runs/x")
    with pytest.raises(ConfigError):
        parse_override("nokey")
    with pytest.raises(ConfigError, match="unknown field"):
        apply_overrides(PipelineConfig().to_dict(), ["prune.nonsense=1"])
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"bogus": {}})


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(tmp_path / "bad.json")


# -- output dir and lock

def test_output_dir_precedence(monkeypatch, tmp_path):
    cfg = PipelineConfig()
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    assert str(resolve_output_dir(cfg)) == "runs/default"
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "env"))
    assert resolve_output_dir(cfg) == tmp_path / "env"
    assert resolve_output_dir(cfg, tmp_path / "flag") == tmp_path / "flag"


def test_lock_excludes_second_pipeline(tmp_path):
    with output_lock(tmp_path):
        with pytest.raises(LockError):
            with output_lock(tmp_path):
                pass
        assert cli.run(["train-teacher", "--config", str(write_cfg(tmp_path)), "--out", str(tmp_path)]) == cli.EXIT_LOCKED
    assert not (tmp_path / ".lock").exists()


# -- cli exit codes

def test_exit_code_config_error(tmp_path, capsys):
    code = cli.run(["prune", "--config", str(write_cfg(tmp_path)), "--set", "prune.target_keep=1"])
    assert code == cli.EXIT_CONFIG
    assert "prune.target_keep" in capsys.readouterr().err


def test_exit_code_missing_artifact_names_stage(tmp_path, capsys):
    code = cli.run(["distill", "--config", str(write_cfg(tmp_path))])
    assert code == cli.EXIT_MISSING
    assert "prune" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        cli.run(["fly"])


def test_plan_only_paper_scale(tmp_path, capsys):
    code = cli.run(["prune", "--plan-only", "--config", str(write_cfg(tmp_path)),
                    "--set", "model.depth=60", "--set", "prune.target_keep=30"])
    assert code == 0
    line = json.loads(capsys.readouterr().out.strip())
    assert line["protected"] == [0, 59] and len(line["keep"]) == 30 and len(line["remove"]) == 30
    assert set(line["remove"]) <= set(range(1, 59))
    assert not (tmp_path / "out" / "prune").exists()


def test_gen_data(tmp_path, capsys):
    assert cli.run(["gen-data", "--config", str(write_cfg(tmp_path))]) == 0
    assert (tmp_path / "out" / "data" / "train" / "index.json").exists()


# -- full tiny chain

def test_run_all_produces_every_stage(tiny_run):
    _, _, out = tiny_run
    for stage in STAGES:
        summary = json.loads((out / stage / "summary.json").read_text())
        assert summary["stage"] == stage and summary["status"] == "ok"
    assert set(json.loads((out / "prune" / "summary.json").read_text())["inputs"]) == {"train-teacher", "estimate-importance"}
    metrics = json.loads((out / "eval" / "metrics.json").read_text())
    assert set(metrics) == {"teacher", "pruned", "recovered", "hybrid"}
    assert load_checkpoint(out / "finetune-lite").layout == ("dual", "single", "single")


def test_stage_rerun_is_deterministic(tiny_run, tmp_path):
    _, cfg_path, out = tiny_run
    cfg = load_config(cfg_path)
    a = json.loads((out / "prune" / "summary.json").read_text())["output_hash"]
    pipe = Pipeline(cfg, tmp_path / "copy")
    for stage in STAGES[:3]:
        pipe.run(stage)
    assert json.loads((tmp_path / "copy" / "prune" / "summary.json").read_text())["output_hash"] == a


def test_two_omegas_write_two_reports(tiny_run, tmp_path):
    _, cfg_path, out = tiny_run
    import shutil
    shutil.copytree(out / "train-teacher", tmp_path / "train-teacher")
    code = cli.run(["estimate-importance", "--config", str(cfg_path), "--out", str(tmp_path),
                    "--omega", "uniform", "--omega", "linear"])
    assert code == 0
    a = json.loads((tmp_path / "estimate-importance" / "importance_uniform.json").read_text())
    b = json.loads((tmp_path / "estimate-importance" / "importance_linear.json").read_text())
    assert a["config"]["omega"] == "uniform" and b["config"]["omega"] == "linear"


def test_report_idempotent_and_accounting(tiny_run):
    _, cfg_path, out = tiny_run
    assert cli.run(["report", "--config", str(cfg_path)]) == 0
    first = ((out / "report.md").read_bytes(), (out / "report.json").read_bytes())
    data = stage_report(out)
    assert ((out / "report.md").read_bytes(), (out / "report.json").read_bytes()) == first
    p = data["params"]
    assert p["pruned"]["reduction_vs_parent"] == reduction(p["pruned"]["total"], p["teacher"]["total"])
    text = first[0].decode()
    assert "approximately 40%" in text and "60 -> 30 -> 10+20" in text
    assert reference_backbone_reduction() == round(1 - 40 / 60, 3)


def test_report_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        stage_report(tmp_path / "missing")
    with pytest.raises(ValueError):
        stage_report(tmp_path)


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    from mmdit_compress import pipeline
    from mmdit_compress.tensor import NumericError

    def boom(*a, **k):
        raise NumericError("non-finite loss")

    monkeypatch.setattr(pipeline, "train_teacher", boom)
    assert cli.run(["train-teacher", "--config", str(write_cfg(tmp_path))]) == cli.EXIT_NUMERIC

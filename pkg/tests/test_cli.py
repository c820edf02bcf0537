import hashlib
import shutil

import pytest
import torch
import yaml

from edistill.cli import run
from edistill.config import ConfigError, RunConfig
from edistill.model import Student, builtin_spec
from edistill.report import parse_markdown_table, read_metrics


def write(tmp_path, d, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(d))
    return str(p)


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# config


def test_defaults_follow_reference_protocol():
    cfg = RunConfig()
    assert (cfg.loss.tau, cfg.loss.alpha) == (4.0, 0.3)
    assert cfg.schedule.total_epochs == 240 and cfg.schedule.advance_epochs == (50, 80)
    assert (cfg.optimizer.init_lr, cfg.optimizer.batch_size, cfg.optimizer.momentum) == (0.05, 32, 0.9)
    assert cfg.optimizer.weight_decay == 1e-4
    assert cfg.optimizer.lr_milestones == (150, 180, 210) and cfg.optimizer.lr_gamma == 0.1


def test_yaml_round_trip(tiny_config):
    cfg = RunConfig.from_dict(tiny_config)
    assert RunConfig.from_yaml(cfg.to_yaml()) == cfg


@pytest.mark.parametrize(
    "patch, match",
    [
        ({"loss": {"temperature": 4}}, "unknown keys at loss.: temperature"),
        ({"bogus": 1}, "unknown keys at top level: bogus"),
        ({"loss": {"alpha": 1.5}}, "alpha"),
        ({"schedule": {"advance_epochs": [4, 2]}}, "schedule.advance_epochs"),
        ({"schedule": {"advance_epochs": [2]}}, "schedule.advance_epochs"),
        ({"optimizer": {"batch_size": "big"}}, "optimizer.batch_size"),
        ({"teacher": {"mode": "council"}}, "teacher.mode"),
        ({"partition": {"ratios": [1, 1]}}, "partition.ratios"),
    ],
)
def test_invalid_configs(tiny_config, patch, match):
    for section, values in patch.items():
        if isinstance(values, dict):
            tiny_config.setdefault(section, {}).update(values)
        else:
            tiny_config[section] = values
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(tiny_config)


def test_cli_unknown_key_exit_code(tmp_path, tiny_config, capsys):
    tiny_config["loss"] = {"temprature": 2}
    assert run(["partition", "--config", write(tmp_path, tiny_config)]) == 2
    assert "temprature" in capsys.readouterr().err


def test_cli_missing_config_file(tmp_path, capsys):
    assert run(["partition", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_more_subsets_than_classes(tmp_path, tiny_config, capsys):
    tiny_config["dataset"]["params"]["num_classes"] = 2
    assert run(["partition", "--config", write(tmp_path, tiny_config)]) == 2
    err = capsys.readouterr().err
    assert "partition.num_subsets" in err and "dataset" in err


# ---------------------------------------------------------------------------
# partition


def test_partition_100_classes(tmp_path, tiny_config, capsys):
    tiny_config["dataset"]["params"].update(num_classes=100, train_per_class=2, test_per_class=1)
    cfg = write(tmp_path, tiny_config)
    assert run(["partition", "--config", cfg]) == 0
    assert "group sizes: 34/33/33" in capsys.readouterr().out
    out = tmp_path / "runs" / "tiny" / "partition.txt"
    first = sha(out)
    assert run(["partition", "--config", cfg]) == 0
    assert sha(out) == first
    assert run(["partition", "--config", cfg, "--seed", "5"]) == 0
    assert sha(out) != first


# ---------------------------------------------------------------------------
# teachers


def test_train_teachers_per_subset(tmp_path, tiny_config):
    assert run(["train-teachers", "--config", write(tmp_path, tiny_config)]) == 0
    tdir = tmp_path / "runs" / "tiny" / "teachers"
    assert sorted(p.name for p in tdir.glob("*.ckpt")) == ["teacher1.ckpt", "teacher2.ckpt", "teacher3.ckpt"]
    rows = (tdir / "summary.tsv").read_text().splitlines()
    assert len(rows) == 1 + 3


def test_shared_teacher_from_checkpoint_skips_training(tmp_path, tiny_config):
    assert run(["train-teachers", "--config", write(tmp_path, tiny_config)]) == 0
    src = tmp_path / "runs" / "tiny" / "teachers" / "teacher1.ckpt"
    given = tmp_path / "given.ckpt"
    shutil.copy(src, given)
    tiny_config["teacher"].update(mode="shared", checkpoints=[str(given)])
    tiny_config["output"]["run_id"] = "shared"
    assert run(["train-teachers", "--config", write(tmp_path, tiny_config, "shared.yaml")]) == 0
    tdir = tmp_path / "runs" / "shared" / "teachers"
    assert not list(tdir.glob("*.ckpt"))
    assert str(given) in (tdir / "summary.tsv").read_text()


# ---------------------------------------------------------------------------
# distill / evaluate / report


@pytest.fixture
def distilled(tmp_path, tiny_config):
    cfg = write(tmp_path, tiny_config)
    assert run(["distill", "--config", cfg]) == 0
    return cfg, tmp_path / "runs" / "tiny"


def test_distill_outputs(distilled):
    _, rd = distilled
    for name in ("final.ckpt", "metrics.tsv", "config.yaml", "partition.txt", "teacher_logits.bin"):
        assert (rd / name).exists(), name
    assert not (rd / "ERROR").exists() and not (rd / ".lock").exists()
    report = rd / "report"
    assert sorted(p.name for p in report.glob("*.png")) == [
        "accuracy_all.png", "accuracy_subset1.png", "accuracy_subset2.png", "accuracy_subset3.png"
    ]
    recs = read_metrics(rd / "metrics.tsv")
    assert [(r.epoch, r.metric) for r in recs if r.metric == "advance"] == [(2, "advance"), (4, "advance")]
    assert [(r.epoch, r.metric) for r in recs if r.metric == "restore"] == [(4, "restore")]
    assert all(r.wall_time == 0.0 for r in recs)


def test_final_checkpoint_loads_into_student(distilled):
    cfg, rd = distilled
    ckpt = torch.load(rd / "final.ckpt", weights_only=False)
    student = Student(builtin_spec("cnn3_toy", 9))
    result = student.load_state_dict(ckpt["state_dict"], strict=True)
    assert not result.missing_keys and not result.unexpected_keys


def test_evaluate_matches_last_logged(distilled, capsys):
    cfg, rd = distilled
    capsys.readouterr()
    assert run(["evaluate", "--config", cfg, "--checkpoint", str(rd / "final.ckpt")]) == 0
    out = dict(line.split("\t") for line in capsys.readouterr().out.strip().splitlines())
    recs = read_metrics(rd / "metrics.tsv")
    last = max(r.epoch for r in recs if r.metric == "top1")
    logged = {r.subset_id: r.value for r in recs if r.epoch == last and r.metric == "top1"}
    for k, v in logged.items():
        assert float(out[k]) == pytest.approx(v, abs=0.005)


def test_evaluate_wrong_width(distilled, tmp_path, tiny_config, capsys):
    _, rd = distilled
    tiny_config["dataset"]["params"]["num_classes"] = 10
    cfg = write(tmp_path, tiny_config, "wide.yaml")
    assert run(["evaluate", "--config", cfg, "--checkpoint", str(rd / "final.ckpt")]) == 3
    assert "shape mismatch" in capsys.readouterr().err


def test_evaluate_missing_checkpoint(distilled, capsys):
    cfg, rd = distilled
    assert run(["evaluate", "--config", cfg, "--checkpoint", str(rd / "nope.ckpt")]) == 3


def test_report_idempotent(distilled):
    _, rd = distilled
    before = {p.name: sha(p) for p in (rd / "report").glob("*") if p.suffix in (".md", ".csv")}
    log_before = sha(rd / "metrics.tsv")
    assert run(["report", "--run", str(rd)]) == 0
    assert run(["report", "--run", str(rd)]) == 0
    after = {p.name: sha(p) for p in (rd / "report").glob("*") if p.suffix in (".md", ".csv")}
    assert before == after
    assert sha(rd / "metrics.tsv") == log_before
    table = parse_markdown_table((rd / "report" / "forgetting.md").read_text())
    assert [sum(v is not None for v in row) for row in table] == [1, 2, 3]


def test_report_without_log(tmp_path):
    assert run(["report", "--run", str(tmp_path)]) == 3


def test_resume_matches_uninterrupted(tmp_path, tiny_config, capsys):
    full = write(tmp_path, tiny_config, "full.yaml")
    assert run(["distill", "--config", full]) == 0
    tiny_config["output"]["run_id"] = "cut"
    cut = write(tmp_path, tiny_config, "cut.yaml")
    assert run(["distill", "--config", cut, "--stop-after-epoch", "3"]) == 0
    assert "--resume" in capsys.readouterr().out
    rd = tmp_path / "runs" / "cut"
    assert not (rd / "final.ckpt").exists() and not (rd / "ERROR").exists()
    assert run(["distill", "--config", cut, "--resume"]) == 0
    a = [r.to_line().split("\t", 1)[1] for r in read_metrics(tmp_path / "runs" / "tiny" / "metrics.tsv")]
    b = [r.to_line().split("\t", 1)[1] for r in read_metrics(rd / "metrics.tsv")]
    assert a == b


def test_kd_baseline(tmp_path, tiny_config, capsys):
    assert run(["distill", "--config", write(tmp_path, tiny_config), "--baseline", "kd"]) == 0
    rd = tmp_path / "runs" / "tiny-kd"
    recs = read_metrics(rd / "metrics.tsv")
    assert not [r for r in recs if r.metric in ("advance", "restore")]
    assert {r.stage for r in recs} == {1}
    assert (rd / "teachers" / "teacher_full.ckpt").exists()
    assert "final top-1" in capsys.readouterr().out


def test_locked_run_dir(tmp_path, tiny_config, capsys):
    cfg = write(tmp_path, tiny_config)
    rd = tmp_path / "runs" / "tiny"
    rd.mkdir(parents=True)
    (rd / ".lock").write_text("123")
    assert run(["distill", "--config", cfg]) == 3
    assert "locked" in capsys.readouterr().err

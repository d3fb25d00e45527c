import json

import pytest

from sqdf_lab import cli
from sqdf_lab.diffcalc import load_checkpoint, params_digest

FAST = ["--set", "pretrain.steps=40", "--set", "pretrain.batch_size=32", "--set", "distill.steps=30",
        "--set", "distill.batch_size=32", "--set", "distill.eval_samples=20"]
FT = ["--epochs", "2", "--set", "sqdf.batch_size=8", "--set", "baseline.batch_size=8"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert cli.main(["pretrain", "--out", str(out), *FAST]) == 0
    assert cli.main(["distill", "--out", str(out), *FAST]) == 0
    return out


def _manifest(out, command):
    (path,) = (out / "logs").glob(f"{command}-*/manifest.json")
    return json.loads(path.read_text())


def test_precedence_defaults_file_flags():
    assert cli.resolve({}, {})["sqdf.alpha"] == 2.0
    file_vals = cli.parse_config_text("alpha = 3  # bare key means sqdf.alpha\nsqdf.gamma = 0.5\n")
    assert cli.resolve(file_vals, {})["sqdf.alpha"] == 3.0
    cfg = cli.resolve(file_vals, {"sqdf.alpha": "5"})
    assert cfg["sqdf.alpha"] == 5.0 and cfg["sqdf.gamma"] == 0.5


def test_flag_overrides_file(tmp_path):
    conf = tmp_path / "c.cfg"
    conf.write_text("alpha = 3\n")
    ns = cli.build_parser().parse_args(["finetune", "sqdf", "--config", str(conf), "--alpha", "7"])
    cfg = cli.resolve(cli.parse_config_text(conf.read_text()), cli.flag_overrides(ns))
    assert cfg["sqdf.alpha"] == 7.0
    ns = cli.build_parser().parse_args(["finetune", "pg+kl", "--alpha", "0.5"])
    assert cli.resolve({}, cli.flag_overrides(ns))["baseline.alpha"] == 0.5


def test_config_errors():
    with pytest.raises(cli.ConfigKeyError, match="sqdf.bogus"):
        cli.parse_config_text("sqdf.bogus = 1")
    with pytest.raises(cli.ConfigKeyError, match="given twice"):
        cli.parse_config_text("alpha = 1\nsqdf.alpha = 2")
    with pytest.raises(cli.ConfigKeyError, match="no value"):
        cli.parse_config_text("alpha =")
    with pytest.raises(cli.ConfigKeyError, match="sqdf.epochs"):
        cli.resolve({}, {"sqdf.epochs": "many"})


def test_unknown_key_exits_2(tmp_path, capsys):
    assert cli.main(["pretrain", "--out", str(tmp_path), "--set", "pretrain.speed=3"]) == 2
    assert "pretrain.speed" in capsys.readouterr().err


def test_missing_checkpoint_names_key(tmp_path, capsys):
    assert cli.main(["finetune", "sqdf", "--out", str(tmp_path)]) == 2
    assert "run.pretrained" in capsys.readouterr().err
    assert cli.main(["eval", "--out", str(tmp_path)]) == 2
    assert "eval.checkpoint" in capsys.readouterr().err


def test_schedule_is_comma_list():
    ns = cli.build_parser().parse_args(["bbo", "--schedule", "8, 16,32"])
    assert cli.resolve({}, cli.flag_overrides(ns))["bbo.schedule"] == (8, 16, 32)


def test_run_ids_differ_across_methods():
    ids = set()
    for m in cli.METHODS:
        ns = cli.build_parser().parse_args(["finetune", m])
        ids.add(cli.run_id("finetune", cli.resolve({}, cli.flag_overrides(ns))))
    assert len(ids) == len(cli.METHODS)


def test_pretrain_is_reproducible(tmp_path, workdir):
    assert cli.main(["pretrain", "--out", str(tmp_path), *FAST]) == 0
    a = params_digest(load_checkpoint(workdir / "checkpoints" / "pretrained.sqdf"))
    b = params_digest(load_checkpoint(tmp_path / "checkpoints" / "pretrained.sqdf"))
    assert a == b
    assert "loss_decreased" in _manifest(workdir, "pretrain")["checks"]


def test_distill_writes_error_table(workdir):
    man = _manifest(workdir, "distill")
    assert man["checks"]["boundary_identity"] is True
    (table,) = (workdir / "logs").glob("distill-*/prediction_error.csv")
    assert table.read_text().startswith("t,estimator,mean_err,std_err")


@pytest.mark.parametrize("method", ["sqdf", "pg+kl", "refl"])
def test_finetune_and_eval_rerun_identical(workdir, method, capsys):
    base = ["--out", str(workdir), *FT]
    assert cli.main(["finetune", method, *base]) == 0
    (ckpt,) = (workdir / "checkpoints").glob(f"policy-{method}-*.sqdf")
    assert cli.main(["finetune", method, *base]) == 0
    assert params_digest(load_checkpoint(ckpt)) == _manifest_digest(workdir, ckpt.name)
    capsys.readouterr()
    rows = []
    for _ in range(2):
        assert cli.main(["eval", "--out", str(workdir), "--checkpoint", str(ckpt), "--n-samples", "64"]) == 0
        rows.append(capsys.readouterr().out.splitlines()[1])
    assert rows[0] == rows[1]


def _manifest_digest(out, name):
    for path in (out / "logs").glob("finetune-*/manifest.json"):
        body = json.loads(path.read_text())
        if name in body["checkpoints"]:
            return body["checkpoints"][name]
    raise AssertionError(name)


def test_bbo_command(workdir, capsys):
    args = ["bbo", "--out", str(workdir), "--schedule", "16,8", "--set", "bbo.inner_updates=2",
            "--set", "bbo.samples_per_iter=8", "--set", "bbo.surrogate_steps=20", "--set", "bbo.n_heads=2"]
    assert cli.main(args) == 0
    assert "total oracle queries 24" in capsys.readouterr().out


def test_oracle_check_exits_zero(tmp_path, capsys):
    args = ["oracle-check", "--out", str(tmp_path), "--set", "oracle.n_equiv=10", "--set", "oracle.n_bounds=5",
            "--set", "oracle.n_policy=3"]
    assert cli.main(args) == 0
    assert "dp vs enumeration" in capsys.readouterr().out


def test_method_only_for_finetune(tmp_path):
    assert cli.main(["eval", "sqdf", "--out", str(tmp_path)]) == 2


def test_log_level_env(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SQDF_LOG_LEVEL", "verbose")
    assert cli.main(["oracle-check", "--out", str(tmp_path)]) == 2
    assert "SQDF_LOG_LEVEL" in capsys.readouterr().err

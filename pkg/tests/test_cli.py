import json

import pytest

from dseg import preprocess, trainer
from dseg.cli import build_parser, cli_dispatch


def dispatch(*argv):
    return cli_dispatch(list(argv))


SMALL_MODEL = {
    "encoder": {"base_channels": 2, "n_levels": 2},
    "skip_drop_count": 2,
}


class TestParsing:
    def test_help_exits_zero(self, capsys):
        assert dispatch("--help") == 0
        assert "phantom" in capsys.readouterr().out

    def test_subcommand_help_exits_zero(self, capsys):
        assert dispatch("train", "--help") == 0
        assert "--method" in capsys.readouterr().out

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert dispatch("frobnicate") == 2
        capsys.readouterr()

    def test_unknown_flag_is_usage_error(self, capsys):
        assert dispatch("train", "--data", "d", "--out", "o", "--bogus") == 2
        capsys.readouterr()

    def test_missing_required_flag_is_usage_error(self, capsys):
        assert dispatch("phantom", "generate", "--healthy", "2", "--disease", "2") == 2
        capsys.readouterr()

    def test_parser_covers_all_commands(self):
        parser = build_parser()
        text = parser.format_help()
        for cmd in ("phantom", "preprocess", "train", "evaluate", "infer", "render"):
            assert cmd in text


class TestOperationalErrors:
    def test_missing_checkpoint_reports_path(self, tmp_path, capsys):
        ckpt = tmp_path / "missing.ckpt"
        code = dispatch(
            "evaluate", "--checkpoint", str(ckpt), "--data", str(tmp_path),
            "--out", str(tmp_path / "rep"),
        )
        err = capsys.readouterr().err
        assert code == 1
        assert err.startswith("error:")
        assert "missing.ckpt" in err

    def test_unknown_config_key_is_operational_error(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"optimizer": "sgd"}))
        code = dispatch(
            "train", "--data", str(tmp_path), "--out", str(tmp_path / "run"),
            "--config", str(cfg),
        )
        assert code == 1
        assert "optimizer" in capsys.readouterr().err

    def test_invalid_config_json_is_operational_error(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{not json")
        code = dispatch(
            "train", "--data", str(tmp_path), "--out", str(tmp_path / "run"),
            "--config", str(cfg),
        )
        assert code == 1
        capsys.readouterr()

    def test_bad_fractions_is_operational_error(self, tmp_path, capsys):
        code = dispatch(
            "phantom", "generate", "--out", str(tmp_path / "d"),
            "--healthy", "2", "--disease", "2", "--fractions", "0.5,0.5",
        )
        assert code == 1
        capsys.readouterr()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset, config and a 1-epoch training run shared by workflow tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    code = cli_dispatch(
        [
            "phantom", "generate", "--out", str(data),
            "--healthy", "4", "--disease", "4", "--seed", "0",
            "--grid-size", "16", "--blob-radius", "1.5,3.0",
            "--fractions", "0.5,0.25,0.25",
        ]
    )
    assert code == 0

    cfg_path = root / "model.json"
    cfg_path.write_text(json.dumps(SMALL_MODEL))

    run = root / "run"
    code = cli_dispatch(
        [
            "train", "--data", str(data), "--out", str(run),
            "--config", str(cfg_path), "--epochs", "1", "--seed", "0",
        ]
    )
    assert code == 0
    return {"root": root, "data": data, "run": run, "cfg": cfg_path}


class TestWorkflow:
    def test_train_outputs(self, workspace):
        run = workspace["run"]
        assert (run / trainer.BEST_CKPT).exists()
        assert (run / trainer.LOSS_LOG).exists()
        meta = json.loads((run / trainer.RUN_META).read_text())
        assert meta["epochs"] == 1

    def test_config_file_feeds_model_shape(self, workspace):
        snap = json.loads((workspace["run"] / trainer.CONFIG_SNAPSHOT).read_text())
        assert snap["config"]["encoder"]["base_channels"] == 2
        assert snap["config"]["skip_drop_count"] == 2

    def test_flag_overrides_config_file(self, workspace, capsys):
        cfg_path = workspace["root"] / "override.json"
        cfg = dict(SMALL_MODEL)
        cfg["epochs"] = 7
        cfg_path.write_text(json.dumps(cfg))
        run = workspace["root"] / "run_override"
        code = dispatch(
            "train", "--data", str(workspace["data"]), "--out", str(run),
            "--config", str(cfg_path), "--epochs", "0",
        )
        assert code == 0
        assert json.loads((run / trainer.RUN_META).read_text())["epochs"] == 0
        capsys.readouterr()

    def test_evaluate_writes_reports(self, workspace, capsys):
        out = workspace["root"] / "eval"
        code = dispatch(
            "evaluate", "--checkpoint", str(workspace["run"] / trainer.BEST_CKPT),
            "--data", str(workspace["data"]), "--out", str(out), "--split", "test",
        )
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert len(report["cases"]) == 2  # one test case per label
        assert "overall" in capsys.readouterr().out

    def test_infer_writes_containers(self, workspace, capsys):
        cases = preprocess.load_dataset(workspace["data"])
        volume = workspace["data"] / cases[0].case_id / preprocess.VOLUME_FILE
        out = workspace["root"] / "infer"
        code = dispatch(
            "infer", "--checkpoint", str(workspace["run"] / trainer.BEST_CKPT),
            "--volume", str(volume), "--out", str(out),
        )
        assert code == 0
        capsys.readouterr()
        mask = preprocess.read_array(out / "mask.dseg")
        prob = preprocess.read_array(out / "mask_prob.dseg")
        assert mask.shape == prob.shape == cases[0].volume.shape
        assert set(mask.ravel().tolist()) <= {0, 1}
        assert (out / "recon.dseg").exists()
        assert (out / "pseudo_healthy.dseg").exists()

    def test_render_writes_montage(self, workspace, capsys):
        cases = preprocess.load_dataset(workspace["data"])
        out = workspace["root"] / "plots"
        code = dispatch(
            "render", "--checkpoint", str(workspace["run"] / trainer.BEST_CKPT),
            "--data", str(workspace["data"]), "--case-id", cases[0].case_id,
            "--out", str(out), "--run-id", "smoke",
        )
        assert code == 0
        capsys.readouterr()
        assert (out / f"smoke_{cases[0].case_id}.png").exists()

    def test_unknown_case_id_is_operational_error(self, workspace, capsys):
        code = dispatch(
            "render", "--checkpoint", str(workspace["run"] / trainer.BEST_CKPT),
            "--data", str(workspace["data"]), "--case-id", "nope_99999",
            "--out", str(workspace["root"] / "plots"),
        )
        assert code == 1
        assert "nope_99999" in capsys.readouterr().err

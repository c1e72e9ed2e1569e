from fractions import Fraction

import pytest
from filelock import FileLock

from mammofuse.cli import EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, EXIT_OK, main
from mammofuse.config import PAPER_SCALE, SCHEMA, ConfigError, PipelineConfig

SMALL = ["--set", "synth.n_cases=24"]


def test_defaults_and_typing():
    c = PipelineConfig()
    assert c["preprocess.scale"] == Fraction(1, 8)
    assert c["fusion.n_grid"] == (1, 2, 3, 4, 5)
    assert c.train_config("findings").stratified is True
    assert c.train_config("localizer").iterations == 1500


def test_parse_values():
    c = PipelineConfig({"preprocess.scale": "1/4", "fusion.heads": "mlp, svm_rbf", "patch.swa_start": "none",
                        "findings.stratified": "no", "split.ratios": "0.5,0.25,0.25"})
    assert c["preprocess.scale"] == Fraction(1, 4)
    assert c["fusion.heads"] == ("mlp", "svm_rbf")
    assert c["patch.swa_start"] is None and c["findings.stratified"] is False


@pytest.mark.parametrize("changes", [
    {"nope.key": "1"}, {"seed": "x"}, {"findings.stratified": "maybe"}, {"split.ratios": "0.5,0.5"},
    {"fusion.n_grid": "0,1"}, {"fusion.heads": "xgboost"}, {"data.source": "manifest"},
    {"findings.optimizer": "rmsprop"}, {"threads": "0"},
])
def test_config_errors(changes):
    with pytest.raises(ConfigError):
        PipelineConfig(changes)


def test_render_roundtrip(tmp_path):
    c = PipelineConfig({"seed": "11", "preprocess.scale": "1/16", "fusion.targets": "malignancy",
                        "evaluate.froc_fpi": "0.25,2"})
    c.write(tmp_path / "c.txt")
    back = PipelineConfig.load(tmp_path / "c.txt")
    assert back.values == c.values
    assert len(c.render().splitlines()) == len(SCHEMA)


def test_parse_text_errors():
    assert PipelineConfig.parse_text("# only a comment\n\nseed = 3  # trailing\n") == {"seed": "3"}
    with pytest.raises(ConfigError, match=":2: expected"):
        PipelineConfig.parse_text("seed = 1\nbroken line")
    with pytest.raises(ConfigError, match="unknown config key"):
        PipelineConfig.parse_text("what = 1")
    with pytest.raises(ConfigError, match="cannot read"):
        PipelineConfig.load("/nonexistent/config.txt")


def test_full_scale_preset():
    c = PipelineConfig.load(paper_scale=True, overrides={"seed": "1"})
    for k, v in PAPER_SCALE.items():
        assert c[k] == v
    assert c["backbone.feature_width"] == 1024 and c.train_config("localizer").optimizer == "sgd"


# --- command line ---

def test_cli_config_error(tmp_path, capsys):
    assert main(["split", "--out", str(tmp_path), "--set", "bogus=1"]) == EXIT_CONFIG
    assert "unknown config key" in capsys.readouterr().err
    assert main(["split", "--out", str(tmp_path), "--set", "noequals"]) == EXIT_CONFIG


def test_cli_missing_artifacts(tmp_path, capsys):
    out = str(tmp_path / "run")
    assert main(["split", "--out", out]) == EXIT_MISSING
    assert main(["report", "--out", out]) == EXIT_MISSING
    assert main(["generate", "--out", out] + SMALL) == EXIT_OK
    assert main(["split", "--out", out] + SMALL) == EXIT_OK
    assert "train=" in capsys.readouterr().out
    assert main(["extract", "--out", out] + SMALL) == EXIT_MISSING
    assert "missing checkpoint: localizer" in capsys.readouterr().err
    assert (tmp_path / "run" / "config.txt").exists()


def test_cli_generate_refuses_nonempty(tmp_path, capsys):
    out = str(tmp_path)
    (tmp_path / "data").mkdir()
    (tmp_path / "data" / "keep.txt").write_text("x")
    assert main(["generate", "--out", out] + SMALL) == EXIT_CONFIG
    assert "--force" in capsys.readouterr().err
    assert (tmp_path / "data" / "keep.txt").exists()
    assert main(["--force", "generate", "--out", out] + SMALL) == EXIT_OK
    assert not (tmp_path / "data" / "keep.txt").exists()


def test_cli_data_error(tmp_path, capsys):
    bad = tmp_path / "m.csv"
    bad.write_text("case_id\nc1\n")
    args = ["split", "--out", str(tmp_path / "run"), "--set", "data.source=manifest", "--set", f"data.manifest={bad}"]
    assert main(args) == EXIT_DATA
    assert "missing column" in capsys.readouterr().err


def test_cli_lock(tmp_path, capsys):
    lock = FileLock(str(tmp_path / ".lock"))
    with lock.acquire(timeout=0):
        assert main(["split", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "in use" in capsys.readouterr().err


def test_cli_usage():
    with pytest.raises(SystemExit) as exc:
        main(["train", "nothing"])
    assert exc.value.code == 2

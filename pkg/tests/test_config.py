import pytest

from convs2svc.config import RunConfig
from convs2svc.errors import ConfigError


def test_text_round_trip_is_exact():
    cfg = RunConfig()
    cfg.model.mode = "many2many"
    cfg.model.n_speakers = 3
    cfg.train.lr = 1.0 / 3.0
    cfg.loss.dal = 123.456
    cfg.paths.manifest = "data/manifest.json"
    again = RunConfig.from_text(cfg.to_text(), env={})
    assert again == cfg
    assert again.to_text() == cfg.to_text()


def test_file_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.train.iterations = 17
    cfg.save(tmp_path / "run.ini")
    assert RunConfig.load(tmp_path / "run.ini", env={}).train.iterations == 17
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.ini", env={})


def test_partial_file_keeps_defaults():
    cfg = RunConfig.from_text("[train]\nbatch_size = 4\n", env={})
    assert cfg.train.batch_size == 4
    assert cfg.train.lr == RunConfig().train.lr
    assert cfg.model.mode == "pairwise"


def test_environment_overrides_win():
    env = {"CONVS2SVC__TRAIN__LR": "0.01", "CONVS2SVC__MODEL__MODE": "any2many", "HOME": "/x"}
    cfg = RunConfig.from_text("[train]\nlr = 0.5\n", env=env)
    assert cfg.train.lr == 0.01 and cfg.model.mode == "any2many"
    with pytest.raises(ConfigError):
        RunConfig.from_text("", env={"CONVS2SVC__LR": "1"})


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[train]\nnot_a_key = 1\n",
    "[train]\nbatch_size = many\n",
    "no section header\n",
])
def test_malformed_configs(text):
    with pytest.raises(ConfigError):
        RunConfig.from_text(text, env={})


def test_validation():
    cfg = RunConfig()
    cfg.model.mode = "sideways"
    with pytest.raises(ConfigError):
        cfg.validate()
    cfg = RunConfig()
    cfg.loss.nu = -1.0
    with pytest.raises(ConfigError):
        cfg.validate()
    good = RunConfig()
    good.features.r = 2
    mc = good.validate().model_config()
    assert mc.r == 2 and mc.hidden > 0

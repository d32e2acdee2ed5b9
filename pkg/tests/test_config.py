import pytest

from bcde.config import ConfigError, RunConfig, dump_config, load_config, parse_config_text


def test_defaults():
    cfg = parse_config_text("")
    assert cfg.task == "quadrant2" and cfg.mode == "hybrid"
    assert (cfg.alpha, cfg.lam, cfg.iw_eval, cfg.seeds) == (0.5, 1e-2, 100, (0, 1, 2))


def test_shift_tasks_default_lambda():
    assert parse_config_text("task = shift-sensitive").lam == 0.1
    assert parse_config_text("task = shift-invariant\nlambda = 0.5").lam == 0.5
    assert parse_config_text("task = shift-sensitive").geometry_task == "topdown"


def test_values_and_comments():
    cfg = parse_config_text("# run\nhidden = 32, 16\nbinarize = false  # raw\nlambda = 3e-3\nmode = hybrid-factored\n")
    assert cfg.hidden == (32, 16) and cfg.binarize is False and cfg.lam == 3e-3
    assert cfg.inference == "factored"


@pytest.mark.parametrize("text,fragment", [
    ("lamda = 0.1", "lamda"),
    ("lam = 0.1", "lam"),
    ("alpha = 0.1\nalpha = 0.2", "duplicate"),
    ("alpha = 1.5", "alpha"),
    ("n_l = many", "n_l"),
    ("binarize = maybe", "binarize"),
    ("task = quadrant4", "task"),
    ("just words", "key = value"),
])
def test_bad_configs_name_the_problem(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config_text(text)


def test_dump_round_trip(tmp_path):
    cfg = RunConfig(task="quadrant1", hidden=(7, 3), lam=0.25, seeds=(4,), binarize=False)
    path = tmp_path / "c.txt"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert "lambda = 0.25" in dump_config(cfg)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")

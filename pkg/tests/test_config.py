import pytest

from asyncomarl.config import ConfigError, RunConfig, load_config, parse_config


def test_defaults_validate():
    cfg = RunConfig()
    cfg.validate()
    assert cfg.delta == 100.0
    assert cfg.comm_radius == 500.0


def test_round_trip_through_text():
    cfg = RunConfig().replace(seed=7, n_agents=4, goal_radius=80.0, run_dir="runs/x")
    assert parse_config(cfg.to_text()) == cfg
    assert parse_config(RunConfig().to_text()) == RunConfig()


def test_comments_and_underscores():
    cfg = parse_config("# header\nseed = 4  # trailing\ntotal_env_steps = 5_000\n")
    assert cfg.seed == 4 and cfg.total_env_steps == 5000


@pytest.mark.parametrize(
    "text,line",
    [
        ("seed = 1\nbogus = 2\n", 2),
        ("seed = 1\nseed = 2\n", 2),
        ("\n\nn_agents = three\n", 3),
        ("seed = 1\nthis line has no equals\n", 2),
        ("seed = 1\nreward_variant = sometimes\n", 2),
        ("episode_len = 50\n", 1),
    ],
)
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError, match=rf"cfg:{line}:"):
        parse_config(text, "cfg")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.cfg")


def test_rovertower_rejects_obstacles():
    with pytest.raises(ConfigError):
        RunConfig(env="rovertower").validate()
    RunConfig(env="rovertower", n_obstacles=0).validate()

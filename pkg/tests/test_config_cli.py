import dataclasses
import io

import numpy as np
import pytest

from v2ialloc.agents import HPPOConfig
from v2ialloc.cli import (
    CONFIDENCE_FIELDS,
    METRICS_FIELDS,
    OUTPUT_ENV_VAR,
    cmd_inspect_scenario,
    main,
    read_csv,
)
from v2ialloc.config import (
    ConfigError,
    RunConfig,
    config_from_dict,
    config_to_dict,
    dump_config,
    load_config,
    parse_config,
    save_config,
)
from v2ialloc.runner import BANDWIDTH_SWEEP_HZ, PERIOD_SWEEP_MS
from v2ialloc.scenario import load_scenario


def test_default_config_round_trips():
    cfg = RunConfig()
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    assert dump_config(parse_config(text)) == text
    assert text.startswith("# v2ialloc run configuration")


def test_modified_config_round_trips(tmp_path):
    cfg = RunConfig()
    cfg.channel = dataclasses.replace(cfg.channel, total_bandwidth_hz=5e6)
    cfg.hppo = HPPOConfig(hidden_sizes=(64, 32), seed=9)
    cfg.run.seeds = [3, 1, 4]
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    back = load_config(path)
    assert back == cfg
    assert back.hppo.hidden_sizes == (64, 32)


def test_partial_config_uses_defaults():
    cfg = parse_config("env:\n  lambda_det: 0.0\n")
    assert cfg.env.lambda_det == 0.0
    assert cfg.env.lambda_rate == RunConfig().env.lambda_rate


@pytest.mark.parametrize("text", ["nonsense: {}\n", "env:\n  not_a_field: 1\n",
                                  "run:\n  policy: greedy\n", "env:\n  n_cavs: 3\n"])
def test_bad_configs_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_dict_round_trip():
    d = config_to_dict(RunConfig())
    assert config_to_dict(config_from_dict(d)) == d


# -- CLI ----------------------------------------------------------------------------

def _run(args, out):
    assert main(args + ["--out", str(out)]) == 0


def test_eval_is_byte_identical_across_runs(tmp_path):
    args = ["eval", "--episodes", "2", "--policy", "random", "--seed", "5"]
    _run(args, tmp_path / "a")
    _run(args, tmp_path / "b")
    for name in ("metrics.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = read_csv(tmp_path / "a" / "metrics.csv")
    assert len(rows) == 2
    assert list(rows[0]) == list(METRICS_FIELDS)


def test_eval_zero_episodes_gives_header_only(tmp_path):
    _run(["eval", "--episodes", "0", "--policy", "max_rate"], tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].startswith("#")
    assert lines[1].split(",") == list(METRICS_FIELDS)
    assert len(lines) == 2


def test_random_with_zero_detection_weight_returns_rate_term(tmp_path):
    cfg = RunConfig()
    cfg.env = dataclasses.replace(cfg.env, lambda_det=0.0)
    cfg.run.policy = "random"
    cfg.run.episodes = 3
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    _run(["eval", "--config", str(path)], tmp_path)
    for row in read_csv(tmp_path / "metrics.csv"):
        # per-step rate bonus summed over the 40 steps
        expected = cfg.env.lambda_rate * float(row["sum_rate_mbps"]) * cfg.env.n_steps
        assert float(row["mean_return"]) == pytest.approx(expected, rel=1e-9)


def test_episode_logs(tmp_path):
    _run(["eval", "--episodes", "1", "--policy", "max_features", "--episode-log"], tmp_path)
    log = read_csv(tmp_path / "episode_log_max_features.csv")
    assert len(log) == 40 * 4
    conf = read_csv(tmp_path / "confidence_max_features.csv")
    assert list(conf[0]) == list(CONFIDENCE_FIELDS)
    per_cav = {}
    for r in conf:
        per_cav.setdefault(r["cav_id"], []).append(float(r["total_confidence"]))
    # remaining confidence only ever drains
    for trace in per_cav.values():
        assert all(b <= a for a, b in zip(trace, trace[1:]))


@pytest.mark.parametrize("axis,values", [("bandwidth", BANDWIDTH_SWEEP_HZ),
                                         ("period", PERIOD_SWEEP_MS)])
def test_sweep_row_counts(tmp_path, axis, values):
    _run(["sweep", "--axis", axis, "--episodes", "1", "--policy", "max_rate"], tmp_path)
    rows = read_csv(tmp_path / f"sweep_{axis}.csv")
    assert len(rows) == len(values)
    col = "bandwidth_hz" if axis == "bandwidth" else "period_ms"
    assert [float(r[col]) for r in rows] == [float(v) for v in values]


def test_train_zero_episodes_writes_checkpoint(tmp_path):
    _run(["train", "--episodes", "0"], tmp_path)
    assert (tmp_path / "hppo.npz").exists()
    assert load_config(tmp_path / "config.yaml").run.episodes == 0
    _run(["eval", "--episodes", "1", "--policy", "hppo",
          "--checkpoint", str(tmp_path / "hppo.npz")], tmp_path / "ev")
    assert len(read_csv(tmp_path / "ev" / "metrics.csv")) == 1


def test_missing_checkpoint_is_an_error(tmp_path, capsys):
    code = main(["eval", "--policy", "hppo", "--checkpoint", str(tmp_path / "none.npz"),
                 "--episodes", "1", "--out", str(tmp_path)])
    assert code == 2
    assert "checkpoint" in capsys.readouterr().err


def test_all_policies_without_checkpoint_skips_hppo(tmp_path):
    _run(["eval", "--episodes", "1"], tmp_path)
    names = {r["policy"] for r in read_csv(tmp_path / "metrics.csv")}
    assert names == {"random", "max_rate", "max_features"}


def test_env_var_overrides_output_dir(tmp_path, monkeypatch):
    target = tmp_path / "env_out"
    monkeypatch.setenv(OUTPUT_ENV_VAR, str(target))
    assert main(["eval", "--episodes", "0", "--policy", "random",
                 "--out", str(tmp_path / "ignored")]) == 0
    assert (target / "metrics.csv").exists()
    assert not (tmp_path / "ignored").exists()


def test_inspect_scenario(tmp_path):
    cfg = RunConfig()
    cfg.run.output_dir = str(tmp_path)
    buf = io.StringIO()
    path = cmd_inspect_scenario(cfg, 17, stream=buf)
    sc = load_scenario(path)
    assert len(sc.objects) == cfg.scenario.n_objects
    assert sc.agent_xy.shape == (cfg.scenario.n_cavs + 1, 2)
    assert np.array_equal(sc.occupancy, (sc.object_id >= 0).astype(sc.occupancy.dtype))
    assert "CAV 4" in buf.getvalue()

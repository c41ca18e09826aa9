import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2ialloc.agents import MaxRatePolicy, RandomPolicy
from v2ialloc.channel import Allocation, ChannelParams
from v2ialloc.env import AllocationError, CoopPerceptionEnv, EnvConfig, compute_reward
from v2ialloc.perception import local_confidence
from v2ialloc.runner import run_episode
from v2ialloc.scenario import ScenarioConfig, scenario_from_grid


def silent(env):
    return Allocation.from_choices([0] * env.n_cavs, [-100.0] * env.n_cavs, env.n_rbs)


def test_reward_examples():
    assert compute_reward([4e6, 4e6], 0.5, 0.49, 0.025, 20.0) == pytest.approx(0.4)
    assert compute_reward([0.0, 0.0], 0.3, 0.3, 0.025, 20.0) == 0.0
    assert compute_reward([2e6, 6e6], 0.3, 0.1, 0.025, 0.0) == pytest.approx(0.2)


def test_default_dimensions_and_timing():
    env = CoopPerceptionEnv()
    s = env.reset(1, 2)
    assert env.state_dim == 16 and s.shape == (16,)
    assert env.power_state_dim == 24
    assert env.config.n_steps == 40 and env.config.n_substeps == 5
    assert env.channel.h2.shape[:2] == (40, 5)
    assert env.config.n_steps * env.config.n_substeps == 200


def test_reset_deterministic_and_rsu_starts_from_local_map():
    env = CoopPerceptionEnv()
    a = env.reset(5, 6)
    sc = env.scenario
    expected = local_confidence(sc.quality[0], sc.occupancy, sc.clutter[0])
    assert np.array_equal(env.ledger.rsu_conf, expected)
    b = env.reset(5, 6)
    assert np.array_equal(a, b)


def test_state_layout():
    env = CoopPerceptionEnv()
    s = env.reset(3, 4).reshape(4, 4)
    assert np.allclose(s[:, 0], 10 * np.log10(env.channel.alpha))
    assert np.array_equal(s[:, 1:3], env.channel.h2[0, 0])
    assert np.allclose(s[:, 3], env.ledger.feature_values())
    eta = np.eye(4, 2)
    assert np.array_equal(env.power_state(eta)[16:], eta.ravel())


def occluded_scenario():
    # the RSU sits behind a wall; the CAV sees the target object
    grid = np.full((12, 12), -1)
    grid[5, 0:9] = 0  # wall
    grid[9:11, 3:5] = 1  # object hidden from the RSU
    cfg = ScenarioConfig(n_cavs=1, clutter_max=0.0)
    return scenario_from_grid(grid, [[3.5, 1.5], [6.5, 8.5]], cfg)


def test_cav_seeing_occluded_object_has_positive_feature_value():
    sc = occluded_scenario()
    assert sc.visibility[0][9:11, 3:5].sum() == 0
    env = CoopPerceptionEnv(EnvConfig(n_cavs=1), ChannelParams(), sc.config)
    env.reset(0, 0, scenario=sc)
    assert env.ledger.feature_values()[0] > 0


def test_silent_allocation_changes_nothing():
    env = CoopPerceptionEnv()
    env.reset(1, 1)
    conf = env.ledger.rsu_conf.copy()
    res = env.step(silent(env))
    assert (res.info.budgets == 0).all() and (res.info.cells_sent == 0).all()
    assert res.reward == 0.0
    assert res.info.loss_after.det == res.info.loss_before.det
    assert np.array_equal(conf, env.ledger.rsu_conf)


def test_done_after_forty_steps_and_no_more():
    env = CoopPerceptionEnv()
    env.reset(0, 0)
    for t in range(40):
        res = env.step(silent(env))
        assert res.done == (t == 39)
    with pytest.raises(RuntimeError):
        env.step(silent(env))


def test_single_cav_with_large_budget_empties_its_gain_map():
    grid = np.full((6, 6), -1)
    grid[1:3, 1:3] = 0
    cfg = ScenarioConfig(n_cavs=1, clutter_max=0.0)
    sc = scenario_from_grid(grid, [[5.5, 5.5], [0.5, 0.5]], cfg)
    env = CoopPerceptionEnv(EnvConfig(n_cavs=1, channels=1, bits=1), ChannelParams(), sc.config)
    env.reset(0, 0, scenario=sc)
    assert env.ledger.gains()[0].sum() > 0
    res = env.step(Allocation.from_choices([0], [23.0], 2))
    assert res.info.budgets[0] >= (env.ledger.base_conf[0] > 0).sum()
    assert not env.ledger.gains()[0].any()


def test_invalid_allocations_rejected():
    env = CoopPerceptionEnv()
    env.reset(0, 0)
    bad_eta = Allocation(eta=np.ones((4, 2), int), power_dbm=np.full(4, 23.0))
    with pytest.raises(AllocationError):
        env.step(bad_eta)
    bad_power = Allocation.from_choices([0, 1, 0, 1], [23.0, 5.0, 23.0, 23.0], 2)
    with pytest.raises(AllocationError):
        env.step(bad_power)
    with pytest.raises(AllocationError):
        env.step(Allocation.from_choices([0, 1], [23.0, 23.0], 2))


def test_config_validation():
    with pytest.raises(ValueError):
        EnvConfig(period_ms=7.0).validate()
    with pytest.raises(ValueError):
        EnvConfig(lambda_det=-1.0).validate()
    with pytest.raises(ValueError):
        CoopPerceptionEnv(EnvConfig(n_cavs=3), ChannelParams(), ScenarioConfig(n_cavs=4))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_loss_telescopes_and_budgets_respected(scenario_seed, channel_seed):
    env = CoopPerceptionEnv()
    pol = RandomPolicy(env.channel_params, 4, seed=channel_seed)
    deltas, sent_total = [], []

    def check(env_, alloc, res):
        info = res.info
        assert (info.cells_sent <= np.floor(info.budgets)).all()
        deltas.append(info.loss_after.det - info.loss_before.det)
        sent_total.extend(info.cells_sent)

    run_episode(env, pol, scenario_seed, channel_seed, check=check)
    assert len(deltas) == 40
    assert sum(deltas) == pytest.approx(env.loss.det - env.initial_loss.det, abs=1e-12)
    assert env.ledger.cum_mask.sum() == sum(int(c) for c in sent_total)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_clutter_free_cls_loss_non_increasing(seed):
    sc_cfg = ScenarioConfig(clutter_max=0.0)
    env = CoopPerceptionEnv(EnvConfig(), ChannelParams(), sc_cfg)
    losses = []
    run_episode(env, MaxRatePolicy(env.channel_params, 4), seed,
                check=lambda e, a, r: losses.append(r.info.loss_after.cls))
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_shorter_period_sees_prefix_of_fading():
    long_env = CoopPerceptionEnv()
    short_env = CoopPerceptionEnv(dataclasses.replace(EnvConfig(), period_ms=100.0))
    long_env.reset(4, 9)
    short_env.reset(4, 9)
    assert np.array_equal(short_env.channel.h2, long_env.channel.h2[:20])
    assert np.array_equal(short_env.channel.alpha, long_env.channel.alpha)

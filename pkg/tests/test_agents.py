import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from v2ialloc.agents import (
    HPPOAgent,
    HPPOConfig,
    MaxFeaturesPolicy,
    MaxRatePolicy,
    PPOLayer,
    RandomPolicy,
    clipped_objective,
    compute_advantages,
    critic_loss,
    encode_joint,
    joint_table,
    make_policy,
    sum_rate,
)
from v2ialloc.channel import ChannelParams

P = ChannelParams()
LEVELS = P.power_levels_dbm


def test_joint_tables_cover_action_spaces():
    rb = joint_table(4, 2)
    pw = joint_table(4, 3)
    assert rb.shape == (16, 4) and pw.shape == (81, 4)
    for i, row in enumerate(pw):
        assert encode_joint(row, 3) == i
    assert rb[1].tolist() == [0, 0, 0, 1]  # link 0 is the most significant digit


# -- random baseline --------------------------------------------------------------

def test_random_policy_uniform_and_valid():
    pol = RandomPolicy(P, 4, seed=0)
    counts = np.zeros((2, 3))
    n = 100_000
    lv = list(LEVELS)
    for _ in range(n // 4):
        a = pol.act_random()
        a.validate(LEVELS)
        assert (a.eta.sum(axis=1) == 1).all()
        for m in range(4):
            counts[a.rb_of(m), lv.index(a.power_dbm[m])] += 1
    freq = counts / counts.sum()
    assert np.abs(freq - 1 / 6).max() < 0.01


def test_random_policy_reproducible():
    a = [RandomPolicy(P, 4, seed=9).act_random() for _ in range(2)]
    assert np.array_equal(a[0].eta, a[1].eta) and np.array_equal(a[0].power_dbm, a[1].power_dbm)


# -- max rate ------------------------------------------------------------------------

def test_max_rate_single_active_link_takes_best_rb_at_full_power():
    pol = MaxRatePolicy(P, 4)
    g = np.full((4, 2), 1e-9)
    g[2] = [1e-11, 3e-11]
    a = pol.act_max_rate(g, active=[False, False, True, False])
    assert a.rb_of(2) == 1 and a.power_dbm[2] == 23.0
    assert (a.power_dbm[[0, 1, 3]] == -100.0).all()


def test_max_rate_silences_one_of_two_interfering_links():
    p1 = ChannelParams(n_rbs=1, total_bandwidth_hz=1.5e6)
    pol = MaxRatePolicy(p1, 2)
    a = pol.act_max_rate(np.full((2, 1), 1e-9))
    assert sorted(a.power_dbm.tolist()) == [-100.0, 23.0]
    # the hand evaluation of all nine power pairs agrees
    best, _ = oracles.max_rate_brute([[1e-9], [1e-9]], LEVELS, 1, 1.5e6, p1.noise_power)
    assert [LEVELS[i] for i in best[1]] == a.power_dbm.tolist()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.data())
def test_max_rate_matches_brute_force(m, data):
    g = data.draw(arrays(float, (m, 2), elements=st.floats(1e-13, 1e-8)))
    pol = MaxRatePolicy(P, m)
    a = pol.act_max_rate(g)
    (rbs, pw), val = oracles.max_rate_brute(g.tolist(), LEVELS, 2, P.rb_bandwidth_hz, P.noise_power)
    assert sum_rate(a, g, P) == pytest.approx(val, rel=1e-12)
    assert a.power_dbm.tolist() == [LEVELS[i] for i in pw]
    assert [a.rb_of(i) for i in range(m)] == list(rbs)


@settings(max_examples=30, deadline=None)
@given(arrays(float, (4, 2), elements=st.floats(1e-13, 1e-8)), st.integers(0, 2**32))
def test_max_rate_dominates_random_allocations(g, seed):
    best = sum_rate(MaxRatePolicy(P, 4).act_max_rate(g), g, P)
    rnd = RandomPolicy(P, 4, seed)
    for _ in range(50):
        assert sum_rate(rnd.act_random(), g, P) <= best * (1 + 1e-12)


# -- max features --------------------------------------------------------------------

@pytest.mark.parametrize("counts, chosen", [([10, 5, 7, 1], (0, 2)), ([3, 3, 0, 0], (0, 1)),
                                            ([0, 0, 0, 0], (0, 1))])
def test_max_features_examples(counts, chosen):
    a = MaxFeaturesPolicy(P, 4).act_max_features(counts)
    first, second = chosen
    assert a.rb_of(first) == 0 and a.rb_of(second) == 1
    assert a.power_dbm[first] == a.power_dbm[second] == 23.0
    others = [m for m in range(4) if m not in chosen]
    assert (a.power_dbm[others] == -100.0).all()


def test_max_features_needs_two_rbs():
    with pytest.raises(ValueError):
        MaxFeaturesPolicy(ChannelParams(n_rbs=1), 4)


# -- PPO pieces ------------------------------------------------------------------------

def test_clipped_objective_examples():
    assert clipped_objective(1.0, 2.0, 0.2) == 2.0
    assert clipped_objective(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_objective(0.5, -1.0, 0.2) == pytest.approx(-0.8)


@settings(max_examples=300, deadline=None)
@given(st.floats(1e-3, 5.0), st.floats(-10, 10), st.floats(0.01, 0.99))
def test_clipped_objective_properties(r, a, eps):
    obj = float(clipped_objective(r, a, eps))
    assert obj == pytest.approx(oracles.clipped(r, a, eps), abs=1e-12)
    assert obj <= r * a + 1e-12
    if 1 - eps <= r <= 1 + eps:
        assert obj == pytest.approx(r * a, abs=1e-12)
    if obj != pytest.approx(r * a, abs=1e-12):
        assert abs(obj) <= (1 + eps) * abs(a) + 1e-12


def test_critic_loss_examples():
    assert critic_loss([1.0], [0.0]) == 1.0
    assert critic_loss([2.0, 3.0], [2.0, 3.0]) == 0.0
    assert critic_loss([1.0, 3.0], [0.0, 0.0]) == 5.0
    with pytest.raises(ValueError):
        critic_loss([1.0], [1.0, 2.0])


def test_gae_examples():
    adv, ret = compute_advantages([2.0], [0.5, 9.0], [True], 1.0, 1.0, normalize=False)
    assert adv[0] == 1.5 and ret[0] == 2.0
    adv, _ = compute_advantages([0.0] * 5, [0.0] * 6, [False] * 4 + [True], 0.99, 0.95)
    assert not adv.any()
    adv, _ = compute_advantages([1.0, 1.0], [0.5, 0.5, 0.0], [False, True], 0.9, 0.95,
                                normalize=False)
    assert adv[1] == pytest.approx(0.5) and adv[0] == pytest.approx(0.95 + 0.9 * 0.95 * 0.5)


def test_gae_two_step_example_with_bootstrap():
    # r = [1, 1] with V = [0.5, 0.5, 0] gives delta = [0.95, 0.5]
    adv, _ = compute_advantages([1.0, 1.0], [0.5, 0.5, 0.0], [False, False], 0.9, 0.95,
                                normalize=False)
    assert adv.tolist() == pytest.approx([0.95 + 0.9 * 0.95 * 0.5, 0.5])
    # delta = [0.95, 0.4] needs r_1 = 0.9; then A_0 = 1.292
    adv, _ = compute_advantages([1.0, 0.4 + 0.5], [0.5, 0.5, 0.0], [False, False], 0.9, 0.95,
                                normalize=False)
    assert adv[1] == pytest.approx(0.4) and adv[0] == pytest.approx(1.292, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.floats(0.5, 1.0), st.floats(0.0, 1.0), st.data())
def test_gae_matches_oracle_and_normalises(n, gamma, lam, data):
    rewards = data.draw(arrays(float, n, elements=st.floats(-5, 5)))
    values = data.draw(arrays(float, n + 1, elements=st.floats(-5, 5)))
    dones = data.draw(arrays(bool, n))
    raw, ret = compute_advantages(rewards, values, dones, gamma, lam, normalize=False)
    assert np.allclose(raw, oracles.gae(rewards, values, dones, gamma, lam), atol=1e-10)
    assert np.allclose(ret, raw + values[:n], atol=1e-12)
    adv, _ = compute_advantages(rewards, values, dones, gamma, lam)
    if n > 1 and raw.std() > 1e-6:
        assert abs(adv.mean()) < 1e-9 and abs(adv.std() - 1.0) < 1e-6


# -- layers ----------------------------------------------------------------------------

def small_config(**kw):
    base = dict(hidden_sizes=(16, 8), update_interval_episodes=1, minibatch_size=20, epochs=4)
    base.update(kw)
    return HPPOConfig(**base)


def test_greedy_uniform_logits_picks_lowest_index():
    layer = PPOLayer("t", 3, 5, small_config(), np.random.default_rng(0))
    layer.actor.weights[-1][:] = 0.0
    layer.actor.biases[-1][:] = 0.0
    a, logp, _ = layer.act(np.ones(3), "greedy")
    assert a == 0 and logp == pytest.approx(np.log(1 / 5))


def test_greedy_invariant_to_logit_shift():
    layer = PPOLayer("t", 3, 7, small_config(), np.random.default_rng(1))
    x = np.array([0.3, -1.0, 2.0])
    a0 = layer.act(x, "greedy")[0]
    layer.actor.biases[-1] += 12.5
    assert layer.act(x, "greedy")[0] == a0


def test_sampled_frequencies_match_softmax():
    from v2ialloc.nn import softmax
    layer = PPOLayer("t", 2, 4, small_config(), np.random.default_rng(2))
    layer.actor.weights[-1][:] = 0.0
    layer.actor.biases[-1][:] = [0.0, 1.0, -0.5, 0.3]
    rng = np.random.default_rng(3)
    x = np.zeros(2)
    probs = softmax(layer.logits(x))
    draws = np.array([layer.act(x, "sample", rng)[0] for _ in range(100_000)])
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert np.abs(freq - probs).max() < 0.01
    a, logp, _ = layer.act(x, "sample", rng)
    assert logp == pytest.approx(np.log(probs[a]), abs=1e-12)


def test_update_with_zero_advantages_keeps_actor():
    layer = PPOLayer("t", 2, 3, small_config(), np.random.default_rng(4))
    layer.critic.weights[-1][:] = 0.0
    layer.critic.biases[-1][:] = 0.0
    before = [p.copy() for p in layer.actor.params()]
    rng = np.random.default_rng(5)
    for i in range(40):
        s = rng.normal(size=2)
        a, lp, v = layer.act(s, "sample", rng)
        layer.buffer.add(s, a, lp, 0.0, v, i % 10 == 9, rng.normal(size=2))
    layer.update()
    assert all(np.array_equal(b, p) for b, p in zip(before, layer.actor.params()))
    assert len(layer.buffer) == 0


def test_two_state_bandit_converges_to_better_arm():
    cfg = small_config(actor_lr=3e-3, critic_lr=3e-3, epochs=4)
    layer = PPOLayer("t", 2, 2, cfg, np.random.default_rng(6))
    rng = np.random.default_rng(7)
    states = np.eye(2)
    best = [1, 0]  # state-dependent better arm, reward gap 1
    for _ in range(200):
        for _ in range(20):
            k = int(rng.integers(2))
            a, lp, v = layer.act(states[k], "sample", rng)
            layer.buffer.add(states[k], a, lp, float(a == best[k]), v, True, states[k])
        layer.update()
    assert [layer.act(states[k], "greedy")[0] for k in range(2)] == best


def test_layer_updates_are_independent():
    agent = HPPOAgent(4, P, small_config())
    rng = np.random.default_rng(8)
    power_before = [p.copy() for p in agent.power_layer.actor.params()]
    for i in range(30):
        s = rng.normal(size=16)
        a, lp, v = agent.ppo_act("rb", s, "sample")
        agent.rb_layer.buffer.add(s, a, lp, rng.normal(), v, i % 10 == 9, rng.normal(size=16))
    stats = agent.update()
    assert set(stats) == {"rb_actor_obj", "rb_critic_loss"}
    assert all(np.array_equal(b, p) for b, p in zip(power_before, agent.power_layer.actor.params()))


def test_agent_outputs_valid_allocations():
    agent = HPPOAgent(4, P, small_config())
    rng = np.random.default_rng(9)
    for mode in ("greedy", "sample"):
        for _ in range(50):
            alloc, rb, pw = agent.decide(rng.normal(size=16), mode)
            alloc.validate(LEVELS)
            assert (alloc.eta.sum(axis=1) == 1).all()
            assert 0 <= rb[1] < 16 and 0 <= pw[1] < 81
            assert pw[0].shape == (24,)


def test_checkpoint_round_trip(tmp_path):
    agent = HPPOAgent(4, P, small_config(seed=3))
    agent.rb_layer.scaler.fit(np.random.default_rng(0).normal(size=(50, 16)))
    agent.power_layer.scaler.fit(np.random.default_rng(1).normal(size=(50, 24)))
    path = tmp_path / "a.npz"
    agent.save(path)
    clone = HPPOAgent.load(path, P)
    x = np.random.default_rng(2).normal(size=16)
    assert agent.decide(x, "greedy")[1][1] == clone.decide(x, "greedy")[1][1]
    for la, lb in zip(agent.layers, clone.layers):
        for pa, pb in zip(la.actor.params() + la.critic.params(),
                          lb.actor.params() + lb.critic.params()):
            assert np.array_equal(pa, pb)
    assert make_policy("hppo", P, 4, checkpoint=path).name == "hppo"


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        HPPOAgent.load(tmp_path / "nope.npz", P)
    with pytest.raises(ValueError):
        make_policy("hppo", P, 4)
    with pytest.raises(ValueError):
        make_policy("bogus", P, 4)


def test_config_validation():
    with pytest.raises(ValueError):
        HPPOConfig(clip_eps=1.5).validate()
    with pytest.raises(ValueError):
        HPPOConfig(actor_lr=0.0).validate()


def test_every_rb_action_assigns_exactly_one_rb():
    for rbs, pw in itertools.product(joint_table(4, 2), joint_table(4, 3)[:5]):
        eta = np.zeros((4, 2), int)
        eta[np.arange(4), rbs] = 1
        assert (eta.sum(axis=1) == 1).all()

"""Episode rollouts, HPPO training, evaluation and sweeps."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .agents import HPPOAgent, HPPOConfig, Policy, eta_from_rbs, make_policy
from .channel import Allocation, ChannelParams
from .env import CoopPerceptionEnv, EnvConfig
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

POLICIES = ("random", "max_rate", "max_features", "hppo")
BANDWIDTH_SWEEP_HZ = tuple(round(2.5e6 + 0.1e6 * i, 1) for i in range(11))
PERIOD_SWEEP_MS = (100.0, 150.0, 180.0, 200.0)

# scenario-seed pools in the 2578 / 15 / 300 proportions of the frame splits
TRAIN_SEED_BASE, N_TRAIN_SEEDS = 0, 2578
VALID_SEED_BASE, N_VALID_SEEDS = 1_000_000, 15
TEST_SEED_BASE, N_TEST_SEEDS = 2_000_000, 300


def validation_seeds(n: int = N_VALID_SEEDS) -> list[int]:
    return [VALID_SEED_BASE + i for i in range(n)]


def test_seeds(n: int = N_TEST_SEEDS) -> list[int]:
    return [TEST_SEED_BASE + i for i in range(n)]


def channel_seed_for(scenario_seed: int) -> int:
    # paired comparisons: one channel stream per scenario seed
    return int(np.random.SeedSequence([scenario_seed, 0xC4A]).generate_state(1)[0])


@dataclass
class EpisodeResult:
    scenario_seed: int
    total_return: float
    sum_rate_mbps: float  # mean over steps of the summed link rates
    loss_det: float
    loss_cls: float
    ap50: float
    ap70: float
    steps: list = field(default_factory=list)


def run_episode(env: CoopPerceptionEnv, policy: Policy, scenario_seed: int,
                channel_seed: int | None = None, scenario=None, record: bool = False,
                check=None) -> EpisodeResult:
    """Roll out one period with ``policy``.

    ``check`` is called as ``check(env, alloc, result)`` after each step
    (used by the constraint suites).
    """
    if channel_seed is None:
        channel_seed = channel_seed_for(scenario_seed)
    env.reset(scenario_seed, channel_seed, scenario=scenario)
    policy.begin_episode()
    total = 0.0
    rates = []
    steps = []
    done = False
    while not done:
        alloc = policy.allocate(env)
        res = env.step(alloc)
        if check is not None:
            check(env, alloc, res)
        total += res.reward
        rates.append(float(res.info.rates_bps.sum()) / 1e6)
        if record:
            steps.append((res.reward, res.info))
        done = res.done
    ap = env.average_precision()
    return EpisodeResult(
        scenario_seed=scenario_seed,
        total_return=total,
        sum_rate_mbps=float(np.mean(rates)),
        loss_det=env.loss.det,
        loss_cls=env.loss.cls,
        ap50=ap[0.5],
        ap70=ap[0.7],
        steps=steps,
    )


def make_env(env_config: EnvConfig, channel: ChannelParams,
             scenario_config: ScenarioConfig) -> CoopPerceptionEnv:
    return CoopPerceptionEnv(env_config, channel, scenario_config)


def evaluate_policy(env: CoopPerceptionEnv, policy: Policy, seeds, policy_seed: int = 0):
    """Greedy evaluation on ``seeds``; the random baseline is reseeded per call."""
    if hasattr(policy, "mode"):
        policy.mode = "greedy"
    if getattr(policy, "name", "") == "random":
        policy.rng = np.random.default_rng(policy_seed)
    return [run_episode(env, policy, s) for s in seeds]


def summarize(results) -> dict:
    """Mean and standard error of every episode metric."""
    out = {}
    n = len(results)
    for key in ("total_return", "sum_rate_mbps", "loss_det", "loss_cls", "ap50", "ap70"):
        vals = np.asarray([getattr(r, key) for r in results], dtype=float)
        out[key] = float(vals.mean()) if n else float("nan")
        out[key + "_se"] = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    out["n"] = n
    return out


@dataclass
class TrainLog:
    updates: list = field(default_factory=list)  # dicts with episode + per-layer stats
    validation: list = field(default_factory=list)  # (episode, mean_return)


class NonFiniteError(RuntimeError):
    pass


def _warmup_scalers(agent: HPPOAgent, env: CoopPerceptionEnv, seeds, rng) -> None:
    """Fit the frozen state and value scalers on uniform-random rollouts."""
    s_eta, s_p, returns = [], [], []
    levels = agent.levels
    for seed in seeds:
        state = env.reset(seed, channel_seed_for(seed))
        done = False
        rewards = []
        while not done:
            a_rb = int(rng.integers(len(agent.rb_table)))
            a_p = int(rng.integers(len(agent.pw_table)))
            eta = eta_from_rbs(agent.rb_table[a_rb], agent.params.n_rbs)
            s_eta.append(state)
            s_p.append(np.concatenate([state, eta.ravel().astype(float)]))
            res = env.step(Allocation(eta=eta, power_dbm=levels[agent.pw_table[a_p]]))
            rewards.append(res.reward)
            state, done = res.state, res.done
        g = 0.0
        disc = []
        for r in reversed(rewards):
            g = r + agent.config.gamma * g
            disc.append(g)
        returns.extend(reversed(disc))
    agent.rb_layer.scaler.fit(s_eta)
    agent.power_layer.scaler.fit(s_p)
    for layer in agent.layers:
        layer.value_scaler.fit(returns)


def train_hppo(env: CoopPerceptionEnv, config: HPPOConfig, episodes: int | None = None,
               valid_seeds=None, eval_every: int = 100, warmup_episodes: int = 10,
               agent: HPPOAgent | None = None, progress=None) -> tuple[HPPOAgent, TrainLog]:
    """Collect-then-update loop: both layers update every ``update_interval_episodes``."""
    episodes = config.train_episodes if episodes is None else episodes
    valid_seeds = validation_seeds() if valid_seeds is None else list(valid_seeds)
    agent = agent or HPPOAgent(env.n_cavs, env.channel_params, config)
    rng = np.random.default_rng(config.seed + 7)
    tlog = TrainLog()
    if episodes <= 0:
        return agent, tlog
    if not agent.rb_layer.scaler.fitted:
        warm = [TRAIN_SEED_BASE + int(s) for s in rng.integers(0, N_TRAIN_SEEDS, warmup_episodes)]
        _warmup_scalers(agent, env, warm, rng)
    returns = []
    for ep in range(1, episodes + 1):
        seed = TRAIN_SEED_BASE + int(rng.integers(0, N_TRAIN_SEEDS))
        ch_seed = int(rng.integers(0, 2**63 - 1))
        state = env.reset(seed, ch_seed)
        done = False
        ep_ret = 0.0
        while not done:
            alloc, rb, pw = agent.decide(state, "sample")
            res = env.step(alloc)
            nxt = res.state
            # the next power-layer state pairs s_eta(t+1) with the same RB action
            nxt_p = np.concatenate([nxt, alloc.eta.ravel().astype(float)])
            agent.rb_layer.buffer.add(rb[0], rb[1], rb[2], res.reward, rb[3], res.done, nxt)
            agent.power_layer.buffer.add(pw[0], pw[1], pw[2], res.reward, pw[3], res.done, nxt_p)
            ep_ret += res.reward
            state, done = nxt, res.done
        returns.append(ep_ret)
        if ep % config.update_interval_episodes == 0:
            stats = agent.update()
            if not all(np.isfinite(v) for v in stats.values()):
                raise NonFiniteError(f"non-finite training statistics at episode {ep}: {stats}")
            stats = {"episode": ep,
                     "mean_return": float(np.mean(returns[-config.update_interval_episodes:])),
                     **stats}
            tlog.updates.append(stats)
        if eval_every and ep % eval_every == 0:
            val = evaluate_policy(env, agent, valid_seeds)
            mean_ret = float(np.mean([r.total_return for r in val]))
            tlog.validation.append((ep, mean_ret))
            log.info("episode %d validation return %.4f", ep, mean_ret)
            if progress:
                progress(ep, mean_ret)
    agent.mode = "greedy"
    return agent, tlog


def build_policies(names, channel: ChannelParams, n_links: int, agent=None, seed: int = 0):
    return {n: make_policy(n, channel, n_links, seed=seed, checkpoint=agent) for n in names}

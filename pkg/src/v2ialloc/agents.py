"""Allocation policies: Random, Max Rate, Max Features and hierarchical PPO.

Joint actions are flat indices.  An RB action encodes one RB per link as
base-``K`` digits with link 0 most significant; a power action encodes
one level index per link the same way in base ``|levels|``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import Allocation, ChannelParams, link_rates
from .env import CoopPerceptionEnv
from .nn import Adam, DenseNet, log_softmax, softmax

CHECKPOINT_SCHEMA = "v2ialloc-hppo/1"


def joint_table(n_links: int, n_choices: int) -> np.ndarray:
    """(n_choices**n_links, n_links) digits of every joint index."""
    return np.asarray(list(itertools.product(range(n_choices), repeat=n_links)), dtype=np.int64)


def encode_joint(digits, n_choices: int) -> int:
    idx = 0
    for d in digits:
        idx = idx * n_choices + int(d)
    return idx


def eta_from_rbs(rbs, n_rbs: int) -> np.ndarray:
    rbs = np.asarray(rbs, dtype=np.int64)
    eta = np.zeros((len(rbs), n_rbs), dtype=np.int64)
    eta[np.arange(len(rbs)), rbs] = 1
    return eta


class Policy:
    """Maps the environment's current step to an :class:`Allocation`."""

    name = "policy"
    is_learning = False

    def allocate(self, env: CoopPerceptionEnv) -> Allocation:
        raise NotImplementedError

    def begin_episode(self) -> None:
        pass


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, params: ChannelParams, n_links: int, seed: int = 0):
        self.params = params
        self.n_links = n_links
        self.rng = np.random.default_rng(seed)
        self.levels = np.asarray(params.power_levels_dbm, dtype=float)

    def act_random(self) -> Allocation:
        rbs = self.rng.integers(0, self.params.n_rbs, size=self.n_links)
        pw = self.rng.integers(0, len(self.levels), size=self.n_links)
        return Allocation.from_choices(rbs, self.levels[pw], self.params.n_rbs)

    def allocate(self, env):
        return self.act_random()


class MaxRatePolicy(Policy):
    """Exhaustive search of every RB and power combination on decision-time gains."""

    name = "max_rate"

    def __init__(self, params: ChannelParams, n_links: int):
        self.params = params
        self.n_links = n_links
        self.levels = np.asarray(params.power_levels_dbm, dtype=float)
        self.rb_table = joint_table(n_links, params.n_rbs)
        self.pw_table = joint_table(n_links, len(self.levels))
        self.pw_watts = params.power_levels_w[self.pw_table]  # (P, M)

    def sum_rates(self, gains: np.ndarray, active=None) -> np.ndarray:
        """(R, P) sum rate of every joint (RB action, power action)."""
        m = self.n_links
        pw = self.pw_watts
        if active is not None:
            pw = pw * np.asarray(active, dtype=float)[None, :]
        rb = self.rb_table  # (R, M)
        own = gains[np.arange(m)[None, :], rb]  # (R, M): g_m on its RB
        # cross[r, m, j] = g_j on m's RB if j shares it, else 0
        same = (rb[:, :, None] == rb[:, None, :]) & ~np.eye(m, dtype=bool)[None]
        g_j_on_mrb = gains[np.arange(m)[None, None, :], rb[:, :, None]]  # (R, M, J)
        cross = np.where(same, g_j_on_mrb, 0.0)
        interference = np.einsum("rmj,pj->rpm", cross, pw)
        signal = own[:, None, :] * pw[None, :, :]
        sinr = signal / (interference + self.params.noise_power)
        return self.params.rb_bandwidth_hz * np.log2(1.0 + sinr).sum(axis=-1)

    def act_max_rate(self, gains: np.ndarray, active=None) -> Allocation:
        rates = self.sum_rates(gains, active)
        flat = int(np.argmax(rates))  # first maximum = lowest joint index
        r, p = divmod(flat, rates.shape[1])
        pw = self.levels[self.pw_table[p]]
        if active is not None:
            pw = np.where(np.asarray(active, bool), pw, self.levels.min())
        return Allocation.from_choices(self.rb_table[r], pw, self.params.n_rbs)

    def allocate(self, env):
        return self.act_max_rate(env.decision_gains())


class MaxFeaturesPolicy(Policy):
    """Top two CAVs by remaining positive-confidence cells, on distinct RBs at full power."""

    name = "max_features"

    def __init__(self, params: ChannelParams, n_links: int):
        if params.n_rbs < 2:
            raise ValueError("max_features needs at least two RBs")
        self.params = params
        self.n_links = n_links
        self.levels = np.asarray(params.power_levels_dbm, dtype=float)

    def act_max_features(self, counts) -> Allocation:
        counts = np.asarray(counts)
        order = np.argsort(-counts, kind="stable")
        rbs = np.zeros(self.n_links, dtype=np.int64)
        pw = np.full(self.n_links, self.levels.min())
        for rank, m in enumerate(order[:2]):
            rbs[m] = rank
            pw[m] = self.levels.max()
        return Allocation.from_choices(rbs, pw, self.params.n_rbs)

    def allocate(self, env):
        return self.act_max_features(env.ledger.positive_remaining())


# -- PPO machinery -----------------------------------------------------------

def clipped_objective(ratio, advantage, eps: float):
    ratio = np.asarray(ratio, dtype=float)
    advantage = np.asarray(advantage, dtype=float)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - eps, 1.0 + eps) * advantage)


def critic_loss(values, returns) -> float:
    values = np.asarray(values, dtype=float)
    returns = np.asarray(returns, dtype=float)
    if values.shape != returns.shape:
        raise ValueError("values and returns must align")
    return float(np.mean((values - returns) ** 2))


def compute_advantages(rewards, values, dones, gamma: float, gae_lambda: float,
                       normalize: bool = True):
    """GAE over one or more concatenated episodes.

    ``values`` has one more entry than ``rewards``: the bootstrap value of
    the state after the last transition (ignored when that transition is
    terminal).  Returns ``(advantages, returns)``; returns are built from
    the raw advantages before any normalisation.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * values[t + 1] * nonterminal - values[t]
        last = delta + gamma * gae_lambda * nonterminal * last
        adv[t] = last
    returns = adv + values[:n]
    if normalize and n > 1:
        std = adv.std()
        adv = (adv - adv.mean()) / (std + 1e-8)
    return adv, returns


@dataclass
class HPPOConfig:
    hidden_sizes: tuple[int, ...] = (500, 250, 125)
    actor_lr: float = 1e-4
    critic_lr: float = 3e-4
    clip_eps: float = 0.2
    gamma: float = 0.5  # short horizon: the reward is mostly the immediate rate term
    gae_lambda: float = 0.95
    update_interval_episodes: int = 10
    train_episodes: int = 2000
    minibatch_size: int = 100
    epochs: int = 8
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrajectoryBuffer:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    next_states: list = field(default_factory=list)

    def add(self, state, action, log_prob, reward, value, done, next_state) -> None:
        self.states.append(np.asarray(state, dtype=float))
        self.actions.append(int(action))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))
        self.next_states.append(np.asarray(next_state, dtype=float))

    def __len__(self) -> int:
        return len(self.actions)

    def clear(self) -> None:
        for f in (self.states, self.actions, self.log_probs, self.rewards,
                  self.values, self.dones, self.next_states):
            f.clear()


class StateScaler:
    """Fixed affine scaling of raw states before they reach the networks.

    Offsets and scales are estimated once from a warm-up batch of states
    and then frozen, so a policy behaves identically in training and
    evaluation.
    """

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.scale = np.ones(dim)
        self.fitted = False

    def fit(self, states) -> None:
        x = np.asarray(states, dtype=float)
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.scale = np.where(std > 1e-8, std, 1.0)
        self.fitted = True

    def __call__(self, state):
        return (np.asarray(state, dtype=float) - self.mean) / self.scale


class ValueScaler:
    """Frozen affine map between raw returns and the critic's output units."""

    def __init__(self):
        self.mean = 0.0
        self.scale = 1.0

    def fit(self, returns) -> None:
        r = np.asarray(returns, dtype=float)
        self.mean = float(r.mean())
        std = float(r.std())
        self.scale = std if std > 1e-8 else 1.0

    def normalize(self, returns):
        return (np.asarray(returns, dtype=float) - self.mean) / self.scale

    def denormalize(self, out):
        return self.mean + self.scale * np.asarray(out, dtype=float)


class PPOLayer:
    """Actor-critic pair over one joint categorical action space."""

    def __init__(self, name: str, state_dim: int, n_actions: int, config: HPPOConfig,
                 rng: np.random.Generator):
        self.name = name
        self.config = config
        self.actor = DenseNet(state_dim, config.hidden_sizes, n_actions, rng)
        self.critic = DenseNet(state_dim, config.hidden_sizes, 1, rng)
        self.actor_opt = Adam(self.actor.params(), lr=config.actor_lr)
        self.critic_opt = Adam(self.critic.params(), lr=config.critic_lr)
        self.scaler = StateScaler(state_dim)
        self.value_scaler = ValueScaler()
        self.buffer = TrajectoryBuffer()

    @property
    def n_actions(self) -> int:
        return self.actor.output_dim

    def logits(self, state) -> np.ndarray:
        return self.actor(self.scaler(state))

    def value(self, state) -> float:
        return float(self.value_scaler.denormalize(self.critic(self.scaler(state))[..., 0]))

    def act(self, state, mode: str, rng: np.random.Generator | None = None):
        logits = self.logits(state)
        logp = log_softmax(logits)
        if mode == "greedy":
            a = int(np.argmax(logits))
        elif mode == "sample":
            a = int(rng.choice(len(logits), p=softmax(logits)))
        else:
            raise ValueError(f"unknown mode {mode!r}")
        return a, float(logp[a]), self.value(state)

    def update(self) -> dict:
        buf = self.buffer
        cfg = self.config
        states = self.scaler(np.stack(buf.states))
        next_states = self.scaler(np.stack(buf.next_states))
        actions = np.asarray(buf.actions)
        old_logp = np.asarray(buf.log_probs)
        dones = np.asarray(buf.dones)
        values = self.value_scaler.denormalize(self.critic(states)[:, 0])
        next_values = self.value_scaler.denormalize(self.critic(next_states)[:, 0])
        adv, returns = _gae_with_bootstrap(
            np.asarray(buf.rewards), values, next_values, dones, cfg.gamma, cfg.gae_lambda
        )
        targets = self.value_scaler.normalize(returns)
        n = len(actions)
        order_rng = np.random.default_rng(cfg.seed + self.actor_opt.step_count)
        objs, losses = [], []
        for _ in range(cfg.epochs):
            perm = order_rng.permutation(n)
            for start in range(0, n, cfg.minibatch_size):
                idx = perm[start:start + cfg.minibatch_size]
                obj = self._actor_step(states[idx], actions[idx], old_logp[idx], adv[idx])
                loss = self._critic_step(states[idx], targets[idx])
                objs.append(obj)
                losses.append(loss)
        buf.clear()
        return {"actor_obj": float(np.mean(objs)), "critic_loss": float(np.mean(losses))}

    def _actor_step(self, s, a, old_logp, adv) -> float:
        cfg = self.config
        logits, cache = self.actor.forward(s, return_cache=True)
        logp_all = log_softmax(logits)
        probs = np.exp(logp_all)
        rows = np.arange(len(a))
        logp = logp_all[rows, a]
        ratio = np.exp(logp - old_logp)
        obj = clipped_objective(ratio, adv, cfg.clip_eps)
        # gradient flows only where the unclipped term is the minimum
        unclipped = ratio * adv <= np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * adv
        d_logp = np.where(unclipped, ratio * adv, 0.0)
        onehot = np.zeros_like(probs)
        onehot[rows, a] = 1.0
        d_logits = d_logp[:, None] * (onehot - probs)
        entropy = -(probs * logp_all).sum(axis=1)
        if cfg.entropy_coef:
            d_ent = -probs * (logp_all + entropy[:, None])
            d_logits = d_logits + cfg.entropy_coef * d_ent
        # minimise the negated objective
        grads, _ = self.actor.backward(cache, -d_logits / len(a))
        _clip_grads(grads, cfg.max_grad_norm)
        self.actor_opt.step(grads)
        return float(obj.mean())

    def _critic_step(self, s, returns) -> float:
        v, cache = self.critic.forward(s, return_cache=True)
        err = v[:, 0] - returns
        grads, _ = self.critic.backward(cache, (2.0 * err / len(err))[:, None])
        _clip_grads(grads, self.config.max_grad_norm)
        self.critic_opt.step(grads)
        return float(np.mean(err ** 2))


def _clip_grads(grads, max_norm: float) -> None:
    if not max_norm:
        return
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm


def _gae_with_bootstrap(rewards, values, next_values, dones, gamma, lam):
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_values[t] * nonterminal - values[t]
        # a terminal transition cuts the recursion across episode boundaries
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    returns = adv + values
    if n > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return adv, returns


class HPPOAgent(Policy):
    """RB-allocation layer followed by a power-control layer sharing one reward."""

    name = "hppo"
    is_learning = True

    def __init__(self, n_links: int, params: ChannelParams, config: HPPOConfig | None = None):
        self.config = config or HPPOConfig()
        self.config.validate()
        self.params = params
        self.n_links = n_links
        self.levels = np.asarray(params.power_levels_dbm, dtype=float)
        k = params.n_rbs
        self.rb_table = joint_table(n_links, k)
        self.pw_table = joint_table(n_links, len(self.levels))
        s_dim = n_links * (2 + k)
        rng = np.random.default_rng(self.config.seed)
        self.rb_layer = PPOLayer("rb", s_dim, len(self.rb_table), self.config, rng)
        self.power_layer = PPOLayer("power", s_dim + n_links * k, len(self.pw_table),
                                    self.config, rng)
        self.sample_rng = np.random.default_rng(self.config.seed + 1)
        self.mode = "greedy"
        self.last = None

    @property
    def layers(self):
        return (self.rb_layer, self.power_layer)

    def layer(self, name: str) -> PPOLayer:
        return {"rb": self.rb_layer, "power": self.power_layer}[name]

    def ppo_act(self, layer: str, state, mode: str = "greedy"):
        return self.layer(layer).act(state, mode, self.sample_rng)

    def act(self, s_eta, mode: str | None = None) -> int:
        return self.ppo_act("rb", s_eta, mode or self.mode)[0]

    def act_power(self, s_p, mode: str | None = None) -> int:
        return self.ppo_act("power", s_p, mode or self.mode)[0]

    def decide(self, s_eta, mode: str):
        """Run both layers; returns the allocation and per-layer (state, action, logp, value)."""
        a_rb, lp_rb, v_rb = self.ppo_act("rb", s_eta, mode)
        eta = eta_from_rbs(self.rb_table[a_rb], self.params.n_rbs)
        s_p = np.concatenate([s_eta, eta.ravel().astype(float)])
        a_p, lp_p, v_p = self.ppo_act("power", s_p, mode)
        alloc = Allocation(eta=eta, power_dbm=self.levels[self.pw_table[a_p]])
        return alloc, (s_eta, a_rb, lp_rb, v_rb), (s_p, a_p, lp_p, v_p)

    def allocate(self, env):
        alloc, rb, pw = self.decide(env.state(), self.mode)
        self.last = (rb, pw)
        return alloc

    def update(self) -> dict:
        """One PPO update of each layer on its own buffer; buffers are cleared."""
        stats = {}
        for layer in self.layers:
            if len(layer.buffer) == 0:
                continue
            for k, v in layer.update().items():
                stats[f"{layer.name}_{k}"] = v
        return stats

    # -- checkpoints ---------------------------------------------------------
    def save(self, path) -> None:
        arrays = {}
        manifest = []
        for layer in self.layers:
            for net_name, net in (("actor", layer.actor), ("critic", layer.critic)):
                for i, p in enumerate(net.params()):
                    key = f"{layer.name}/{net_name}/{i}"
                    arrays[key] = p
                    manifest.append({"key": key, "shape": list(p.shape)})
            for part in ("mean", "scale"):
                key = f"{layer.name}/scaler/{part}"
                arrays[key] = getattr(layer.scaler, part)
                manifest.append({"key": key, "shape": list(arrays[key].shape)})
        header = {
            "schema": CHECKPOINT_SCHEMA,
            "n_links": self.n_links,
            "n_rbs": self.params.n_rbs,
            "power_levels_dbm": list(self.levels),
            "config": asdict(self.config),
            "value_scalers": {layer.name: [layer.value_scaler.mean, layer.value_scaler.scale]
                              for layer in self.layers},
            "manifest": manifest,
        }
        arrays["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, params: ChannelParams) -> "HPPOAgent":
        if not Path(path).exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        with np.load(path) as data:
            header = json.loads(bytes(data["header"]).decode())
            if header.get("schema") != CHECKPOINT_SCHEMA:
                raise ValueError(f"unsupported checkpoint schema {header.get('schema')!r}")
            cfg = dict(header["config"])
            cfg["hidden_sizes"] = tuple(cfg["hidden_sizes"])
            agent = cls(header["n_links"], params, HPPOConfig(**cfg))
            if header["n_rbs"] != params.n_rbs or \
                    list(header["power_levels_dbm"]) != list(agent.levels):
                raise ValueError("checkpoint action space does not match channel params")
            for layer in agent.layers:
                for net_name, net in (("actor", layer.actor), ("critic", layer.critic)):
                    net.set_params([data[f"{layer.name}/{net_name}/{i}"]
                                    for i in range(len(net.params()))])
                layer.scaler.mean = data[f"{layer.name}/scaler/mean"].copy()
                layer.scaler.scale = data[f"{layer.name}/scaler/scale"].copy()
                layer.scaler.fitted = True
                layer.value_scaler.mean, layer.value_scaler.scale = \
                    header["value_scalers"][layer.name]
        return agent


def sum_rate(alloc: Allocation, gains: np.ndarray, params: ChannelParams) -> float:
    return float(link_rates(alloc.eta, alloc.power_w, gains,
                            params.rb_bandwidth_hz, params.noise_power).sum())


def make_policy(name: str, params: ChannelParams, n_links: int, seed: int = 0,
                checkpoint=None) -> Policy:
    if name == "random":
        return RandomPolicy(params, n_links, seed)
    if name == "max_rate":
        return MaxRatePolicy(params, n_links)
    if name == "max_features":
        return MaxFeaturesPolicy(params, n_links)
    if name == "hppo":
        if checkpoint is None:
            raise ValueError("hppo policy needs a checkpoint")
        if isinstance(checkpoint, HPPOAgent):
            return checkpoint
        return HPPOAgent.load(checkpoint, params)
    raise ValueError(f"unknown policy {name!r}")

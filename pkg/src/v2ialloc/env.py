"""Period / step / sub-step environment for RSU-side resource allocation.

One episode is one perception period of ``T`` decision steps.  At every
step the RSU picks RBs and powers; each of the ``T_s`` sub-steps draws
fresh fast fading, the rates set each CAV's feature budget, CAVs send
their top-gain cells, and the RSU fuses and re-scores its detection loss.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .channel import (
    Allocation,
    ChannelParams,
    ChannelRealization,
    link_rates,
    realize_channel,
)
from .perception import (
    ConfidenceLedger,
    DetectionLoss,
    average_precision,
    commit_transmission,
    detection_loss,
    fuse_confidence,
    initial_ledger,
    select_top,
)
from .scenario import Scenario, ScenarioConfig, generate_scenario


class AllocationError(ValueError):
    """Allocation violates the one-RB-per-link or power-level constraints."""


@dataclass
class EnvConfig:
    period_ms: float = 200.0
    step_ms: float = 5.0
    substep_ms: float = 1.0
    n_cavs: int = 4
    channels: int = 3072  # C, feature channels per BEV cell (desk-scale calibration)
    bits: int = 32  # Q, bits per channel value
    lambda_rate: float = 0.025  # per Mbps
    lambda_det: float = 20.0
    lambda_cls: float = 1.0
    lambda_loc: float = 1.0
    lambda_dir: float = 1.0
    conf_thresh: float = 0.5

    @property
    def n_steps(self) -> int:
        return int(round(self.period_ms / self.step_ms))

    @property
    def n_substeps(self) -> int:
        return int(round(self.step_ms / self.substep_ms))

    @property
    def substep_s(self) -> float:
        return self.substep_ms / 1000.0

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.lambda_cls, self.lambda_loc, self.lambda_dir)

    def validate(self) -> None:
        if self.n_steps < 1 or self.n_substeps < 1:
            raise ValueError("need at least one step and one sub-step")
        if abs(self.n_steps * self.step_ms - self.period_ms) > 1e-9:
            raise ValueError("period must be a whole number of steps")
        if abs(self.n_substeps * self.substep_ms - self.step_ms) > 1e-9:
            raise ValueError("step must be a whole number of sub-steps")
        if self.lambda_rate < 0 or self.lambda_det < 0:
            raise ValueError("reward weights must be non-negative")


def compute_reward(rates_bps, loss_before: float, loss_after: float,
                   lambda_rate: float, lambda_det: float) -> float:
    """Rate bonus (Mbps) minus weighted change in detection loss."""
    total_mbps = float(np.sum(rates_bps)) / 1e6
    return lambda_rate * total_mbps - lambda_det * (loss_after - loss_before)


@dataclass
class StepInfo:
    t: int
    rates_bps: np.ndarray  # (M,) mean over sub-steps
    substep_rates_bps: np.ndarray  # (T_s, M)
    budgets: np.ndarray  # (M,) unfloored
    cells_sent: np.ndarray  # (M,)
    loss_before: DetectionLoss
    loss_after: DetectionLoss
    rbs: np.ndarray
    power_dbm: np.ndarray


@dataclass
class Transition:
    layer: str
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass
class StepResult:
    reward: float
    state: np.ndarray
    done: bool
    info: StepInfo


class CoopPerceptionEnv:
    """Single-owner MDP over one perception period at a time."""

    def __init__(self, env_config: EnvConfig | None = None,
                 channel_params: ChannelParams | None = None,
                 scenario_config: ScenarioConfig | None = None):
        self.config = env_config or EnvConfig()
        self.channel_params = channel_params or ChannelParams()
        self.scenario_config = scenario_config or ScenarioConfig(n_cavs=self.config.n_cavs)
        self.config.validate()
        self.channel_params.validate()
        if self.scenario_config.n_cavs != self.config.n_cavs:
            raise ValueError("scenario and env disagree on the number of CAVs")
        self.scenario: Scenario | None = None
        self.channel: ChannelRealization | None = None
        self.ledger: ConfidenceLedger | None = None
        self.t = 0
        self.loss: DetectionLoss | None = None
        self.initial_loss: DetectionLoss | None = None
        self._levels_dbm = np.asarray(self.channel_params.power_levels_dbm, dtype=float)

    # -- dimensions ---------------------------------------------------------
    @property
    def n_cavs(self) -> int:
        return self.config.n_cavs

    @property
    def n_rbs(self) -> int:
        return self.channel_params.n_rbs

    @property
    def state_dim(self) -> int:
        return self.n_cavs * (2 + self.n_rbs)

    @property
    def power_state_dim(self) -> int:
        return self.state_dim + self.n_cavs * self.n_rbs

    @property
    def n_steps(self) -> int:
        return self.config.n_steps

    # -- episode control ----------------------------------------------------
    def reset(self, scenario_seed: int = 0, channel_seed: int = 0,
              scenario: Scenario | None = None) -> np.ndarray:
        """Start a new period; returns the RB-layer state."""
        if scenario is None:
            cfg = dataclasses.replace(self.scenario_config, seed=int(scenario_seed))
            scenario = generate_scenario(cfg)
        if scenario.n_cavs != self.n_cavs:
            raise ValueError("scenario has the wrong number of CAVs")
        self.scenario = scenario
        rng = np.random.default_rng(channel_seed)
        self.channel = realize_channel(
            scenario, self.channel_params, self.config.n_steps, self.config.n_substeps, rng
        )
        self.ledger = initial_ledger(scenario)
        self.t = 0
        self.loss = detection_loss(self.ledger.rsu_conf, scenario, self.config.loss_weights)
        self.initial_loss = self.loss
        return self.state()

    @property
    def done(self) -> bool:
        return self.t >= self.config.n_steps

    def decision_gains(self) -> np.ndarray:
        """(M, K) gains at the first sub-step of the current step."""
        t = min(self.t, self.config.n_steps - 1)
        return self.channel.gains(t, 0)

    def state(self) -> np.ndarray:
        """RB-layer state: per CAV [alpha dB, |h|^2 per RB, feature value]."""
        t = min(self.t, self.config.n_steps - 1)
        alpha_db = 10.0 * np.log10(self.channel.alpha)
        h2 = self.channel.h2[t, 0]
        v = self.ledger.feature_values()
        return np.concatenate([alpha_db[:, None], h2, v[:, None]], axis=1).ravel()

    def power_state(self, eta: np.ndarray, state: np.ndarray | None = None) -> np.ndarray:
        s = self.state() if state is None else state
        return np.concatenate([s, np.asarray(eta, dtype=float).ravel()])

    def validate_allocation(self, alloc: Allocation) -> None:
        eta = np.asarray(alloc.eta)
        if eta.shape != (self.n_cavs, self.n_rbs):
            raise AllocationError(f"eta must have shape {(self.n_cavs, self.n_rbs)}")
        try:
            alloc.validate(self._levels_dbm)
        except ValueError as exc:
            raise AllocationError(str(exc)) from exc

    def step(self, alloc: Allocation) -> StepResult:
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        self.validate_allocation(alloc)
        cfg = self.config
        p = self.channel_params
        t = self.t
        gains = self.channel.step_gains(t)  # (T_s, M, K)
        sub_rates = link_rates(alloc.eta, alloc.power_w, gains, p.rb_bandwidth_hz, p.noise_power)
        budgets = sub_rates.sum(axis=0) * cfg.substep_s / (cfg.channels * cfg.bits)

        ledger = self.ledger
        gain = ledger.gains()
        sent = np.zeros(self.n_cavs, dtype=np.int64)
        for m in range(self.n_cavs):
            mask = select_top(gain[m], budgets[m])
            if mask.any():
                commit_transmission(ledger, m, mask)
                sent[m] = int(mask.sum())
        fused = fuse_confidence(ledger, self.scenario)
        before = self.loss
        after = detection_loss(fused, self.scenario, cfg.loss_weights)
        mean_rates = sub_rates.mean(axis=0)
        reward = compute_reward(mean_rates, before.det, after.det, cfg.lambda_rate, cfg.lambda_det)
        self.loss = after
        self.t += 1
        info = StepInfo(
            t=t,
            rates_bps=mean_rates,
            substep_rates_bps=sub_rates,
            budgets=budgets,
            cells_sent=sent,
            loss_before=before,
            loss_after=after,
            rbs=np.asarray([alloc.rb_of(m) for m in range(self.n_cavs)]),
            power_dbm=np.asarray(alloc.power_dbm, dtype=float),
        )
        return StepResult(reward=float(reward), state=self.state(), done=self.done, info=info)

    def average_precision(self) -> dict:
        return average_precision(self.ledger.rsu_conf, self.scenario, self.config.conf_thresh)

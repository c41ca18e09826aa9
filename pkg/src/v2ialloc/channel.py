"""V2I fading, interference, rate and feature-budget model.

All channel math runs on linear watts.  Power levels are kept in dBm in
allocations and converted once; the lowest level (-100 dBm by default)
means "silent" and converts to exactly zero watts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import Scenario

ZERO_POWER_DBM = -100.0
REFERENCE_RB_BANDWIDTH_HZ = 1.5e6


def dbm_to_watt(p_dbm):
    w = 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)
    return float(w) if w.ndim == 0 else w


def tx_power_watt(p_dbm):
    """Transmit power in watts; the silent level maps to exactly 0 W."""
    p = np.asarray(p_dbm, dtype=float)
    w = np.where(p <= ZERO_POWER_DBM, 0.0, 10.0 ** ((p - 30.0) / 10.0))
    return float(w) if w.ndim == 0 else w


def db_to_linear(x_db):
    return 10.0 ** (np.asarray(x_db, dtype=float) / 10.0)


@dataclass
class ChannelParams:
    """Physical layer plus the spectrum/power grid of the V2I uplink.

    The noise power per RB scales with RB bandwidth from a reference of
    -114 dBm at 1.5 MHz, so a 3 MHz, 2-RB system sits exactly on those
    numbers while a bandwidth sweep keeps the noise density fixed.
    """

    carrier_hz: float = 5.9e9
    n_rbs: int = 2
    total_bandwidth_hz: float = 3.0e6
    noise_dbm_ref: float = -114.0
    noise_ref_bandwidth_hz: float = REFERENCE_RB_BANDWIDTH_HZ
    pathloss_a: float = 128.1
    pathloss_b: float = 37.6
    shadow_sigma: float = 8.0
    rsu_antenna_gain_dbi: float = 8.0
    vehicle_antenna_gain_dbi: float = 3.0
    rsu_noise_figure_db: float = 5.0
    vehicle_noise_figure_db: float = 9.0
    vehicle_height: float = 1.5
    power_levels_dbm: tuple[float, ...] = (23.0, 10.5, -100.0)
    p_max_dbm: float = 23.0

    def validate(self) -> None:
        if self.n_rbs < 1:
            raise ValueError("n_rbs must be >= 1")
        if self.total_bandwidth_hz <= 0:
            raise ValueError("bandwidth must be positive")
        for p in self.power_levels_dbm:
            if not ZERO_POWER_DBM <= p <= self.p_max_dbm:
                raise ValueError(f"power level {p} dBm outside [-100, p_max]")

    @property
    def rb_bandwidth_hz(self) -> float:
        return self.total_bandwidth_hz / self.n_rbs

    @property
    def noise_psd(self) -> float:
        return dbm_to_watt(self.noise_dbm_ref) / self.noise_ref_bandwidth_hz

    @property
    def noise_power(self) -> float:
        return self.noise_psd * self.rb_bandwidth_hz

    @property
    def power_levels_w(self) -> np.ndarray:
        return np.asarray([tx_power_watt(p) for p in self.power_levels_dbm])

    @property
    def link_offset_db(self) -> float:
        # antenna gains at both ends, receiver (RSU) noise figure on the uplink
        return self.rsu_antenna_gain_dbi + self.vehicle_antenna_gain_dbi - self.rsu_noise_figure_db


@dataclass
class ChannelRealization:
    alpha: np.ndarray  # (M,) large-scale linear power gain
    h2: np.ndarray  # (T, T_s, M, K) small-scale power gain

    def gains(self, t: int, ts: int) -> np.ndarray:
        """(M, K) composite gains ``alpha * |h|^2`` at one sub-step."""
        return self.alpha[:, None] * self.h2[t, ts]

    def step_gains(self, t: int) -> np.ndarray:
        """(T_s, M, K) gains over every sub-step of step ``t``."""
        return self.alpha[None, :, None] * self.h2[t]


@dataclass
class Allocation:
    """One step's joint decision: RB indicator matrix and per-link power."""

    eta: np.ndarray  # (M, K) {0, 1}
    power_dbm: np.ndarray  # (M,)

    @classmethod
    def from_choices(cls, rbs, power_dbm, n_rbs: int) -> "Allocation":
        rbs = np.asarray(rbs, dtype=np.int64)
        eta = np.zeros((len(rbs), n_rbs), dtype=np.int64)
        eta[np.arange(len(rbs)), rbs] = 1
        return cls(eta=eta, power_dbm=np.asarray(power_dbm, dtype=float))

    @property
    def power_w(self) -> np.ndarray:
        return np.asarray(tx_power_watt(self.power_dbm), dtype=float).reshape(-1)

    def rb_of(self, m: int) -> int:
        """RB index used by link ``m``, or -1 if none."""
        nz = np.flatnonzero(self.eta[m])
        return int(nz[0]) if nz.size else -1

    def validate(self, power_levels_dbm) -> None:
        eta = np.asarray(self.eta)
        if not np.isin(eta, (0, 1)).all():
            raise ValueError("eta must be binary")
        if (eta.sum(axis=1) > 1).any():
            raise ValueError("a link may use at most one RB")
        levels = np.asarray(power_levels_dbm, dtype=float)
        if not np.isin(np.asarray(self.power_dbm, dtype=float), levels).all():
            raise ValueError("power must be one of the configured levels")


def path_loss_db(distance, params: ChannelParams | None = None):
    """Log-distance path loss in dB; distance in meters, clamped at 1 m."""
    a, b = (128.1, 37.6) if params is None else (params.pathloss_a, params.pathloss_b)
    d = np.maximum(np.asarray(distance, dtype=float), 1.0)
    pl = a + b * np.log10(d / 1000.0)
    return float(pl) if pl.ndim == 0 else pl


def link_distances(scenario: Scenario, params: ChannelParams) -> np.ndarray:
    rsu = scenario.agent_xy[0]
    cavs = scenario.agent_xy[1:]
    horiz = np.hypot(cavs[:, 0] - rsu[0], cavs[:, 1] - rsu[1])
    dz = scenario.config.rsu_height - params.vehicle_height
    return np.hypot(horiz, dz)


def realize_channel(
    scenario: Scenario,
    params: ChannelParams,
    n_steps: int,
    n_substeps: int,
    rng: np.random.Generator,
) -> ChannelRealization:
    """Draw one period's channel.

    Shadowing is drawn once per link for the period; ``|h|^2`` is i.i.d.
    unit-mean exponential (Rayleigh amplitude) per link, RB and sub-step.
    The fast-fading array is drawn in (step, sub-step, link, RB) order so
    a shorter period sees a prefix of a longer one's draws.
    """
    m = scenario.n_cavs
    d = link_distances(scenario, params)
    shadow = rng.normal(0.0, params.shadow_sigma, size=m) if params.shadow_sigma > 0 \
        else np.zeros(m)
    loss_db = path_loss_db(d, params) + shadow - params.link_offset_db
    alpha = 10.0 ** (-np.asarray(loss_db) / 10.0)
    h2 = rng.standard_exponential(size=(n_steps, n_substeps, m, params.n_rbs))
    return ChannelRealization(alpha=np.asarray(alpha, dtype=float).reshape(m), h2=h2)


def interference_power(alloc: Allocation, gains: np.ndarray, m: int, k: int) -> float:
    """Co-channel interference (W) seen by link ``m`` on RB ``k``."""
    p = alloc.power_w
    eta = np.asarray(alloc.eta)
    mask = np.ones(len(p), dtype=bool)
    mask[m] = False
    return float(np.sum(p[mask] * gains[mask, k] * eta[mask, k]))


def link_rate(alloc: Allocation, gains: np.ndarray, m: int, params: ChannelParams) -> float:
    """Achievable rate (bit/s) of link ``m`` summed over its RBs."""
    eta = np.asarray(alloc.eta)
    p = alloc.power_w
    total = 0.0
    for k in range(eta.shape[1]):
        if eta[m, k] == 0:
            continue
        sinr = p[m] * gains[m, k] / (interference_power(alloc, gains, m, k) + params.noise_power)
        total += params.rb_bandwidth_hz * np.log2(1.0 + sinr)
    return float(total)


def link_rates(eta: np.ndarray, power_w: np.ndarray, gains: np.ndarray,
               rb_bandwidth_hz: float, noise_power: float) -> np.ndarray:
    """Vectorised rates for every link.

    ``gains`` may carry leading batch axes, e.g. (T_s, M, K); the result
    then has shape (T_s, M).
    """
    eta = np.asarray(eta, dtype=float)
    rx = power_w[:, None] * gains * eta  # received power per (link, RB), own RB only
    others = 1.0 - np.eye(eta.shape[0])
    interference = np.einsum("mj,...jk->...mk", others, rx) * eta
    sinr = rx / (interference + noise_power)
    return rb_bandwidth_hz * np.log2(1.0 + sinr).sum(axis=-1)


def step_budget(rates, dt_s: float, channels: int, bits: int) -> float:
    """Features a link can upload in one step (unfloored).

    ``rates`` are the link's per-sub-step rates in bit/s.
    """
    if channels * bits <= 0 or dt_s <= 0:
        raise ValueError("C*Q and dt_s must be positive")
    return float(np.sum(np.asarray(rates, dtype=float) * dt_s / (channels * bits)))

"""Air-to-ground link math: path loss, channel gain, SINR, rates, QoS.

The propagation model mixes a line-of-sight and a non-line-of-sight free
space branch, weighted by an elevation-angle sigmoid.  All functions are
pure; small-scale fading draws come from an explicitly passed RNG so that
parallel evaluation stays reproducible per stream.
"""

import math
from dataclasses import dataclass

import numpy as np

from .world import UavPose, UserState, distance_to_user

# Propagation constant used throughout the free-space term.
C_LIGHT = 3.0e8

FADING_MODES = ("deterministic", "rayleigh")


@dataclass(frozen=True)
class ChannelParams:
    """Propagation constants for the air-to-ground model."""

    carrier_freq_hz: float = 2.0e9
    bandwidth_hz: float = 1.0e6
    noise_power_w: float = 1.0e-13
    excess_loss_los_db: float = 1.0
    excess_loss_nlos_db: float = 20.0
    los_a: float = 9.61
    los_b: float = 0.16
    fading_mode: str = "deterministic"

    def __post_init__(self):
        for name in ("carrier_freq_hz", "bandwidth_hz", "noise_power_w", "los_a", "los_b"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.fading_mode not in FADING_MODES:
            raise ValueError(f"fading_mode must be one of {FADING_MODES}")


@dataclass(frozen=True)
class PowerAllocation:
    """Per-user transmit powers (watts) and binary service flags."""

    powers: tuple[float, ...]
    served: tuple[int, ...]

    def __post_init__(self):
        if len(self.powers) != len(self.served):
            raise ValueError("powers and served must have equal length")
        for p, v in zip(self.powers, self.served):
            if p < 0.0:
                raise ValueError("powers must be nonnegative")
            if v not in (0, 1):
                raise ValueError("served flags must be 0 or 1")
            if v == 0 and p != 0.0:
                raise ValueError("unserved users must carry zero power")

    @property
    def total_power(self) -> float:
        return sum(p for p, v in zip(self.powers, self.served) if v)


@dataclass(frozen=True)
class LinkReport:
    """Per-user link budget for one step plus the system rate (bit/s)."""

    distances: tuple[float, ...]
    path_losses_db: tuple[float, ...]
    gains: tuple[float, ...]
    sinrs: tuple[float, ...]
    rates: tuple[float, ...]
    system_rate: float


def elevation_deg(pose: UavPose, user: UserState) -> float:
    """Elevation angle from the user up to the UAV, in degrees."""
    horiz = math.hypot(pose.x - user.x, pose.y - user.y)
    return math.degrees(math.atan2(pose.h, horiz))


def los_probability(elevation: float, params: ChannelParams) -> float:
    """Line-of-sight probability from the elevation-angle sigmoid."""
    if not 0.0 <= elevation <= 90.0:
        raise ValueError(f"elevation must be within [0, 90] deg, got {elevation}")
    return 1.0 / (1.0 + params.los_a * math.exp(-params.los_b * (elevation - params.los_a)))


def free_space_path_loss_db(d: float, params: ChannelParams) -> float:
    if d <= 0.0:
        raise ValueError(f"distance must be positive, got {d}")
    return 20.0 * math.log10(4.0 * math.pi * params.carrier_freq_hz * d / C_LIGHT)


def mean_path_loss(d: float, elevation: float, params: ChannelParams) -> float:
    """Probability-weighted average of the LoS and NLoS branch losses (dB)."""
    fspl = free_space_path_loss_db(d, params)
    p_los = los_probability(elevation, params)
    loss_los = fspl + params.excess_loss_los_db
    loss_nlos = fspl + params.excess_loss_nlos_db
    return p_los * loss_los + (1.0 - p_los) * loss_nlos


def channel_gain(path_loss_db: float, fading: float = 1.0) -> float:
    """Linear channel gain from dB path loss and a fading power draw."""
    if fading < 0.0:
        raise ValueError("fading draw must be nonnegative")
    return fading * 10.0 ** (-path_loss_db / 10.0)


def draw_fading(params: ChannelParams, k: int, rng: np.random.Generator | None) -> np.ndarray:
    """Per-user fading powers: all-ones, or unit-mean Rayleigh power fading."""
    if params.fading_mode == "deterministic":
        return np.ones(k)
    if rng is None:
        raise ValueError("rayleigh fading needs an RNG")
    return rng.exponential(1.0, size=k)


def user_gains(
    pose: UavPose,
    users: list[UserState],
    params: ChannelParams,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Channel gain toward every user for the current pose (linear)."""
    fading = draw_fading(params, len(users), rng)
    gains = np.empty(len(users))
    for i, user in enumerate(users):
        d = distance_to_user(pose, user)
        loss = mean_path_loss(d, elevation_deg(pose, user), params)
        gains[i] = channel_gain(loss, fading[i])
    return gains


def sinr_and_rates(
    gains: np.ndarray,
    alloc: PowerAllocation,
    params: ChannelParams,
    distances: tuple[float, ...] | None = None,
    path_losses_db: tuple[float, ...] | None = None,
) -> LinkReport:
    """Per-user SINR and rate; interference comes from the other served users.

    Unserved users contribute neither signal nor interference and report
    zero SINR and rate.
    """
    k = len(gains)
    served = np.asarray(alloc.served, dtype=float)
    powers = np.asarray(alloc.powers, dtype=float)
    rx = served * np.asarray(gains, dtype=float) * powers
    total_rx = rx.sum()
    sinrs = np.zeros(k)
    mask = served > 0
    interference = total_rx - rx[mask]
    sinrs[mask] = rx[mask] / (interference + params.noise_power_w)
    rates = params.bandwidth_hz * np.log2(1.0 + sinrs)
    return LinkReport(
        distances=tuple(distances) if distances is not None else (math.nan,) * k,
        path_losses_db=tuple(path_losses_db) if path_losses_db is not None else (math.nan,) * k,
        gains=tuple(float(g) for g in gains),
        sinrs=tuple(float(s) for s in sinrs),
        rates=tuple(float(r) for r in rates),
        system_rate=float(rates.sum()),
    )


def qos_violations(report: LinkReport, alloc: PowerAllocation, r_qos: float) -> int:
    """Number of served users whose rate falls below the QoS threshold."""
    return sum(
        1 for rate, v in zip(report.rates, alloc.served) if v and rate < r_qos
    )


def episode_throughput(reports) -> float:
    """Total bits moved over an episode (unit step duration)."""
    return float(sum(r.system_rate for r in reports))


def link_budget(
    pose: UavPose,
    users: list[UserState],
    alloc: PowerAllocation,
    params: ChannelParams,
    rng: np.random.Generator | None = None,
) -> LinkReport:
    """Full per-step link budget: distances, losses, gains, SINR, rates."""
    fading = draw_fading(params, len(users), rng)
    distances = []
    losses = []
    gains = np.empty(len(users))
    for i, user in enumerate(users):
        d = distance_to_user(pose, user)
        loss = mean_path_loss(d, elevation_deg(pose, user), params)
        distances.append(d)
        losses.append(loss)
        gains[i] = channel_gain(loss, fading[i])
    return sinr_and_rates(gains, alloc, params, tuple(distances), tuple(losses))

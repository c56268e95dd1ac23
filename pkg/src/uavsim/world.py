"""Geometric and kinematic state: serving-UAV pose, users, ownship, intruders.

Every type here is an immutable value object and every stepping function is
pure (new state out, nothing mutated), so evaluation can run from any number
of workers without shared state.
"""

import math
from dataclasses import dataclass
from enum import IntEnum


TWO_PI = 2.0 * math.pi


class ServiceMove(IntEnum):
    """The seven discrete moves available during the service phase."""

    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    BACKWARD = 3
    ASCEND = 4
    DESCEND = 5
    HOVER = 6


class TerminalKind(IntEnum):
    """Episode verdicts for the avoidance phase (NONE = still flying)."""

    NONE = 0
    COLLISION = 1
    TIMEOUT = 2
    GOAL = 3


@dataclass(frozen=True)
class MapBounds:
    """Axis-aligned flight volume; altitude band only applies to the service phase."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    h_min: float | None = None
    h_max: float | None = None

    def __post_init__(self):
        if not self.x_min < self.x_max:
            raise ValueError(f"x bounds inverted: [{self.x_min}, {self.x_max}]")
        if not self.y_min < self.y_max:
            raise ValueError(f"y bounds inverted: [{self.y_min}, {self.y_max}]")
        if (self.h_min is None) != (self.h_max is None):
            raise ValueError("h_min and h_max must be given together")
        if self.h_min is not None and not self.h_min < self.h_max:
            raise ValueError(f"h bounds inverted: [{self.h_min}, {self.h_max}]")

    def contains_xy(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max

    @property
    def diagonal(self) -> float:
        return math.hypot(self.x_max - self.x_min, self.y_max - self.y_min)


@dataclass(frozen=True)
class UavPose:
    """Serving-UAV position during the service phase (meters)."""

    x: float
    y: float
    h: float


@dataclass(frozen=True)
class UserState:
    """A ground user; users sit on the ground plane at altitude zero."""

    id: int
    x: float
    y: float


@dataclass(frozen=True)
class OwnshipState:
    """Planar state of the controlled UAV in the avoidance phase.

    heading is wrapped to [0, 2*pi); tilt (bank angle) stays inside the
    configured band, both enforced by step_ownship.
    """

    x: float
    y: float
    speed: float
    heading: float
    tilt: float


@dataclass(frozen=True)
class IntruderState:
    """Non-cooperative aircraft with constant speed over an episode."""

    id: int
    x: float
    y: float
    vx: float
    vy: float


@dataclass(frozen=True)
class AvoidAction:
    """Composite avoidance action: tilt and acceleration, each in {-1, 0, +1}."""

    tilt: int
    accel: int

    def __post_init__(self):
        if self.tilt not in (-1, 0, 1) or self.accel not in (-1, 0, 1):
            raise ValueError(f"tilt/accel must be -1, 0 or +1, got {self}")

    @property
    def name(self) -> str:
        t = {-1: "left", 0: "straight", 1: "right"}[self.tilt]
        a = {-1: "slow_down", 0: "constant", 1: "speed_up"}[self.accel]
        return f"{t}+{a}"


# Canonical ordering: index i maps to tilt = i // 3 - 1, accel = i % 3 - 1.
AVOID_ACTIONS: tuple[AvoidAction, ...] = tuple(
    AvoidAction(t, a) for t in (-1, 0, 1) for a in (-1, 0, 1)
)


def avoid_action_index(action: AvoidAction) -> int:
    return (action.tilt + 1) * 3 + (action.accel + 1)


@dataclass(frozen=True)
class OwnshipLimits:
    """Kinematic envelope of the ownship (coordinated-turn model)."""

    v_min: float = 20.0
    v_max: float = 60.0
    tilt_step: float = math.radians(5.0)
    tilt_max: float = math.radians(30.0)
    accel_step: float = 2.0
    g_accel: float = 9.81

    def __post_init__(self):
        if not 0.0 < self.v_min < self.v_max:
            raise ValueError("need 0 < v_min < v_max")
        if self.tilt_step <= 0.0 or self.tilt_max <= 0.0:
            raise ValueError("tilt_step and tilt_max must be positive")


@dataclass(frozen=True)
class TerminalConfig:
    """Inputs of the terminal classifier for the avoidance phase."""

    bounds: MapBounds
    d_min: float = 50.0
    goal_radius: float = 50.0
    s_max: int = 200


def distance_to_user(pose: UavPose, user: UserState) -> float:
    """Slant distance from the serving UAV to a ground user."""
    return math.sqrt(pose.h * pose.h + (pose.x - user.x) ** 2 + (pose.y - user.y) ** 2)


def apply_service_move(
    pose: UavPose, move: ServiceMove, step: float, bounds: MapBounds
) -> tuple[UavPose, bool]:
    """Apply one discrete service move, clamped to bounds.

    Returns the new pose and a flag that is True when the clamp fired (used
    for penalty counting); moves never fail.
    """
    x, y, h = pose.x, pose.y, pose.h
    if move == ServiceMove.LEFT:
        x -= step
    elif move == ServiceMove.RIGHT:
        x += step
    elif move == ServiceMove.FORWARD:
        y += step
    elif move == ServiceMove.BACKWARD:
        y -= step
    elif move == ServiceMove.ASCEND:
        h += step
    elif move == ServiceMove.DESCEND:
        h -= step

    cx = min(max(x, bounds.x_min), bounds.x_max)
    cy = min(max(y, bounds.y_min), bounds.y_max)
    ch = h
    if bounds.h_min is not None:
        ch = min(max(h, bounds.h_min), bounds.h_max)
    clamped = (cx != x) or (cy != y) or (ch != h)
    return UavPose(cx, cy, ch), clamped


def step_ownship(
    s: OwnshipState, a: AvoidAction, dt: float, limits: OwnshipLimits
) -> OwnshipState:
    """Advance the ownship one step under a coordinated turn.

    Tilt and speed are updated first and clamped; the heading then turns at
    g*tan(tilt)/v and the position integrates the new speed along the new
    heading.
    """
    tilt = s.tilt + a.tilt * limits.tilt_step
    tilt = min(max(tilt, -limits.tilt_max), limits.tilt_max)
    v = s.speed + a.accel * limits.accel_step * dt
    v = min(max(v, limits.v_min), limits.v_max)
    heading = (s.heading + limits.g_accel * math.tan(tilt) / v * dt) % TWO_PI
    x = s.x + v * math.cos(heading) * dt
    y = s.y + v * math.sin(heading) * dt
    return OwnshipState(x, y, v, heading, tilt)


def _reflect(p: float, lo: float, hi: float) -> tuple[float, int]:
    """Fold p back into [lo, hi]; the sign flips once per wall bounce."""
    sign = 1
    while p < lo or p > hi:
        if p < lo:
            p = 2.0 * lo - p
        else:
            p = 2.0 * hi - p
        sign = -sign
    return p, sign


def step_intruders(
    intruders: list[IntruderState], dt: float, bounds: MapBounds
) -> list[IntruderState]:
    """Advance intruders at constant velocity with specular wall reflection."""
    out = []
    for it in intruders:
        x, sx = _reflect(it.x + it.vx * dt, bounds.x_min, bounds.x_max)
        y, sy = _reflect(it.y + it.vy * dt, bounds.y_min, bounds.y_max)
        out.append(IntruderState(it.id, x, y, it.vx * sx, it.vy * sy))
    return out


def min_intruder_distance(s: OwnshipState, intruders: list[IntruderState]) -> float:
    """Smallest planar separation between the ownship and any intruder."""
    if not intruders:
        return math.inf
    return min(math.hypot(it.x - s.x, it.y - s.y) for it in intruders)


def classify_terminal(
    s: OwnshipState,
    intruders: list[IntruderState],
    goal: tuple[float, float],
    cfg: TerminalConfig,
    step_count: int,
) -> TerminalKind:
    """Classify the avoidance state; precedence Collision > Timeout > Goal."""
    if min_intruder_distance(s, intruders) < cfg.d_min:
        return TerminalKind.COLLISION
    if not cfg.bounds.contains_xy(s.x, s.y) or step_count >= cfg.s_max:
        return TerminalKind.TIMEOUT
    if math.hypot(s.x - goal[0], s.y - goal[1]) <= cfg.goal_radius:
        return TerminalKind.GOAL
    return TerminalKind.NONE

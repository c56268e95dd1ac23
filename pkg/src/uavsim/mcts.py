"""Depth-limited Monte Carlo tree search for collision-free trajectory planning.

Each planning step grows a fresh tree over the 9 composite avoidance
actions.  Selection maximizes the mean child value plus the exploration
bonus 2*C*sqrt(2*ln(n)/n_j); unvisited children take priority.  Descent
stops at a terminal node, at the depth limit, or right after expanding a
new node; the leaf is scored by the terminal reward (goal 1, timeout 0.1,
collision 0) or, when non-terminal, by the distance-to-goal estimate
1 - d/diagonal.  The backed-up value bumps every traversed node by one
visit.  The final move is the most-visited root child (robust child).

Two interchangeable engines produce the same statistics: a plain-Python
tree usable with any model (including the toy MDPs in the test suite) and
a numba kernel over flat arrays for the avoidance sweeps.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._kernel import avoidance_search_kernel
from .world import (
    AVOID_ACTIONS,
    AvoidAction,
    IntruderState,
    MapBounds,
    OwnshipLimits,
    OwnshipState,
    TerminalConfig,
    TerminalKind,
    classify_terminal,
    step_intruders,
    step_ownship,
)


@dataclass(frozen=True)
class SearchConfig:
    """Everything one planning step needs besides the world state."""

    simulations: int
    search_depth: int
    exploration_c: float
    terminal: TerminalConfig
    limits: OwnshipLimits
    dt: float = 1.0
    reward_goal: float = 1.0
    reward_timeout: float = 0.1
    reward_collision: float = 0.0

    def __post_init__(self):
        if self.simulations < 1 or self.search_depth < 1:
            raise ValueError("simulations and search_depth must be >= 1")
        if self.exploration_c <= 0.0:
            raise ValueError("exploration_c must be positive")


def terminal_reward(kind: TerminalKind, config: SearchConfig | None = None) -> float:
    """Reward of a terminal verdict; rejects non-terminal input."""
    if kind == TerminalKind.GOAL:
        return config.reward_goal if config else 1.0
    if kind == TerminalKind.TIMEOUT:
        return config.reward_timeout if config else 0.1
    if kind == TerminalKind.COLLISION:
        return config.reward_collision if config else 0.0
    raise ValueError(f"not a terminal kind: {kind}")


def estimate_value(position, goal, map_diagonal: float) -> float:
    """Distance-based value of a non-terminal state: 1 at goal, 0 at max range."""
    x, y = (position.x, position.y) if hasattr(position, "x") else position
    d = math.hypot(x - goal[0], y - goal[1])
    return max(0.0, 1.0 - d / map_diagonal)


class SearchNode:
    """Tree node: cached state, verdict, visit count and accumulated value."""

    __slots__ = ("state", "kind", "visits", "total", "children")

    def __init__(self, state, kind: TerminalKind):
        self.state = state
        self.kind = kind
        self.visits = 0
        self.total = 0.0
        self.children: dict[int, SearchNode] = {}

    @property
    def mean(self) -> float:
        return self.total / self.visits if self.visits else math.nan


def uct_score(child: SearchNode, parent_visits: int, c: float) -> float:
    """Mean value plus exploration bonus; unvisited children score +inf."""
    if parent_visits < 1:
        raise ValueError("parent must have at least one visit")
    if child.visits == 0:
        return math.inf
    bonus = 2.0 * c * math.sqrt(2.0 * math.log(parent_visits) / child.visits)
    return child.mean + bonus


def _pick_max(scores, rng) -> int:
    """Argmax with a uniformly random tie-break among exact ties."""
    best = -math.inf
    ties = []
    for i, s in enumerate(scores):
        if s > best:
            best = s
            ties = [i]
        elif s == best:
            ties.append(i)
    return ties[0] if len(ties) == 1 else ties[int(rng.integers(len(ties)))]


def select_and_expand(root: SearchNode, model, config: SearchConfig, rng):
    """Descend by UCT, creating at most one new node; returns the path.

    The path starts at the root.  Descent stops on a terminal node, at the
    depth limit, or immediately after expanding a new child (which starts
    with zero visits; the first backpropagation sets them to one).
    """
    path = [root]
    node = root
    depth = 0
    while depth < config.search_depth and node.kind == TerminalKind.NONE:
        scores = []
        for a in range(model.num_actions):
            child = node.children.get(a)
            if child is None or child.visits == 0:
                scores.append(math.inf)
            else:
                scores.append(uct_score(child, node.visits, config.exploration_c))
        a = _pick_max(scores, rng)
        child = node.children.get(a)
        if child is None:
            state = model.step(node.state, a)
            child = SearchNode(state, model.terminal_kind(state))
            node.children[a] = child
            path.append(child)
            return path
        node = child
        path.append(node)
        depth += 1
    return path


def simulate_once(root: SearchNode, model, config: SearchConfig, rng) -> float:
    """One full selection/expansion/evaluation/backpropagation pass."""
    path = select_and_expand(root, model, config, rng)
    leaf = path[-1]
    if leaf.kind != TerminalKind.NONE:
        value = model.terminal_value(leaf.kind)
    else:
        value = model.leaf_value(leaf.state)
    for node in path:
        node.visits += 1
        node.total += value
    return value


def run_search(root_state, model, config: SearchConfig, rng) -> SearchNode:
    """Grow a fresh tree from root_state for the configured simulation budget."""
    kind = model.terminal_kind(root_state)
    if kind != TerminalKind.NONE:
        raise ValueError("root state must be non-terminal")
    root = SearchNode(root_state, kind)
    for _ in range(config.simulations):
        simulate_once(root, model, config, rng)
    return root


# --- avoidance-domain model ---------------------------------------------------


def intruder_frames(intruders: list[IntruderState], steps: int, dt: float,
                    bounds: MapBounds) -> list[list[IntruderState]]:
    """Constant-velocity extrapolation shared by every node at the same depth."""
    frames = [list(intruders)]
    current = list(intruders)
    for _ in range(steps):
        current = step_intruders(current, dt, bounds)
        frames.append(current)
    return frames


class AvoidancePlanModel:
    """Adapts ownship kinematics and intruder frames to the search engine.

    States are (OwnshipState, depth) pairs; the intruder snapshot at a node
    is implied by its depth because intruder motion ignores the ownship.
    """

    num_actions = len(AVOID_ACTIONS)

    def __init__(self, frames, goal, step0: int, config: SearchConfig):
        self.frames = frames
        self.goal = goal
        self.step0 = step0
        self.config = config
        self.diagonal = config.terminal.bounds.diagonal

    def root_state(self, own: OwnshipState):
        return (own, 0)

    def step(self, state, action_index: int):
        own, depth = state
        nxt = step_ownship(own, AVOID_ACTIONS[action_index],
                           self.config.dt, self.config.limits)
        return (nxt, depth + 1)

    def terminal_kind(self, state) -> TerminalKind:
        own, depth = state
        return classify_terminal(own, self.frames[depth], self.goal,
                                 self.config.terminal, self.step0 + depth)

    def leaf_value(self, state) -> float:
        own, _ = state
        return estimate_value(own, self.goal, self.diagonal)

    def terminal_value(self, kind: TerminalKind) -> float:
        return terminal_reward(kind, self.config)


@dataclass(frozen=True)
class ChildStat:
    """Root-child statistics exported for traces and queries."""

    action_index: int
    action: str
    visits: int
    mean_value: float
    exploration: float
    uct: float


@dataclass(frozen=True)
class TreeSnapshot:
    """Root statistics at the end of one planning step."""

    simulations: int
    parent_visits: int
    children: tuple[ChildStat, ...]

    def to_dict(self) -> dict:
        return {
            "simulations": self.simulations,
            "parent_visits": self.parent_visits,
            "children": [
                {
                    "action": c.action_index,
                    "name": c.action,
                    "visits": c.visits,
                    "mean_value": c.mean_value,
                    "exploration": c.exploration,
                    "uct": c.uct,
                }
                for c in self.children
            ],
        }


def _snapshot(visits, totals, parent_visits, config: SearchConfig) -> TreeSnapshot:
    stats = []
    for a in range(len(AVOID_ACTIONS)):
        n_j = int(visits[a])
        if n_j > 0:
            mean = float(totals[a]) / n_j
            bonus = 2.0 * config.exploration_c * math.sqrt(
                2.0 * math.log(parent_visits) / n_j)
            uct = mean + bonus
        else:
            mean = math.nan
            bonus = math.inf
            uct = math.inf
        stats.append(ChildStat(a, AVOID_ACTIONS[a].name, n_j, mean, bonus, uct))
    return TreeSnapshot(simulations=int(parent_visits),
                        parent_visits=int(parent_visits),
                        children=tuple(stats))


def plan_step(
    own: OwnshipState,
    intruders: list[IntruderState],
    step_count: int,
    goal,
    config: SearchConfig,
    rng: np.random.Generator,
    engine: str = "fast",
) -> tuple[AvoidAction, TreeSnapshot]:
    """Run one planning decision; returns the robust child and a snapshot.

    Ties on the visit count resolve to the lowest action index so a recorded
    choice can always be reproduced from the snapshot alone.
    """
    frames = intruder_frames(intruders, config.search_depth, config.dt,
                             config.terminal.bounds)
    if engine == "fast":
        m = len(intruders)
        frame_pos = np.empty((config.search_depth + 1, m, 2))
        for d, frame in enumerate(frames):
            for i, it in enumerate(frame):
                frame_pos[d, i, 0] = it.x
                frame_pos[d, i, 1] = it.y
        b = config.terminal.bounds
        lim = config.limits
        visits, totals, parent_visits = avoidance_search_kernel(
            own.x, own.y, own.speed, own.heading, own.tilt,
            step_count, frame_pos, float(goal[0]), float(goal[1]), b.diagonal,
            b.x_min, b.x_max, b.y_min, b.y_max,
            config.terminal.d_min, config.terminal.goal_radius,
            config.terminal.s_max,
            lim.v_min, lim.v_max, lim.tilt_step, lim.tilt_max,
            lim.accel_step, config.dt, lim.g_accel,
            config.simulations, config.search_depth, config.exploration_c,
            config.reward_goal, config.reward_timeout, config.reward_collision,
            int(rng.integers(2**32)),
        )
    elif engine == "reference":
        model = AvoidancePlanModel(frames, goal, step_count, config)
        root = run_search(model.root_state(own), model, config, rng)
        visits = np.zeros(len(AVOID_ACTIONS), dtype=np.int64)
        totals = np.zeros(len(AVOID_ACTIONS))
        for a, child in root.children.items():
            visits[a] = child.visits
            totals[a] = child.total
        parent_visits = root.visits
    else:
        raise ValueError("engine must be 'fast' or 'reference'")

    chosen = int(np.argmax(visits))
    return AVOID_ACTIONS[chosen], _snapshot(visits, totals, parent_visits, config)


@dataclass(frozen=True)
class EpisodeResult:
    """Outcome of one avoidance episode."""

    kind: TerminalKind
    steps: int
    trajectory: tuple[OwnshipState, ...]

    @property
    def terminal_reward(self) -> float:
        return terminal_reward(self.kind)


def fly_episode(
    start: OwnshipState,
    goal,
    intruders: list[IntruderState],
    config: SearchConfig,
    rng: np.random.Generator,
    policy=None,
    on_decision=None,
    engine: str = "fast",
) -> EpisodeResult:
    """Fly from start until a terminal verdict, replanning every step.

    policy overrides the tree planner when given: it is called with
    (own, intruders, step_count) and must return (AvoidAction, snapshot or
    None).  on_decision(step_count, own, action, snapshot) observes every
    decision, e.g. to write trace records.
    """
    own = start
    current = list(intruders)
    trajectory = [own]
    steps = 0
    while True:
        kind = classify_terminal(own, current, goal, config.terminal, steps)
        if kind != TerminalKind.NONE:
            return EpisodeResult(kind, steps, tuple(trajectory))
        if policy is None:
            action, snapshot = plan_step(own, current, steps, goal, config,
                                         rng, engine=engine)
        else:
            action, snapshot = policy(own, current, steps)
        if on_decision is not None:
            on_decision(steps, own, action, snapshot)
        own = step_ownship(own, action, config.dt, config.limits)
        current = step_intruders(current, config.dt, config.terminal.bounds)
        steps += 1
        trajectory.append(own)

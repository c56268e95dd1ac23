"""Avoidance baselines: a fixed-intruder-count DQN and a uniform-random policy.

The DQN observes the ownship, the goal offset and the states of its
configured number of nearest intruders (zero-padded when fewer are present,
truncated to the nearest ones when more are), so a net trained at one
intruder count can be evaluated at any other.  Training pairs the terminal
rewards (goal 1, timeout 0.1, collision 0) with potential-based shaping on
the distance value, which speeds up goal seeking without changing what the
optimal policy is.
"""

import math
from dataclasses import dataclass

import numpy as np

from .config import AvoidDqnConfig, ScenarioConfig
from .d3qn import QTrainer, TrainerHyper, Transition, epsilon_schedule
from .mcts import estimate_value
from .net import QNetwork
from .world import (
    AVOID_ACTIONS,
    IntruderState,
    OwnshipState,
    TerminalKind,
    classify_terminal,
    step_intruders,
    step_ownship,
)

NUM_AVOID_ACTIONS = len(AVOID_ACTIONS)


def avoidance_observation(own: OwnshipState, intruders, goal, m_train: int,
                          scenario: ScenarioConfig) -> np.ndarray:
    """Fixed-width observation: ownship + goal offset + m_train intruder slots."""
    bounds = scenario.planning_bounds
    lim = scenario.ownship_limits
    diag = bounds.diagonal
    v_scale = lim.v_max
    base = [
        (goal[0] - own.x) / diag,
        (goal[1] - own.y) / diag,
        (own.speed - lim.v_min) / (lim.v_max - lim.v_min),
        math.sin(own.heading),
        math.cos(own.heading),
        own.tilt / lim.tilt_max,
    ]
    ranked = sorted(intruders,
                    key=lambda it: (it.x - own.x) ** 2 + (it.y - own.y) ** 2)
    slots = []
    for i in range(m_train):
        if i < len(ranked):
            it = ranked[i]
            slots.extend([(it.x - own.x) / diag, (it.y - own.y) / diag,
                          it.vx / v_scale, it.vy / v_scale])
        else:
            slots.extend([0.0, 0.0, 0.0, 0.0])
    return np.array(base + slots)


def start_ownship(scenario: ScenarioConfig, goal) -> OwnshipState:
    """Spawn at the configured corner, pointed at the goal, wings level."""
    x, y = scenario.own_start_xy
    heading = math.atan2(goal[1] - y, goal[0] - x) % (2.0 * math.pi)
    return OwnshipState(x, y, scenario.own_start_speed, heading, 0.0)


def sample_intruders(rng: np.random.Generator, m: int,
                     scenario: ScenarioConfig) -> list[IntruderState]:
    """Uniform positions and headings; spawns clear of the ownship start."""
    b = scenario.planning_bounds
    sx, sy = scenario.own_start_xy
    out = []
    while len(out) < m:
        x = float(rng.uniform(b.x_min, b.x_max))
        y = float(rng.uniform(b.y_min, b.y_max))
        if math.hypot(x - sx, y - sy) < scenario.spawn_clearance:
            continue
        speed = float(rng.uniform(scenario.intruder_speed_min,
                                  scenario.intruder_speed_max))
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        out.append(IntruderState(len(out), x, y,
                                 speed * math.cos(theta),
                                 speed * math.sin(theta)))
    return out


def greedy_avoid_action(net: QNetwork, obs: np.ndarray) -> int:
    q = net.q_groups(obs[None, :])[0][0]
    return int(np.argmax(q))


def dqn_avoid_policy(net: QNetwork, goal, m_train: int, scenario: ScenarioConfig):
    """Greedy 9-action policy closure for fly_episode."""

    def policy(own, intruders, step):
        obs = avoidance_observation(own, intruders, goal, m_train, scenario)
        return AVOID_ACTIONS[greedy_avoid_action(net, obs)], None

    return policy


def random_avoid_policy(rng: np.random.Generator):
    """Uniform floor baseline over the 9 composite actions."""

    def policy(own, intruders, step):
        return AVOID_ACTIONS[int(rng.integers(NUM_AVOID_ACTIONS))], None

    return policy


@dataclass
class AvoidTrainStats:
    episodes: int
    goal_rate: float
    collision_rate: float
    timeout_rate: float


def train_avoidance_dqn(scenario: ScenarioConfig, goal, cfg: AvoidDqnConfig,
                        seed: int) -> tuple[QNetwork, AvoidTrainStats]:
    """Train the fixed-M baseline on freshly sampled intruder episodes."""
    rules = scenario.terminal_config()
    diag = scenario.planning_bounds.diagonal
    root = np.random.SeedSequence([seed, 2001])
    net_ss, train_ss = root.spawn(2)
    rng = np.random.default_rng(train_ss)
    obs_dim = 6 + 4 * cfg.train_intruders
    net = QNetwork(obs_dim, cfg.hidden_sizes, (NUM_AVOID_ACTIONS,),
                   dueling=False, rng=np.random.default_rng(net_ss))
    trainer = QTrainer(net, TrainerHyper(
        discount=cfg.discount,
        batch_size=cfg.batch_size,
        buffer_capacity=cfg.buffer_capacity,
        learning_rate=cfg.learning_rate,
        target_sync_every=cfg.target_sync_every,
        reward_scale=1.0,
        target_mode="vanilla",
    ))

    outcomes = {TerminalKind.GOAL: 0, TerminalKind.COLLISION: 0,
                TerminalKind.TIMEOUT: 0}
    for episode in range(cfg.episodes):
        epsilon = epsilon_schedule(episode, cfg.episodes,
                                   cfg.epsilon_start, cfg.epsilon_end)
        intruders = sample_intruders(rng, cfg.train_intruders, scenario)
        own = start_ownship(scenario, goal)
        obs = avoidance_observation(own, intruders, goal,
                                    cfg.train_intruders, scenario)
        phi = estimate_value(own, goal, diag)
        steps = 0
        while True:
            if rng.random() < epsilon:
                a = int(rng.integers(NUM_AVOID_ACTIONS))
            else:
                a = greedy_avoid_action(net, obs)
            own = step_ownship(own, AVOID_ACTIONS[a], scenario.dt,
                               scenario.ownship_limits)
            intruders = step_intruders(intruders, scenario.dt,
                                       scenario.planning_bounds)
            steps += 1
            kind = classify_terminal(own, intruders, goal, rules, steps)
            next_obs = avoidance_observation(own, intruders, goal,
                                             cfg.train_intruders, scenario)
            next_phi = estimate_value(own, goal, diag)
            terminal = kind != TerminalKind.NONE
            if kind == TerminalKind.GOAL:
                reward = 1.0
            elif kind == TerminalKind.TIMEOUT:
                reward = 0.1
            elif kind == TerminalKind.COLLISION:
                reward = 0.0
            else:
                reward = 0.0
            # progress shaping: the raw distance-value deltas (~0.02/step)
            # are too faint for a small net, so the potential is scaled up
            reward += cfg.shaping_gain * (next_phi - phi)
            trainer.push(Transition(obs, np.array([a]), reward,
                                    next_obs, terminal))
            trainer.train_step(rng)
            obs = next_obs
            phi = next_phi
            if terminal:
                outcomes[kind] += 1
                break
    total = max(cfg.episodes, 1)
    stats = AvoidTrainStats(
        episodes=cfg.episodes,
        goal_rate=outcomes[TerminalKind.GOAL] / total,
        collision_rate=outcomes[TerminalKind.COLLISION] / total,
        timeout_rate=outcomes[TerminalKind.TIMEOUT] / total,
    )
    return net, stats

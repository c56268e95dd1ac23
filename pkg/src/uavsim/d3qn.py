"""Service-phase learning agent: hover coordinate and per-user power levels.

The action is factored into one 7-way move group and one 6-way power-level
group per user; the joint Q of an action is the sum of its factor Qs.  The
trainer runs the standard loop (epsilon-greedy rollouts, uniform replay,
frozen target copy, Adam on squared TD error) in either double or vanilla
target mode, with dueling or plain network heads.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from .config import D3QNConfig, ScenarioConfig
from .net import Adam, QNetwork
from .world import ServiceMove, UavPose, UserState, apply_service_move

NUM_MOVES = len(ServiceMove)


@dataclass(frozen=True)
class ServiceAction:
    """One joint service decision: a move plus a power level per user."""

    move: ServiceMove
    power_levels: tuple[int, ...]


def action_group_sizes(num_users: int, power_levels: int = 6) -> tuple[int, ...]:
    return (NUM_MOVES,) + (power_levels,) * num_users


def encode_action(action: ServiceAction) -> np.ndarray:
    return np.array([int(action.move)] + list(action.power_levels), dtype=np.int64)


def decode_action(indices) -> ServiceAction:
    return ServiceAction(ServiceMove(int(indices[0])),
                         tuple(int(i) for i in indices[1:]))


def decode_power(levels, p_max: float, num_levels: int = 6) -> ch.PowerAllocation:
    """Map discrete levels to watts; level 0 means the user is unserved.

    Raw powers are level * P_max / ((num_levels - 1) * K); if the served sum
    ever exceeded P_max it would be scaled back onto the constraint, so the
    budget is tight but never violated.
    """
    levels = [int(l) for l in levels]
    k = len(levels)
    if any(l < 0 or l >= num_levels for l in levels):
        raise ValueError(f"levels must lie in 0..{num_levels - 1}")
    unit = p_max / ((num_levels - 1) * k)
    powers = [l * unit for l in levels]
    served = [1 if l > 0 else 0 for l in levels]
    total = sum(p for p, v in zip(powers, served) if v)
    if total > p_max:
        scale = p_max / total
        powers = [p * scale if v else 0.0 for p, v in zip(powers, served)]
    return ch.PowerAllocation(powers=tuple(powers), served=tuple(served))


def compute_reward(rate: float, violations: int) -> float:
    """Step reward: the system rate damped by one halving per violation."""
    if violations < 0:
        raise ValueError("violation count must be nonnegative")
    return rate * 2.0 ** (-violations)


def epsilon_schedule(episode: int, episodes: int, start: float, end: float) -> float:
    """Affine decay from start at episode 0 to end at the last episode."""
    if episodes <= 1:
        return end
    frac = min(max(episode / (episodes - 1), 0.0), 1.0)
    return start + (end - start) * frac


def select_action(net: QNetwork, obs, epsilon: float, rng: np.random.Generator) -> ServiceAction:
    """Epsilon-greedy over the factored action space.

    One coin decides explore-vs-exploit for the whole step; exploration
    draws each factor uniformly, exploitation takes the per-group argmax
    (ties resolve to the lowest index).
    """
    sizes = net.group_sizes
    if rng.random() < epsilon:
        indices = [int(rng.integers(size)) for size in sizes]
    else:
        q_groups = net.q_groups(np.asarray(obs)[None, :])
        indices = [int(np.argmax(q[0])) for q in q_groups]
    return decode_action(indices)


@dataclass(frozen=True)
class Transition:
    """One stored experience step."""

    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Fixed-capacity FIFO ring with uniform no-replacement sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._data: list[Transition] = []
        self._next = 0

    def __len__(self):
        return len(self._data)

    def push(self, transition: Transition):
        if len(self._data) < self.capacity:
            self._data.append(transition)
        else:
            self._data[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.choice(len(self._data), size=batch_size, replace=False)
        batch = [self._data[i] for i in idx]
        obs = np.stack([t.obs for t in batch])
        actions = np.stack([t.action for t in batch])
        rewards = np.array([t.reward for t in batch])
        next_obs = np.stack([t.next_obs for t in batch])
        terminals = np.array([t.terminal for t in batch], dtype=float)
        return obs, actions, rewards, next_obs, terminals


def td_target(rewards, terminals, next_q_online, next_q_target, gamma, mode):
    """Bootstrapped targets, summed over factor groups.

    next_q_online/next_q_target are sequences of (batch, group) arrays from
    the online and frozen networks.  'double' picks the next action with the
    online net and evaluates it with the target net; 'vanilla' takes the
    target net's own maximum.  Terminal transitions keep y = r.
    """
    if mode not in ("double", "vanilla"):
        raise ValueError("mode must be 'double' or 'vanilla'")
    rewards = np.asarray(rewards, dtype=float)
    terminals = np.asarray(terminals, dtype=float)
    bootstrap = np.zeros_like(rewards)
    rows = np.arange(len(rewards))
    for q_on, q_tg in zip(next_q_online, next_q_target):
        if mode == "double":
            best = np.argmax(q_on, axis=1)
            bootstrap += q_tg[rows, best]
        else:
            bootstrap += q_tg.max(axis=1)
    return rewards + gamma * bootstrap * (1.0 - terminals)


@dataclass
class TrainerHyper:
    """Flat view of the optimizer-facing hyperparameters."""

    discount: float = 0.95
    batch_size: int = 64
    buffer_capacity: int = 10_000
    learning_rate: float = 1.0e-3
    target_sync_every: int = 200
    reward_scale: float = 1.0
    target_mode: str = "double"


class QTrainer:
    """Replay buffer + target network + Adam around one QNetwork."""

    def __init__(self, net: QNetwork, hyper: TrainerHyper):
        self.net = net
        self.target = net.clone()
        self.hyper = hyper
        self.buffer = ReplayBuffer(hyper.buffer_capacity)
        self.opt = Adam(net.parameters(), lr=hyper.learning_rate)
        self.updates = 0

    def push(self, transition: Transition):
        self.buffer.push(transition)

    def train_step(self, rng: np.random.Generator):
        """One Adam step on the squared TD error; None when data is short."""
        h = self.hyper
        if len(self.buffer) < h.batch_size:
            return None
        obs, actions, rewards, next_obs, terminals = self.buffer.sample(h.batch_size, rng)
        next_online = self.net.q_groups(next_obs)
        next_target = self.target.q_groups(next_obs)
        y = td_target(rewards * h.reward_scale, terminals, next_online,
                      next_target, h.discount, h.target_mode)

        q_groups, cache = self.net.forward(obs)
        rows = np.arange(len(obs))
        joint = sum(q[rows, actions[:, i]] for i, q in enumerate(q_groups))
        err = joint - y
        loss = float(np.mean(err ** 2))
        grad_joint = 2.0 * err / len(obs)
        grad_groups = []
        for i, q in enumerate(q_groups):
            g = np.zeros_like(q)
            g[rows, actions[:, i]] = grad_joint
            grad_groups.append(g)
        grads = self.net.backward(cache, grad_groups)
        self.opt.step(self.net.parameters(), grads)
        self.updates += 1
        if self.updates % h.target_sync_every == 0:
            self.target.set_parameters(self.net.parameters())
        return loss


# --- service environment ----------------------------------------------------


@dataclass(frozen=True)
class GainNormalizer:
    """Affine map of log10 channel gains fitted on a warmup window."""

    lo: float
    hi: float

    @classmethod
    def fit(cls, gain_samples) -> "GainNormalizer":
        logs = np.log10(np.asarray(gain_samples, dtype=float).reshape(-1))
        lo = float(logs.min())
        hi = float(logs.max())
        if hi - lo < 1e-9:
            hi = lo + 1.0
        return cls(lo, hi)

    def transform(self, gains) -> np.ndarray:
        logs = np.log10(np.asarray(gains, dtype=float))
        return (logs - self.lo) / (self.hi - self.lo)


class ServiceEnv:
    """World + channel coupling for the service phase.

    Users are fixed for the life of the environment (one scenario); reset
    re-randomizes only the UAV start pose near the lower altitude bound.
    Episodes are fixed-length; the trainer marks the last step of each
    episode terminal so the bootstrap horizon matches the episode budget.
    """

    def __init__(self, scenario: ScenarioConfig, users: list[UserState],
                 fading_rng: np.random.Generator | None = None,
                 power_levels: int = 6):
        self.scenario = scenario
        self.users = users
        self.bounds = scenario.service_bounds
        self.params = scenario.channel
        self.fading_rng = fading_rng
        self.power_levels = power_levels
        self.pose: UavPose | None = None
        self._gains: np.ndarray | None = None

    def reset(self, rng: np.random.Generator) -> None:
        b = self.bounds
        self.pose = UavPose(
            x=float(rng.uniform(b.x_min, b.x_max)),
            y=float(rng.uniform(b.y_min, b.y_max)),
            h=float(b.h_min),
        )
        self._gains = ch.user_gains(self.pose, self.users, self.params, self.fading_rng)

    @property
    def gains(self) -> np.ndarray:
        return self._gains

    def observation(self, normalizer: GainNormalizer) -> np.ndarray:
        b = self.bounds
        pose = np.array([
            (self.pose.x - b.x_min) / (b.x_max - b.x_min),
            (self.pose.y - b.y_min) / (b.y_max - b.y_min),
            (self.pose.h - b.h_min) / (b.h_max - b.h_min),
        ])
        return np.concatenate([pose, normalizer.transform(self._gains)])

    def step(self, action: ServiceAction):
        """Apply the move and allocation; returns (reward, info dict)."""
        alloc = decode_power(action.power_levels, self.scenario.p_max_w,
                             self.power_levels)
        report = ch.sinr_and_rates(self._gains, alloc, self.params)
        self.pose, clamped = apply_service_move(
            self.pose, action.move, self.scenario.service_step_m, self.bounds)
        violations = ch.qos_violations(report, alloc, self.scenario.r_qos_bps)
        lam = violations + (1 if clamped else 0)
        reward = compute_reward(report.system_rate, lam)
        self._gains = ch.user_gains(self.pose, self.users, self.params, self.fading_rng)
        return reward, {
            "rate": report.system_rate,
            "qos_violations": violations,
            "clamped": clamped,
            "report": report,
            "alloc": alloc,
        }


def sample_users(scenario: ScenarioConfig, rng: np.random.Generator) -> list[UserState]:
    """Scatter K users uniformly over the service ground area."""
    b = scenario.service_bounds
    return [
        UserState(i, float(rng.uniform(b.x_min, b.x_max)),
                  float(rng.uniform(b.y_min, b.y_max)))
        for i in range(scenario.num_users)
    ]


# --- training loop ------------------------------------------------------------


@dataclass
class CurvePoint:
    episode: int
    ret: float
    epsilon: float
    loss_mean: float


@dataclass
class TrainResult:
    mode: str
    curve: list[CurvePoint]
    net: QNetwork | None
    normalizer: GainNormalizer
    goal_pose: UavPose
    greedy_return: float
    greedy_steps: list[dict] = field(default_factory=list)


def _warmup_normalizer(env: ServiceEnv, scenario: ScenarioConfig,
                       cfg: D3QNConfig, rng: np.random.Generator) -> GainNormalizer:
    """Collect log-gain bounds from a short random-policy rollout."""
    samples = []
    steps = 0
    while steps < cfg.norm_warmup_steps:
        env.reset(rng)
        for _ in range(min(cfg.steps_per_episode, cfg.norm_warmup_steps - steps)):
            samples.append(env.gains.copy())
            move = ServiceMove(int(rng.integers(NUM_MOVES)))
            levels = tuple(int(l) for l in rng.integers(cfg.power_levels,
                                                        size=scenario.num_users))
            env.step(ServiceAction(move, levels))
            steps += 1
    return GainNormalizer.fit(np.concatenate(samples))


def greedy_rollout(net: QNetwork, env: ServiceEnv, normalizer: GainNormalizer,
                   steps: int, rng: np.random.Generator):
    """Run one epsilon=0 episode; returns (return, final pose, step details).

    Step details carry the dueling decomposition per factor group so the
    trace layer can store an exact account of every pick.
    """
    env.reset(rng)
    total = 0.0
    details = []
    for t in range(steps):
        obs = env.observation(normalizer)
        q_groups, cache = net.forward(obs[None, :])
        v_val = float(cache.v_out[0, 0]) if net.dueling else None
        factors = []
        indices = []
        for gi, q in enumerate(q_groups):
            qrow = q[0]
            arow = cache.a_out[0, net.group_slices[gi]]
            best = int(np.argmax(qrow))
            indices.append(best)
            factors.append({
                "q": [float(x) for x in qrow],
                "advantage": [float(x) for x in arow],
                "value": v_val,
                "chosen": best,
            })
        action = decode_action(indices)
        reward, info = env.step(action)
        total += reward
        details.append({
            "step": t,
            "obs": obs,
            "action": action,
            "factors": factors,
            "reward": reward,
            "rate": info["rate"],
            "qos_violations": info["qos_violations"],
            "clamped": info["clamped"],
            "report": info["report"],
            "alloc": info["alloc"],
        })
    return total, env.pose, details


def run_random_policy(env: ServiceEnv, scenario: ScenarioConfig, cfg: D3QNConfig,
                      rng: np.random.Generator):
    """Uniform-action baseline; returns the same curve rows as training."""
    curve = []
    for episode in range(cfg.episodes):
        env.reset(rng)
        total = 0.0
        for _ in range(cfg.steps_per_episode):
            move = ServiceMove(int(rng.integers(NUM_MOVES)))
            levels = tuple(int(l) for l in rng.integers(cfg.power_levels,
                                                        size=scenario.num_users))
            reward, _ = env.step(ServiceAction(move, levels))
            total += reward
        curve.append(CurvePoint(episode, total, 1.0, math.nan))
    return curve


def run_training(scenario: ScenarioConfig, cfg: D3QNConfig, mode: str,
                 seed: int) -> TrainResult:
    """Train (or roll the random baseline) and extract the service coordinate.

    mode selects the network family: 'd3qn' = dueling heads + double
    targets, 'dqn' = plain heads + vanilla targets, 'random' = no learning.
    Identical seeds give bit-identical curves.
    """
    if mode not in ("d3qn", "dqn", "random"):
        raise ValueError("mode must be 'd3qn', 'dqn' or 'random'")
    root = np.random.SeedSequence([seed, {"d3qn": 0, "dqn": 1, "random": 2}[mode]])
    users_ss, warm_ss, train_ss, eval_ss, fading_ss = root.spawn(5)
    users_rng = np.random.default_rng(users_ss)
    users = sample_users(scenario, users_rng)
    fading_rng = (np.random.default_rng(fading_ss)
                  if scenario.channel.fading_mode == "rayleigh" else None)
    env = ServiceEnv(scenario, users, fading_rng, cfg.power_levels)
    rng = np.random.default_rng(train_ss)

    if mode == "random":
        curve = run_random_policy(env, scenario, cfg, rng)
        normalizer = GainNormalizer(0.0, 1.0)
        eval_rng = np.random.default_rng(eval_ss)
        env.reset(eval_rng)
        total = 0.0
        for _ in range(cfg.steps_per_episode):
            move = ServiceMove(int(eval_rng.integers(NUM_MOVES)))
            levels = tuple(int(l) for l in eval_rng.integers(cfg.power_levels,
                                                             size=scenario.num_users))
            reward, _ = env.step(ServiceAction(move, levels))
            total += reward
        return TrainResult(mode, curve, None, normalizer, env.pose, total)

    normalizer = _warmup_normalizer(env, scenario, cfg,
                                    np.random.default_rng(warm_ss))
    dueling = mode == "d3qn"
    target_mode = cfg.target_mode if dueling else "vanilla"
    sizes = action_group_sizes(scenario.num_users, cfg.power_levels)
    net = QNetwork(3 + scenario.num_users, cfg.hidden_sizes, sizes,
                   dueling=dueling, rng=rng)
    trainer = QTrainer(net, TrainerHyper(
        discount=cfg.discount,
        batch_size=cfg.batch_size,
        buffer_capacity=cfg.buffer_capacity,
        learning_rate=cfg.learning_rate,
        target_sync_every=cfg.target_sync_every,
        reward_scale=cfg.reward_scale,
        target_mode=target_mode,
    ))

    curve = []
    for episode in range(cfg.episodes):
        epsilon = epsilon_schedule(episode, cfg.episodes,
                                   cfg.epsilon_start, cfg.epsilon_end)
        env.reset(rng)
        obs = env.observation(normalizer)
        total = 0.0
        losses = []
        for t in range(cfg.steps_per_episode):
            action = select_action(net, obs, epsilon, rng)
            reward, _ = env.step(action)
            next_obs = env.observation(normalizer)
            terminal = t == cfg.steps_per_episode - 1
            trainer.push(Transition(obs, encode_action(action),
                                    reward, next_obs, terminal))
            loss = trainer.train_step(rng)
            if loss is not None:
                losses.append(loss)
            obs = next_obs
            total += reward
        curve.append(CurvePoint(episode, total, epsilon,
                                float(np.mean(losses)) if losses else math.nan))

    eval_rng = np.random.default_rng(eval_ss)
    greedy_return, goal_pose, details = greedy_rollout(
        net, env, normalizer, cfg.steps_per_episode, eval_rng)
    return TrainResult(mode, curve, net, normalizer, goal_pose,
                       greedy_return, details)

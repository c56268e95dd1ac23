"""Shared toy models and generators for the search-related test modules."""

import math

from uavsim.world import TerminalKind


class BanditModel:
    """Depth-agnostic toy: every action leads to a fixed-value leaf."""

    def __init__(self, values, terminal=False):
        self.values = list(values)
        self.num_actions = len(self.values)
        self.terminal = terminal

    def step(self, state, action):
        return action

    def terminal_kind(self, state):
        return TerminalKind.GOAL if self.terminal else TerminalKind.NONE

    def leaf_value(self, state):
        return self.values[state]

    def terminal_value(self, kind):
        raise AssertionError("bandit leaves are non-terminal")


class TreeMdpModel:
    """Deterministic branching-B tree with rewards only at depth-D leaves.

    Partial paths return an uninformative 0.5 so shallow expansions carry
    no signal about which branch is best.
    """

    def __init__(self, branching, depth, leaf_values):
        self.num_actions = branching
        self.depth = depth
        self.leaf_values = leaf_values  # dict path-tuple -> value

    def step(self, state, action):
        return state + (action,)

    def terminal_kind(self, state):
        return TerminalKind.NONE

    def leaf_value(self, state):
        if len(state) < self.depth:
            return 0.5
        return self.leaf_values[state]

    def terminal_value(self, kind):
        raise AssertionError("tree leaves are non-terminal")

    def best_first_action(self):
        """Exhaustive enumeration over all action paths."""
        best_val = -math.inf
        best_a = None
        for path, value in self.leaf_values.items():
            if value > best_val:
                best_val = value
                best_a = path[0]
        return best_a


def separated_tree_mdp(rng, branching=3, depth=3, margin=0.1):
    """Random leaf values with a clear winner.

    Mean-backup UCT resolves the optimal branch only when the best branch
    maximum is separated from the runner-up, so draws are rejected until
    the top-two branch maxima differ by at least `margin`.
    """
    paths = [()]
    for _ in range(depth):
        paths = [p + (a,) for p in paths for a in range(branching)]
    while True:
        values = rng.uniform(0.0, 1.0, size=len(paths))
        leaf_values = {p: float(v) for p, v in zip(paths, values)}
        branch_max = [
            max(v for p, v in leaf_values.items() if p[0] == a)
            for a in range(branching)
        ]
        ranked = sorted(branch_max, reverse=True)
        if ranked[0] - ranked[1] >= margin:
            return TreeMdpModel(branching, depth, leaf_values)


# --- finite-difference gradient oracle ------------------------------------


def mse_objective(net, x, chosen, targets):
    """Training-style loss: joint Q at the chosen factor actions vs targets."""
    import numpy as np

    q_groups, cache = net.forward(x)
    joint = sum(q[np.arange(len(x)), chosen[:, i]] for i, q in enumerate(q_groups))
    loss = float(np.mean((joint - targets) ** 2))
    return loss, q_groups, cache, joint


def backprop_grads(net, x, chosen, targets):
    import numpy as np

    loss, q_groups, cache, joint = mse_objective(net, x, chosen, targets)
    grad_joint = 2.0 * (joint - targets) / len(x)
    grad_groups = []
    for i, q in enumerate(q_groups):
        g = np.zeros_like(q)
        g[np.arange(len(x)), chosen[:, i]] = grad_joint
        grad_groups.append(g)
    return loss, net.backward(cache, grad_groups)


def finite_difference_grads(net, x, chosen, targets, h=1e-5):
    """Central differences over every parameter entry (independent oracle)."""
    import numpy as np

    grads = []
    for p in net.parameters():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = mse_objective(net, x, chosen, targets)[0]
            flat[i] = orig - h
            lm = mse_objective(net, x, chosen, targets)[0]
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-4):
    import numpy as np

    worst = 0.0
    for a, b in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst

"""Flat-array tree search kernel for the avoidance planner.

Mirrors the Python engine in mcts.py exactly: same selection rule, same
expansion convention (new nodes start unvisited; the first backpropagation
brings them to one visit), same leaf scoring.  Node states live in parallel
arrays indexed by node id; intruder snapshots come from the precomputed
per-depth frames, so only ownship state is stored per node.
"""

import math

import numpy as np
from numba import njit

TWO_PI = 2.0 * math.pi


@njit(cache=True)
def avoidance_search_kernel(
    own_x, own_y, own_v, own_psi, own_phi,
    step0, frames, goal_x, goal_y, diagonal,
    x_min, x_max, y_min, y_max,
    d_min, goal_radius, s_max,
    v_min, v_max, tilt_step, tilt_max, accel_step, dt, g_accel,
    sims, depth, c, r_goal, r_timeout, r_coll, seed,
):
    np.random.seed(seed)
    max_nodes = sims + 1
    sx = np.empty(max_nodes)
    sy = np.empty(max_nodes)
    sv = np.empty(max_nodes)
    spsi = np.empty(max_nodes)
    sphi = np.empty(max_nodes)
    sdepth = np.zeros(max_nodes, dtype=np.int64)
    skind = np.zeros(max_nodes, dtype=np.int64)
    visits = np.zeros(max_nodes, dtype=np.int64)
    totals = np.zeros(max_nodes)
    children = np.full((max_nodes, 9), -1, dtype=np.int64)

    sx[0] = own_x
    sy[0] = own_y
    sv[0] = own_v
    spsi[0] = own_psi
    sphi[0] = own_phi
    n_nodes = 1

    n_intruders = frames.shape[1]
    path = np.empty(depth + 2, dtype=np.int64)

    for _ in range(sims):
        node = 0
        path[0] = 0
        plen = 1
        value = 0.0
        while True:
            kind = skind[node]
            if kind != 0:
                if kind == 1:
                    value = r_coll
                elif kind == 2:
                    value = r_timeout
                else:
                    value = r_goal
                break
            d = sdepth[node]
            if d >= depth:
                dist = math.hypot(sx[node] - goal_x, sy[node] - goal_y)
                value = max(0.0, 1.0 - dist / diagonal)
                break

            # UCT selection; unvisited actions take priority, exact ties
            # break uniformly at random (reservoir over the tie set)
            log_n = math.log(visits[node]) if visits[node] > 0 else 0.0
            best = -1.0e300
            chosen = 0
            ties = 1
            for a in range(9):
                child = children[node, a]
                if child < 0 or visits[child] == 0:
                    score = 1.0e300
                else:
                    score = totals[child] / visits[child] + 2.0 * c * math.sqrt(
                        2.0 * log_n / visits[child])
                if score > best:
                    best = score
                    chosen = a
                    ties = 1
                elif score == best:
                    ties += 1
                    if np.random.random() < 1.0 / ties:
                        chosen = a

            child = children[node, chosen]
            if child >= 0:
                node = child
                path[plen] = node
                plen += 1
                continue

            # expand one new node, then stop the descent
            child = n_nodes
            n_nodes += 1
            tilt = sphi[node] + (chosen // 3 - 1) * tilt_step
            if tilt > tilt_max:
                tilt = tilt_max
            elif tilt < -tilt_max:
                tilt = -tilt_max
            v = sv[node] + (chosen % 3 - 1) * accel_step * dt
            if v > v_max:
                v = v_max
            elif v < v_min:
                v = v_min
            psi = (spsi[node] + g_accel * math.tan(tilt) / v * dt) % TWO_PI
            x = sx[node] + v * math.cos(psi) * dt
            y = sy[node] + v * math.sin(psi) * dt
            nd = d + 1

            kind = 0
            for i in range(n_intruders):
                if math.hypot(frames[nd, i, 0] - x, frames[nd, i, 1] - y) < d_min:
                    kind = 1
                    break
            if kind == 0:
                if x < x_min or x > x_max or y < y_min or y > y_max or step0 + nd >= s_max:
                    kind = 2
                elif math.hypot(x - goal_x, y - goal_y) <= goal_radius:
                    kind = 3

            sx[child] = x
            sy[child] = y
            sv[child] = v
            spsi[child] = psi
            sphi[child] = tilt
            sdepth[child] = nd
            skind[child] = kind
            children[node, chosen] = child
            path[plen] = child
            plen += 1

            if kind == 1:
                value = r_coll
            elif kind == 2:
                value = r_timeout
            elif kind == 3:
                value = r_goal
            else:
                dist = math.hypot(x - goal_x, y - goal_y)
                value = max(0.0, 1.0 - dist / diagonal)
            break

        for i in range(plen):
            visits[path[i]] += 1
            totals[path[i]] += value

    child_visits = np.zeros(9, dtype=np.int64)
    child_totals = np.zeros(9)
    for a in range(9):
        child = children[0, a]
        if child >= 0:
            child_visits[a] = visits[child]
            child_totals[a] = totals[child]
    return child_visits, child_totals, visits[0]

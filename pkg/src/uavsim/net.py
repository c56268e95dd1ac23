"""From-scratch fully connected Q-network with factored dueling heads.

The network maps an observation to one Q-vector per action factor (one
7-way move group plus one 6-way power group per user for the service agent,
or a single 9-way group for avoidance baselines).  In dueling mode a scalar
state-value head V and an advantage head A are combined per factor group as

    Q_g(s, a) = V(s) + A_g(s, a) - mean_a' A_g(s, a'),

so the mean Q over each group equals V by construction.  Plain mode skips V
and reads Q straight off the head, which is the classic DQN output layout.

Everything is numpy float64 with hand-written backprop; training stays
bit-reproducible for a fixed seed.
"""

import json
from dataclasses import dataclass

import numpy as np

CHECKPOINT_SCHEMA_VERSION = 1


@dataclass
class ForwardCache:
    """Intermediate activations kept for the backward pass."""

    x: np.ndarray
    zs: list
    hs: list
    a_out: np.ndarray
    v_out: np.ndarray | None


class QNetwork:
    """ReLU MLP trunk with a factored advantage head and optional value head."""

    def __init__(self, input_dim, hidden_sizes, group_sizes, dueling=True, rng=None):
        if rng is None:
            rng = np.random.default_rng()
        self.input_dim = int(input_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.group_sizes = tuple(int(g) for g in group_sizes)
        self.dueling = bool(dueling)
        self.num_outputs = sum(self.group_sizes)

        self.trunk_w = []
        self.trunk_b = []
        fan_in = self.input_dim
        for width in self.hidden_sizes:
            self.trunk_w.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, width)))
            # small positive bias keeps units initially active and off the kink
            self.trunk_b.append(np.full(width, 0.01))
            fan_in = width
        self.adv_w = rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, self.num_outputs))
        self.adv_b = np.zeros(self.num_outputs)
        if self.dueling:
            self.val_w = rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, 1))
            self.val_b = np.zeros(1)
        else:
            self.val_w = None
            self.val_b = None

        self.group_slices = []
        start = 0
        for g in self.group_sizes:
            self.group_slices.append(slice(start, start + g))
            start += g

    # --- parameter plumbing -------------------------------------------------

    def parameters(self):
        """Live references, ordered to match named_parameters()."""
        params = []
        for w, b in zip(self.trunk_w, self.trunk_b):
            params.extend((w, b))
        params.extend((self.adv_w, self.adv_b))
        if self.dueling:
            params.extend((self.val_w, self.val_b))
        return params

    def named_parameters(self):
        names = []
        for i in range(len(self.trunk_w)):
            names.extend((f"trunk.{i}.w", f"trunk.{i}.b"))
        names.extend(("adv.w", "adv.b"))
        if self.dueling:
            names.extend(("val.w", "val.b"))
        return list(zip(names, self.parameters()))

    def set_parameters(self, values):
        for target, value in zip(self.parameters(), values):
            np.copyto(target, value)

    def clone(self):
        """Deep copy, used for the frozen target network."""
        twin = QNetwork(self.input_dim, self.hidden_sizes, self.group_sizes,
                        self.dueling, rng=np.random.default_rng(0))
        twin.set_parameters(self.parameters())
        return twin

    # --- forward / backward -------------------------------------------------

    def forward(self, x):
        """Return (per-group Q arrays, cache).  x has shape (batch, input_dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        zs, hs = [], [x]
        h = x
        for w, b in zip(self.trunk_w, self.trunk_b):
            z = h @ w + b
            h = np.maximum(z, 0.0)
            zs.append(z)
            hs.append(h)
        a_out = h @ self.adv_w + self.adv_b
        v_out = h @ self.val_w + self.val_b if self.dueling else None
        q_groups = []
        for sl in self.group_slices:
            a_g = a_out[:, sl]
            if self.dueling:
                q_groups.append(v_out + a_g - a_g.mean(axis=1, keepdims=True))
            else:
                q_groups.append(a_g)
        return q_groups, ForwardCache(x, zs, hs, a_out, v_out)

    def q_groups(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_q_groups):
        """Chain rule through heads and trunk.

        grad_q_groups holds dLoss/dQ_g per factor group; the returned list is
        aligned with parameters().
        """
        batch = cache.x.shape[0]
        grad_a = np.zeros((batch, self.num_outputs))
        grad_v = np.zeros((batch, 1)) if self.dueling else None
        for sl, gq in zip(self.group_slices, grad_q_groups):
            if self.dueling:
                grad_a[:, sl] = gq - gq.mean(axis=1, keepdims=True)
                grad_v += gq.sum(axis=1, keepdims=True)
            else:
                grad_a[:, sl] = gq

        h_last = cache.hs[-1]
        d_adv_w = h_last.T @ grad_a
        d_adv_b = grad_a.sum(axis=0)
        dh = grad_a @ self.adv_w.T
        if self.dueling:
            d_val_w = h_last.T @ grad_v
            d_val_b = grad_v.sum(axis=0)
            dh = dh + grad_v @ self.val_w.T

        trunk_grads = []
        for i in range(len(self.trunk_w) - 1, -1, -1):
            dz = dh * (cache.zs[i] > 0.0)
            trunk_grads.append((cache.hs[i].T @ dz, dz.sum(axis=0)))
            dh = dz @ self.trunk_w[i].T

        grads = []
        for dw, db in reversed(trunk_grads):
            grads.extend((dw, db))
        grads.extend((d_adv_w, d_adv_b))
        if self.dueling:
            grads.extend((d_val_w, d_val_b))
        return grads


class Adam:
    """Classic Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def save_checkpoint(net: QNetwork, path, extra: dict | None = None):
    """Write a structured-text checkpoint (schema documented in the README).

    Tensors are stored as row-major flat lists next to their shapes, so any
    implementation can rebuild the matrices without guessing the layout.
    """
    tensors = [
        {"name": name, "shape": list(p.shape), "data": p.reshape(-1).tolist()}
        for name, p in net.named_parameters()
    ]
    doc = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "qnetwork",
        "input_dim": net.input_dim,
        "hidden_sizes": list(net.hidden_sizes),
        "group_sizes": list(net.group_sizes),
        "dueling": net.dueling,
        "tensors": tensors,
        "extra": extra or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Rebuild a QNetwork from a checkpoint file; returns (net, extra)."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema: {doc.get('schema_version')}")
    net = QNetwork(doc["input_dim"], doc["hidden_sizes"], doc["group_sizes"],
                   doc["dueling"], rng=np.random.default_rng(0))
    by_name = {t["name"]: t for t in doc["tensors"]}
    values = []
    for name, p in net.named_parameters():
        t = by_name[name]
        values.append(np.asarray(t["data"], dtype=np.float64).reshape(t["shape"]))
        if tuple(t["shape"]) != p.shape:
            raise ValueError(f"tensor {name} has shape {t['shape']}, expected {p.shape}")
    net.set_parameters(values)
    return net, doc.get("extra", {})

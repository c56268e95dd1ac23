"""Network math: dueling identity, backprop vs finite differences, Adam, IO."""

import numpy as np
import pytest

from helpers import (
    backprop_grads,
    finite_difference_grads,
    max_relative_error,
)
from uavsim.net import Adam, QNetwork, load_checkpoint, save_checkpoint


@pytest.mark.parametrize("dueling", [True, False])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradient_check_small_net(dueling, seed):
    rng = np.random.default_rng(seed)
    net = QNetwork(4, (8, 8), (3, 2), dueling=dueling, rng=rng)
    x = rng.normal(0.0, 1.0, (6, 4))
    chosen = np.column_stack([rng.integers(0, 3, 6), rng.integers(0, 2, 6)])
    targets = rng.normal(0.0, 1.0, 6)
    _, analytic = backprop_grads(net, x, chosen, targets)
    numeric = finite_difference_grads(net, x, chosen, targets)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_dueling_identity_mean_q_equals_v():
    rng = np.random.default_rng(2)
    net = QNetwork(5, (16, 16), (7, 6, 6), dueling=True, rng=rng)
    x = rng.normal(0.0, 1.0, (11, 5))
    q_groups, cache = net.forward(x)
    for q in q_groups:
        assert np.max(np.abs(q.mean(axis=1, keepdims=True) - cache.v_out)) < 1e-9


def test_argmax_invariant_to_constant_advantage_shift():
    rng = np.random.default_rng(3)
    net = QNetwork(4, (8,), (5,), dueling=True, rng=rng)
    x = rng.normal(0.0, 1.0, (4, 4))
    before = np.argmax(net.q_groups(x)[0], axis=1)
    net.adv_b += 3.7  # uniform shift cancels in the mean-subtracted aggregation
    after = np.argmax(net.q_groups(x)[0], axis=1)
    assert np.array_equal(before, after)


def test_plain_mode_has_no_value_head():
    net = QNetwork(4, (8,), (9,), dueling=False, rng=np.random.default_rng(0))
    assert net.val_w is None
    q_groups, cache = net.forward(np.zeros((1, 4)))
    assert cache.v_out is None
    assert q_groups[0].shape == (1, 9)


def test_adam_zero_lr_keeps_parameters():
    rng = np.random.default_rng(4)
    net = QNetwork(3, (8,), (4,), rng=rng)
    before = [p.copy() for p in net.parameters()]
    opt = Adam(net.parameters(), lr=0.0)
    x = rng.normal(0.0, 1.0, (5, 3))
    chosen = rng.integers(0, 4, (5, 1))
    targets = rng.normal(0.0, 1.0, 5)
    _, grads = backprop_grads(net, x, chosen, targets)
    opt.step(net.parameters(), grads)
    for b, p in zip(before, net.parameters()):
        assert np.array_equal(b, p)


def test_adam_overfits_fixed_batch():
    rng = np.random.default_rng(5)
    net = QNetwork(3, (16, 16), (4,), rng=rng)
    opt = Adam(net.parameters(), lr=3e-3)
    x = rng.normal(0.0, 1.0, (8, 3))
    chosen = rng.integers(0, 4, (8, 1))
    targets = rng.normal(0.0, 1.0, 8)
    loss = None
    for _ in range(500):
        loss, grads = backprop_grads(net, x, chosen, targets)
        opt.step(net.parameters(), grads)
    assert loss < 1e-3


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    net = QNetwork(7, (40, 40, 40), (7, 6, 6, 6, 6), dueling=True, rng=rng)
    path = tmp_path / "ckpt.json"
    save_checkpoint(net, path, extra={"note": "roundtrip", "gain_lo": -9.5})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "roundtrip", "gain_lo": -9.5}
    assert loaded.group_sizes == net.group_sizes and loaded.dueling
    x = rng.normal(0.0, 1.0, (5, 7))
    for q0, q1 in zip(net.q_groups(x), loaded.q_groups(x)):
        assert np.array_equal(q0, q1)


def test_clone_is_detached():
    net = QNetwork(3, (8,), (4,), rng=np.random.default_rng(7))
    twin = net.clone()
    x = np.zeros((1, 3))
    assert np.array_equal(net.q_groups(x)[0], twin.q_groups(x)[0])
    # shift a single output (a uniform shift would cancel in the aggregation)
    net.adv_b[0] += 1.0
    assert not np.array_equal(net.q_groups(x)[0], twin.q_groups(x)[0])

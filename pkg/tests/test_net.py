from fractions import Fraction

import numpy as np
import pytest

from mtmanip import autodiff as ad
from mtmanip.errors import DimensionError
from mtmanip.gradcheck import gradcheck
from mtmanip.losses import grasp_loss, poke_loss, push_loss
from mtmanip.net import GROUPS, MultiTaskNet, NetConfig

EIGHTH = NetConfig(width_scale=Fraction(1, 8))


@pytest.fixture(scope="module")
def small_net():
    net = MultiTaskNet(EIGHTH, seed=3)
    # give BN running stats something other than the identity
    rng = np.random.default_rng(0)
    net.grasp_forward(rng.random((4, 3, 64, 64)), training=True, rng=rng)
    return net


def images(n, seed=0):
    return np.random.default_rng(seed).random((n, 3, 64, 64))


def conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def test_geometry_table():
    c = NetConfig()
    assert c.trunk_sizes() == (20, 10, 6)
    assert c.push_conv_side == 2
    assert conv_out(64, 11, 3, 2) == 20 and conv_out(20, 11, 1, 0) == 10
    assert conv_out(10, 5, 1, 0) == 6 and conv_out(6, 5, 1, 0) == 2
    assert c.trunk_features == 6 * 6 * 128


def test_output_widths_fixed_under_scaling():
    for ws in (Fraction(1), Fraction(1, 4), Fraction(1, 8), Fraction(1, 100)):
        shapes = NetConfig(width_scale=ws).layer_shapes()
        assert shapes["grasp"]["gr_fc3.weight"][0] == 18
        assert shapes["push"]["pu_fc2.weight"][0] == 5
        assert shapes["poke"]["po_fc3.weight"][0] == 2
        for group in shapes.values():
            assert all(d >= 1 for shape in group.values() for d in shape)


def closed_form_total():
    conv = lambda k, c, kh, kw: k * c * kh * kw + k  # noqa: E731
    fc = lambda m, d: m * d + m  # noqa: E731
    trunk = conv(96, 3, 11, 11) + conv(256, 96, 11, 11) + conv(128, 256, 5, 5) + 2 * (96 + 256 + 128)
    grasp = fc(512, 4608) + fc(512, 512) + fc(18, 512)
    push = conv(128, 128, 5, 5) + fc(128, 2 * 2 * 2 * 128) + fc(5, 128)
    poke = fc(128, 4608) + fc(128, 128) + fc(2, 128)
    return trunk + grasp + push + poke


def test_parameter_count_audit_full_width():
    net = MultiTaskNet(NetConfig(), seed=0)
    audit = net.parameter_audit()
    for group, layer, actual, expected in audit:
        print(f"{group:5s} {layer:9s} {actual:9d} {expected:9d}")
        assert actual == expected, layer
    assert net.params.count() == sum(r[2] for r in audit) == closed_form_total() == 7_609_177


def test_groups_disjoint_and_cover(small_net):
    seen = {}
    for group, name, t in small_net.params.items():
        assert id(t) not in seen
        seen[id(t)] = group
    assert set(seen.values()) == set(GROUPS)


@pytest.mark.parametrize("n", [1, 3])
def test_output_shapes(small_net, n):
    x = images(n)
    assert small_net.grasp_forward(x).shape == (n, 18)
    assert small_net.push_forward(x, images(n, 1)).shape == (n, 5)
    assert small_net.poke_forward(x).shape == (n, 2)


def test_identical_rows_and_idempotence(small_net):
    x = images(1)
    batch = np.concatenate([x, x])
    for fwd in (small_net.grasp_forward, small_net.poke_forward):
        out = fwd(batch).data
        assert np.max(np.abs(out[0] - out[1])) <= 1e-12
        assert np.array_equal(fwd(batch).data, out)


def test_seeded_forward_is_bitwise_reproducible():
    x = images(2, 9)
    a = MultiTaskNet(EIGHTH, seed=11).grasp_forward(x).data
    b = MultiTaskNet(EIGHTH, seed=11).grasp_forward(x).data
    assert a.tobytes() == b.tobytes()
    c = MultiTaskNet(EIGHTH, seed=12).grasp_forward(x).data
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("shape,axis", [
    ((2, 3, 64), "rank"), ((2, 4, 64, 64), "channel axis (1)"),
    ((2, 3, 63, 64), "height axis (2)"), ((2, 3, 64, 65), "width axis (3)")])
def test_dimension_errors_name_the_axis(small_net, shape, axis):
    with pytest.raises(DimensionError, match=axis.replace("(", r"\(").replace(")", r"\)")):
        small_net.grasp_forward(np.zeros(shape))


def test_push_batch_mismatch(small_net):
    with pytest.raises(DimensionError, match="batch axis"):
        small_net.push_forward(images(2), images(3))


def test_updating_grasp_head_leaves_other_heads_bitwise_unchanged():
    net = MultiTaskNet(EIGHTH, seed=4)
    x, e = images(2, 1), images(2, 2)
    push0, poke0, grasp0 = net.push_forward(x, e).data, net.poke_forward(x).data, net.grasp_forward(x).data
    for p in net.params.grasp.values():
        p.data += 0.01
    assert not np.array_equal(net.grasp_forward(x).data, grasp0)
    assert np.array_equal(net.push_forward(x, e).data, push0)
    assert np.array_equal(net.poke_forward(x).data, poke0)


def test_trunk_perturbation_reaches_all_heads():
    net = MultiTaskNet(EIGHTH, seed=4)
    x, e = images(2, 1), images(2, 2)
    before = [net.grasp_forward(x).data, net.push_forward(x, e).data, net.poke_forward(x).data]
    net.params.trunk["conv3.weight"].data[0] += 0.05
    after = [net.grasp_forward(x).data, net.push_forward(x, e).data, net.poke_forward(x).data]
    for b, a in zip(before, after):
        assert not np.array_equal(a, b)


def _trunk_grad_from_push(net, begin, end, target):
    net.params.zero_grad()
    ad.backward(push_loss(net.push_forward(begin, end), target))
    return net.params.trunk["conv1.weight"].grad.copy()


def test_both_siamese_towers_feed_trunk_gradient():
    net = MultiTaskNet(EIGHTH, seed=5)
    b, e = images(2, 1), images(2, 2)
    target = np.random.default_rng(0).uniform(-1, 1, (2, 5))
    g_full = _trunk_grad_from_push(net, b, e, target)
    g_zero_end = _trunk_grad_from_push(net, b, np.zeros_like(e), target)
    g_zero_begin = _trunk_grad_from_push(net, np.zeros_like(b), e, target)
    assert not np.allclose(g_full, g_zero_end)
    assert not np.allclose(g_full, g_zero_begin)


def test_tower_assignment_probe():
    """With pu_fc1 reading only the first half of the concatenation, output depends on begin only."""
    net = MultiTaskNet(EIGHTH, seed=6)
    w = net.params.push["pu_fc1.weight"].data
    half = w.shape[1] // 2
    w[:, half:] = 0.0
    b, e = images(2, 1), images(2, 2)
    out = net.push_forward(b, e).data
    assert np.array_equal(net.push_forward(b, images(2, 3)).data, out)
    assert not np.array_equal(net.push_forward(images(2, 3), e).data, out)
    w[:, :half] = 0.0
    w[:, half:] = 1e-2
    out = net.push_forward(b, e).data
    assert np.array_equal(net.push_forward(images(2, 3), e).data, out)


def test_siamese_towers_share_trunk_tensors():
    net = MultiTaskNet(EIGHTH, seed=0)
    loss = push_loss(net.push_forward(images(2), images(2, 1)), np.zeros((2, 5)))
    leaves = [t for t in ad.Graph.from_output(loss).tensors if t.is_leaf and t.requires_grad]
    ids = [id(t) for t in leaves]
    assert len(ids) == len(set(ids))
    assert {id(t) for t in net.params.trunk.values()} <= set(ids)


def _head_losses(net, rng):
    x, x2 = rng.random((2, 3, 64, 64)), rng.random((2, 3, 64, 64))
    th, y = rng.integers(0, 18, 2), rng.integers(0, 2, 2)
    t5, t2 = rng.uniform(-1, 1, (2, 5)), rng.uniform(-1, 1, (2, 2))
    ds = int(rng.integers(1 << 30))
    return {
        "grasp": lambda: grasp_loss(net.grasp_forward(x, True, np.random.default_rng(ds)), th, y),
        "push": lambda: push_loss(net.push_forward(x, x2, True, np.random.default_rng(ds)), t5),
        "poke": lambda: poke_loss(net.poke_forward(x, True, np.random.default_rng(ds)), t2),
    }


@pytest.mark.parametrize("head", ["grasp", "push", "poke"])
def test_full_head_gradcheck_eighth_width(head):
    worst = 0.0
    for trial in range(20):
        rng = np.random.default_rng([trial, len(head)])
        net = MultiTaskNet(EIGHTH, seed=trial)
        params = dict(net.params.trunk)
        params.update(net.params.group(head))
        res = gradcheck(_head_losses(net, rng)[head], params, coords_per_tensor=4, rng=rng)
        worst = max(worst, res.max_error)
        assert res.ok(1e-4), (trial, res)
    print(f"{head}: worst relative error {worst:.3e}")

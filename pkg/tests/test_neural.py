import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smartsched import neural
from smartsched.neural import (
    MLP,
    ActorCritic,
    CheckpointMismatch,
    entropy,
    gradcheck_agent,
    policy_loss_grad,
    policy_one_pass,
    policy_scalable,
    relu,
    run_gradchecks,
    sample_action,
)


def zero_net(sizes):
    return MLP(sizes, weights=[np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
               biases=[np.zeros(b) for b in sizes[1:]])


# --- MLP ----------------------------------------------------------------------

def test_forward_examples():
    out, _ = zero_net([3, 5, 2]).forward(np.ones((1, 3)))
    np.testing.assert_array_equal(out, np.zeros((1, 2)))
    ident = MLP([3, 3], weights=[np.eye(3)], biases=[np.zeros(3)])
    x = np.array([[1.5, -2.0, 7.0]])
    np.testing.assert_array_equal(ident.forward(x)[0], x)
    np.testing.assert_array_equal(relu([-1.0, 2.0]), [0.0, 2.0])
    with pytest.raises(ValueError):
        ident.forward(np.ones((1, 4)))


def test_backward_examples(rng):
    net = MLP([4, 6, 3], rng)
    _, cache = net.forward(rng.normal(size=(5, 4)))
    for g in net.backward(cache, np.zeros((5, 3))):
        assert not g.any()
    # one linear layer, squared error: dL/dW = 2 (pred - y) x^T
    lin = MLP([3, 1], rng)
    x = np.array([[0.5, -1.0, 2.0]])
    y = 0.3
    pred, cache = lin.forward(x)
    gw, gb = lin.backward(cache, 2 * (pred - y))
    np.testing.assert_allclose(gw[:, 0], 2 * (pred[0, 0] - y) * x[0])
    np.testing.assert_allclose(gb, [2 * (pred[0, 0] - y)])


@pytest.mark.parametrize("arch", ["scalable", "one_pass"])
@pytest.mark.parametrize("k", [1, 3])
def test_gradcheck_both_architectures(arch, k):
    rng = np.random.default_rng(k)
    errs = gradcheck_agent(ActorCritic.build(arch, k, 8, rng), k, rng)
    assert errs["policy"] < 1e-4 and errs["value"] < 1e-4


def test_gradcheck_suite_passes():
    report = run_gradchecks(seed=1, ks=(2,), full_coords=10)
    assert report["passed"], report["max_rel_error"]


def test_gradcheck_catches_a_wrong_backward(monkeypatch):
    real = MLP.backward

    def off_by_a_bit(self, cache, dout):
        grads = real(self, cache, dout)
        grads[0] = grads[0] * 1.01
        return grads

    monkeypatch.setattr(MLP, "backward", off_by_a_bit)
    rng = np.random.default_rng(0)
    errs = gradcheck_agent(ActorCritic.build("scalable", 3, 6, rng), 3, rng)
    assert errs["policy"] > 1e-4 and errs["value"] > 1e-4


# --- policies -----------------------------------------------------------------

def test_one_pass_examples():
    k = 4
    net = zero_net([4 * k, 8, 8, k])
    s = np.random.default_rng(0).random((1, k, 4))
    out = policy_one_pass(net, s, np.ones((1, k), bool))
    np.testing.assert_allclose(out.probs, 0.25)
    out = policy_one_pass(net, s, np.array([[False, False, True, False]]))
    assert out.probs[0, 2] == 1.0
    # bias pushes the masked UE's raw logit to +10
    net.biases[-1][:] = [10.0, 0.0, 0.0, 0.0]
    out = policy_one_pass(net, s, np.array([[False, True, True, True]]))
    assert out.probs[0, 0] < 1e-6
    with pytest.raises(ValueError):
        policy_one_pass(net, np.zeros((1, 3, 4)), np.ones((1, 3), bool))


def test_scalable_examples(rng):
    net = MLP([4, 16, 16, 1], rng)
    same = np.tile(rng.random(4), (1, 5, 1))
    mask = np.array([[True, False, True, True, False]])
    out = policy_scalable(net, same, mask)
    np.testing.assert_allclose(out.probs[0, mask[0]], 1 / 3, atol=1e-12)
    big = rng.random((2, 50, 4))
    out = policy_scalable(net, big, np.ones((2, 50), bool))
    assert out.probs.shape == (2, 50)
    np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        policy_scalable(net, big[:1], np.zeros((1, 50), bool))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 9))
def test_scalable_equivariance_and_masking(seed, k):
    rng = np.random.default_rng(seed)
    agent = ActorCritic.build("scalable", k, 12, rng)
    s = rng.random((1, k, 4)) * 3
    mask = rng.random((1, k)) < 0.6
    mask[0, rng.integers(k)] = True
    perm = rng.permutation(k)
    a = agent.policy_forward(s, mask).probs[0]
    b = agent.policy_forward(s[:, perm], mask[:, perm]).probs[0]
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-15)
    assert a[~mask[0]].sum() <= 1e-6 * k
    assert abs(a.sum() - 1) <= 1e-12
    v1 = agent.value_forward(s)[0]
    v2 = agent.value_forward(s[:, perm])[0]
    np.testing.assert_allclose(v1, v2, rtol=1e-12)


def test_value_examples(rng):
    agent = ActorCritic.build("scalable", 3, 8, rng)
    x = rng.random(4)
    v_many = agent.value_forward(np.tile(x, (1, 6, 1)))[0]
    v_one = agent.value_forward(x[None, None, :])[0]
    np.testing.assert_allclose(v_many, v_one, rtol=1e-12)
    zero = ActorCritic("scalable", agent.policy, zero_net([4, 8, 8, 1]), None, 8)
    assert zero.value_forward(rng.random((2, 3, 4)))[0].tolist() == [0.0, 0.0]


def test_layer_widths():
    one = ActorCritic.build("one_pass", 5)
    assert one.policy.sizes == [20, 640, 640, 5] and one.value.sizes == [20, 640, 640, 1]
    sc = ActorCritic.build("scalable", 5)
    assert sc.policy.sizes == [4, 128, 128, 1] and sc.value.sizes == [4, 128, 128, 1]


# --- sampling / entropy -------------------------------------------------------

def test_sampling_examples(rng):
    assert set(sample_action(np.tile([1.0, 0.0, 0.0], (500, 1)), rng)) == {0}
    draws = sample_action(np.full((100_000, 4), 0.25), rng)
    freq = np.bincount(draws, minlength=4) / len(draws)
    assert np.all(np.abs(freq - 0.25) < 0.01)
    assert sample_action([0.2, 0.5, 0.3], greedy=True)[0] == 1


def test_entropy_examples():
    assert entropy([[0.25] * 4], [[True] * 4])[0] == pytest.approx(np.log(4), abs=1e-12)
    assert entropy([[0.0, 1.0, 0.0]], [[True] * 3])[0] == 0.0


@given(st.lists(st.floats(-20, 20), min_size=2, max_size=8), st.data())
def test_entropy_bounds(logits, data):
    k = len(logits)
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=k, max_size=k)))
    if not mask.any():
        mask[0] = True
    out = policy_scalable(MLP([4, 1], weights=[np.zeros((4, 1))], biases=[np.zeros(1)]),
                          np.zeros((1, k, 4)), mask[None])
    # swap in arbitrary logits through the softmax helper
    p, _ = neural.masked_softmax(np.array([logits]), mask[None])
    h = entropy(p, mask[None])[0]
    assert -1e-12 <= h <= np.log(mask.sum()) + 1e-9
    assert out.probs.shape == (1, k)


def test_zero_advantage_gradient_is_entropy_only(rng):
    agent = ActorCritic.build("scalable", 3, 6, rng)
    out = agent.policy_forward(rng.random((4, 3, 4)), np.ones((4, 3), bool))
    _, d0 = policy_loss_grad(out, [0, 1, 2, 0], np.zeros(4), 0.0)
    assert not d0.any()
    _, d1 = policy_loss_grad(out, [0, 1, 2, 0], np.zeros(4), 0.03)
    assert np.abs(d1).sum() > 0


def test_two_action_bandit_step_raises_good_action():
    rng = np.random.default_rng(0)
    agent = ActorCritic.build("scalable", 2, 8, rng)
    s = np.tile(rng.random((1, 2, 4)), (2, 1, 1))
    m = np.ones((2, 2), bool)
    before = agent.policy_forward(s[:1], m[:1]).probs[0, 0]
    out = agent.policy_forward(s, m)
    _, d = policy_loss_grad(out, [0, 1], [1.0, -1.0], 0.0)
    for p, g in zip(agent.policy.params, agent.policy_grads(out, d)):
        p -= 0.01 * g
    after = agent.policy_forward(s[:1], m[:1]).probs[0, 0]
    assert after > before


# --- checkpoints --------------------------------------------------------------

@pytest.mark.parametrize("arch", ["scalable", "one_pass"])
def test_checkpoint_roundtrip(tmp_path, arch, rng):
    agent = ActorCritic.build(arch, 3, 8, rng)
    path = tmp_path / "ck.json"
    agent.save(str(path))
    back = ActorCritic.load(str(path))
    for a, b in itertools.chain(zip(agent.policy.params, back.policy.params),
                                zip(agent.value.params, back.value.params)):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejections(tmp_path, rng):
    agent = ActorCritic.build("one_pass", 3, 8, rng)
    path = tmp_path / "ck.json"
    agent.save(str(path))
    with pytest.raises(CheckpointMismatch, match="K=3"):
        ActorCritic.load(str(path), num_ues=5)
    d = agent.to_dict()
    d["policy"]["layers"][0]["W"]["values"].pop()
    with pytest.raises(CheckpointMismatch):
        ActorCritic.from_dict(d)
    d = agent.to_dict()
    d["version"] = 99
    with pytest.raises(CheckpointMismatch):
        ActorCritic.from_dict(d)
    with pytest.raises(FileNotFoundError):
        ActorCritic.load(str(tmp_path / "nope.json"))
    # scalable checkpoints accept any K
    sc = ActorCritic.build("scalable", 3, 8, rng)
    sc.save(str(path))
    ActorCritic.load(str(path), num_ues=50)

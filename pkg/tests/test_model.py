import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftguard.model import PER_TASK, HeadPolicy, MissingHeadError, Network
from driftguard.tensor import DimensionError, Tensor


def test_zero_weights_give_zero_outputs(rng):
    net = Network(5, [4, 3], seed=0)
    net.set_flat_params(np.zeros(net.n_params))
    logits, emb = net.forward(rng.normal(size=(2, 5)))
    assert not logits.data.any() and not emb.data.any()


def test_shared_head_ignores_task(rng):
    net = Network(5, [4], HeadPolicy("shared", 3), seed=1)
    x = rng.normal(size=(6, 5))
    np.testing.assert_array_equal(net.forward(x, 0)[0].data, net.forward(x, 7)[0].data)


def test_embedding_shape_is_last_hidden_width(rng):
    net = Network(8, [16, 100], seed=2)
    assert net.forward(rng.normal(size=(3, 8)))[1].shape == (3, 100)
    assert Network(784, [400] * 4, seed=0).embedding_dim == 400


def test_per_task_heads_require_known_task(rng):
    net = Network(4, [3], HeadPolicy(PER_TASK, 2, 3), seed=0)
    net.forward(rng.normal(size=(1, 4)), 2)
    with pytest.raises(MissingHeadError):
        net.forward(rng.normal(size=(1, 4)), 3)


def test_parameter_count():
    assert Network(2, [3], HeadPolicy("shared", 1), seed=0).n_params == 13


def test_input_width_is_checked():
    with pytest.raises(DimensionError):
        Network(4, [3], seed=0).forward(np.zeros((2, 5)))


def test_set_flat_rejects_wrong_length():
    net = Network(2, [3], seed=0)
    with pytest.raises(DimensionError):
        net.set_flat_params(np.zeros(net.n_params + 1))


@settings(max_examples=25, deadline=None)
@given(dims=st.lists(st.integers(1, 6), min_size=1, max_size=4), heads=st.integers(1, 3), seed=st.integers(0, 999))
def test_flat_round_trip_is_identity(dims, heads, seed):
    policy = HeadPolicy(PER_TASK, 2, heads) if heads > 1 else HeadPolicy("shared", 2)
    net = Network(dims[0], dims[1:], policy, seed=seed)
    before = net.get_flat()
    net.set_flat_params(net.flat_params())
    assert net.get_flat().tobytes() == before.tobytes()


def test_flat_grads_follow_flat_param_order(rng):
    net = Network(3, [4], HeadPolicy(PER_TASK, 2, 2), seed=3)
    x = rng.normal(size=(5, 3))
    net.zero_grad()
    logits, _ = net.forward(x, 1)
    from driftguard.tensor import cross_entropy

    cross_entropy(logits, [0, 1, 1, 0, 1]).backward()
    flat = net.flat_grads()
    expected = np.concatenate([p.grad.reshape(-1) for p in net.params])
    np.testing.assert_array_equal(flat, expected)
    # the untouched head of task 0 received nothing
    assert not flat[net.head_slice(0)].any()
    assert flat[net.head_slice(1)].any()


def test_head_applied_to_embedding_reproduces_logits(rng):
    net = Network(6, [5, 4], HeadPolicy(PER_TASK, 3, 2), seed=4)
    x = rng.normal(size=(7, 6))
    logits, emb = net.forward(x, 1)
    w, b = net.head_params(1)
    np.testing.assert_allclose(emb.data @ w.data + b.data, logits.data, atol=1e-12)


def test_predict_matches_forward_exactly(rng):
    net = Network(6, [5, 4], seed=5)
    x = rng.normal(size=(7, 6))
    logits, emb = net.forward(x)
    p_logits, p_emb = net.predict(x)
    assert logits.data.tobytes() == p_logits.tobytes()
    assert emb.data.tobytes() == p_emb.tobytes()


def test_glorot_uniform_bounds():
    net = Network(30, [20], seed=0)
    w = net.params[0].data
    assert np.abs(w).max() <= np.sqrt(6.0 / 50)
    assert not net.params[1].data.any()


def test_checkpoint_round_trip(tmp_path):
    net = Network(4, [3, 2], HeadPolicy(PER_TASK, 2, 3), seed=9)
    net.save(tmp_path / "ckpt")
    raw = (tmp_path / "ckpt.bin").read_bytes()
    assert len(raw) == 8 * net.n_params
    assert np.frombuffer(raw, "<f8")[0] == net.get_flat()[0]
    loaded = Network.load(tmp_path / "ckpt")
    assert loaded.get_flat().tobytes() == net.get_flat().tobytes()
    assert loaded.heads == net.heads


def test_flat_params_is_differentiable():
    net = Network(2, [2], seed=0)
    theta = net.flat_params()
    from driftguard.tensor import sum as tsum

    net.zero_grad()
    tsum(theta * Tensor(np.arange(net.n_params, dtype=float))).backward()
    np.testing.assert_array_equal(net.grad_buffer, np.arange(net.n_params))

import numpy as np
import pytest

from rewardgaze import diffnum as dn
from rewardgaze import geometry, nets
from rewardgaze.diffnum import ShapeError, Tensor


def test_identity_and_bias_only_layers():
    p = nets.init_mlp(np.random.default_rng(0), [3, 3])
    p.weights[0].data = np.eye(3, dtype=np.float32)
    x = np.random.default_rng(1).normal(size=(4, 3)).astype(np.float32)
    np.testing.assert_array_equal(nets.mlp_forward(p, Tensor(x)).data, x)
    p.weights[0].data[:] = 0
    p.biases[0].data = np.array([1, -2, 3], np.float32)
    np.testing.assert_array_equal(nets.mlp_forward(p, Tensor(x)).data, np.tile([1, -2, 3], (4, 1)))


def test_mlp_width_mismatch():
    p = nets.init_mlp(np.random.default_rng(0), [3, 4, 2])
    with pytest.raises(ShapeError):
        nets.mlp_forward(p, Tensor(np.ones((2, 5))))


def test_glorot_init():
    rng_dims = [7, 5, 3]
    a = nets.init_params(1, rng_dims)
    b = nets.init_params(1, rng_dims)
    c = nets.init_params(2, rng_dims)
    assert a.digest() == b.digest() != c.digest()
    for w in a.weights:
        assert np.all(np.abs(w.data) <= dn.glorot_bound(*w.shape))
    assert all(np.all(bias.data == 0) for bias in a.biases)


def test_single_key_attention_ignores_query():
    rng = np.random.default_rng(3)
    p = nets.init_cross_attention(rng, 4, 5, 6)
    kv = Tensor(rng.normal(size=(1, 5)))
    out1 = nets.cross_attention(p, Tensor(rng.normal(size=(3, 4))), kv).data
    out2 = nets.cross_attention(p, Tensor(rng.normal(size=(3, 4))), kv).data
    expected = kv.data @ p.w_v.data @ p.w_o.data
    np.testing.assert_allclose(out1, np.tile(expected, (3, 1)), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(out1, out2, rtol=1e-6)


def test_duplicate_keys_match_single_key():
    rng = np.random.default_rng(4)
    p = nets.init_cross_attention(rng, 4, 5, 6)
    q = Tensor(rng.normal(size=(2, 4)))
    tok = rng.normal(size=(1, 5))
    one = nets.cross_attention(p, q, Tensor(tok)).data
    two = nets.cross_attention(p, q, Tensor(np.vstack([tok, tok]))).data
    np.testing.assert_allclose(one, two, rtol=1e-5, atol=1e-6)


def test_attention_output_in_convex_hull_of_values():
    rng = np.random.default_rng(5)
    p = nets.init_cross_attention(rng, 3, 3, 3)
    p.w_o.data = np.eye(3, dtype=np.float32)
    kv = rng.normal(size=(4, 3))
    out = nets.cross_attention(p, Tensor(rng.normal(size=(5, 3))), Tensor(kv)).data
    vals = kv.astype(np.float32) @ p.w_v.data
    # each output row is softmax-weighted: recover the weights by least squares and check they are a distribution
    for row in out:
        w, *_ = np.linalg.lstsq(np.vstack([vals.T, np.ones(4)]), np.append(row, 1.0), rcond=None)
        assert np.all(w > -1e-4)
        assert abs(w.sum() - 1) < 1e-4


def test_attention_rejects_empty_tokens():
    p = nets.init_cross_attention(np.random.default_rng(0), 3, 3, 3)
    with pytest.raises(ValueError):
        nets.cross_attention(p, Tensor(np.ones((2, 3))), Tensor(np.ones((0, 3))))


def test_estimator_zero_weights_and_batch_order():
    p = nets.init_estimator(0, 6)
    x = np.random.default_rng(6).normal(size=(5, 6)).astype(np.float32)
    pred = nets.predict(p, x)
    assert pred.shape == (5, 2)
    perm = np.array([3, 0, 4, 1, 2])
    # BLAS may block rows differently, so row order can move the last bit
    np.testing.assert_allclose(nets.predict(p, x[perm]), pred[perm], rtol=1e-5, atol=1e-6)
    for t in p.parameters():
        t.data[:] = 0
    np.testing.assert_array_equal(nets.predict(p, x), 0)
    with pytest.raises(ShapeError):
        nets.predict(p, np.ones((2, 7), np.float32))


def test_estimator_learns_noiseless_task():
    # oracle: a noiseless linear map of the direction vector is exactly learnable
    rng = np.random.default_rng(7)
    g = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-0.8, 0.8, 200)])
    x = (geometry.directions(g) @ rng.normal(size=(3, 12))).astype(np.float32)
    p = nets.init_estimator(0, 12)
    opt = dn.Adam(p.parameters(), lr=0.005)
    y = g.astype(np.float32)
    for _ in range(500):
        idx = rng.choice(200, 64, replace=False)
        with dn.Tape() as tape:
            res = dn.sub(nets.estimator_forward(p, Tensor(x[idx])), Tensor(y[idx]))
            loss = dn.mean(dn.l2_norm_rowwise(res))
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
    assert geometry.angular_errors(nets.predict(p, x), g).mean() < 5.0


def test_state_dict_round_trip_and_clone():
    p = nets.init_estimator(3, 8)
    q = nets.init_estimator(4, 8)
    q.load_state_dict(p.state_dict())
    assert q.digest() == p.digest()
    c = p.clone()
    c.parameters()[0].data[0, 0] += 1
    assert c.digest() != p.digest()
    with pytest.raises(KeyError):
        q.load_state_dict({"encoder.w0": p.state_dict()["encoder.w0"]})

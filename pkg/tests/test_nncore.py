import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmae_ids import nncore as nn
from cmae_ids.errors import ConfigError, GraphError, ShapeError

F64 = np.float64


def T(a, grad=True):
    return nn.Tensor(np.array(a, dtype=F64), requires_grad=grad)


def grad_check(op, arrays, seed=0, tol=1e-4, exact_zero=()):
    """Analytic gradient of sum(op(...) * R) against central differences.

    Inputs listed in ``exact_zero`` have an identically zero true gradient;
    there the relative error is meaningless and an absolute bound is used.
    """
    rng = np.random.default_rng(seed)
    with nn.no_grad():
        out = op(*[T(a, False) for a in arrays])
    R = rng.normal(size=out.shape)

    def f():
        with nn.no_grad():
            return float((op(*[T(a, False) for a in arrays]).data * R).sum())

    ts = [T(a) for a in arrays]
    loss = nn.tsum(nn.mul(op(*ts), nn.Tensor(R)))
    loss.backward()
    numeric = nn.numerical_grad(f, arrays)
    for i, (t, g) in enumerate(zip(ts, numeric)):
        if i in exact_zero:
            assert np.abs(t.grad).max() < 1e-12 and np.abs(g).max() < 1e-9
        else:
            assert nn.max_relative_error(t.grad, g) < tol


def rnd(*shape, seed=0):
    return np.random.default_rng(seed).normal(size=shape)


@pytest.mark.parametrize("name,op,shapes", [
    ("add", nn.add, [(3, 4), (4,)]),
    ("mul", nn.mul, [(3, 4), (3, 1)]),
    ("matmul", nn.matmul, [(2, 3, 4), (2, 4, 5)]),
    ("gelu", nn.gelu, [(4, 5)]),
    ("sigmoid", nn.sigmoid, [(4, 5)]),
    ("softmax", nn.softmax, [(3, 7)]),
    ("tanh-free scale", lambda a: nn.scale(a, 0.37), [(3, 3)]),
    ("mean", lambda a: nn.mean(a), [(3, 5)]),
    ("transpose", lambda a: nn.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    ("reshape", lambda a: nn.reshape(a, (6, 2)), [(3, 4)]),
    ("concat", lambda a, b: nn.concat([a, b], axis=-1), [(2, 3), (2, 4)]),
    ("average", lambda a, b, c: nn.average([a, b, c]), [(2, 3), (2, 3), (2, 3)]),
    ("dense", nn.dense, [(2, 5, 3), (3, 4), (4,)]),
    ("conv1d k3", nn.conv1d, [(2, 7, 3), (3, 3, 4), (4,)]),
    ("conv1d k4", nn.conv1d, [(2, 7, 3), (4, 3, 2), (2,)]),
    ("conv1d k5", nn.conv1d, [(1, 6, 2), (5, 2, 3), (3,)]),
    ("layer_norm", nn.layer_norm, [(2, 3, 6), (6,), (6,)]),
    ("maxpool1d", nn.maxpool1d, [(2, 7, 3)]),
    ("global_maxpool1d", nn.global_maxpool1d, [(2, 5, 3)]),
])
def test_op_gradients(name, op, shapes):
    grad_check(op, [rnd(*s, seed=i + 1) for i, s in enumerate(shapes)])


def test_attention_gradient():
    d = 4
    keys = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
    shapes = [(d, d) if k.startswith("w") else (d,) for k in keys]

    def op(x, *ps):
        return nn.multi_head_attention(x, dict(zip(keys, ps)), heads=2)

    # the key bias shifts every score in a row equally, which softmax ignores
    grad_check(op, [rnd(2, 3, d, seed=9)] + [rnd(*s, seed=20 + i) * 0.5 for i, s in enumerate(shapes)],
               exact_zero=(1 + keys.index("bk"),))


def test_embedding_and_cross_entropy_gradients():
    ids = np.array([[0, 2, 2, 4], [1, 1, 3, 0]])
    grad_check(lambda w: nn.embedding(w, ids), [rnd(5, 3)])
    labels = np.array([2, 0, 6])
    x = rnd(3, 7)
    w = T(x)
    loss = nn.cross_entropy(nn.softmax(w), labels)
    loss.backward()

    def f():
        p = np.exp(x - x.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        return float(-np.log(p[np.arange(3), labels]).mean())

    assert nn.max_relative_error(w.grad, nn.numerical_grad(f, [x])[0]) < 1e-4


def test_dropout_gradient_with_fixed_mask():
    grad_check(lambda a: nn.dropout(a, 0.25, True, rng=7), [rnd(4, 6)])


def test_conv1d_hand_example():
    x = nn.Tensor(np.array([0, 0, 1, 0, 0], F64).reshape(1, 5, 1))
    w = nn.Tensor(np.array([1, 2, 3], F64).reshape(3, 1, 1))
    assert nn.conv1d(x, w).data.ravel().tolist() == [0, 3, 2, 1, 0]


def test_conv1d_identity_and_same_length():
    x = rnd(2, 9, 3)
    w = np.eye(3).reshape(1, 3, 3)
    out = nn.conv1d(nn.Tensor(x), nn.Tensor(w), nn.Tensor(np.zeros(3)))
    assert np.allclose(out.data, x)
    for k in (1, 3, 5, 7):
        assert nn.conv1d(nn.Tensor(x), nn.Tensor(rnd(k, 3, 2))).shape == (2, 9, 2)
    with pytest.raises(ShapeError):
        nn.conv1d(nn.Tensor(x), nn.Tensor(rnd(3, 4, 2)))


def test_maxpool_examples():
    x = nn.Tensor(np.array([1, 3, 2, 2], F64).reshape(1, 4, 1))
    assert nn.maxpool1d(x).data.ravel().tolist() == [3, 2]
    odd = nn.maxpool1d(nn.Tensor(np.arange(5, dtype=F64).reshape(1, 5, 1)))
    assert odd.data.ravel().tolist() == [1, 3]
    c = T(np.ones((1, 4, 1)))
    nn.tsum(nn.maxpool1d(c)).backward()
    assert c.grad.ravel().tolist() == [1, 0, 1, 0]
    with pytest.raises(ShapeError):
        nn.maxpool1d(nn.Tensor(np.ones((1, 1, 2))))


def test_softmax_and_layer_norm_stats():
    s = nn.softmax(nn.Tensor(rnd(5, 7) * 30)).data
    assert np.allclose(s.sum(-1), 1, atol=1e-6) and (s >= 0).all()
    x = nn.layer_norm(nn.Tensor(rnd(4, 16) * 5 + 3), nn.Tensor(np.ones(16)), nn.Tensor(np.zeros(16))).data
    assert np.allclose(x.mean(-1), 0, atol=1e-6) and np.allclose(x.var(-1), 1, atol=1e-3)


def test_gelu_formula():
    x = np.linspace(-4, 4, 41)
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    assert np.allclose(nn.gelu(nn.Tensor(x)).data, ref, atol=1e-12)


def test_positional_encoding_formula():
    pe = nn.positional_encoding(6, 8, dtype=F64)
    t, i = 5, 3
    assert pe[t, 2 * i] == pytest.approx(math.sin(t / 10000 ** (2 * i / 8)))
    assert pe[t, 2 * i + 1] == pytest.approx(math.cos(t / 10000 ** (2 * i / 8)))


def _naive_attention(x, p, heads):
    B, L, D = x.shape
    dk = D // heads
    out = np.zeros_like(x)
    for b in range(B):
        q, k, v = x[b] @ p["wq"] + p["bq"], x[b] @ p["wk"] + p["bk"], x[b] @ p["wv"] + p["bv"]
        ctx = np.zeros((L, D))
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            for i in range(L):
                scores = np.array([q[i, sl] @ k[j, sl] / math.sqrt(dk) for j in range(L)])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(L))
        out[b] = ctx @ p["wo"] + p["bo"]
    return out


def test_attention_against_naive_oracle():
    rng = np.random.default_rng(3)
    p = {k: rng.normal(size=(4, 4) if k[0] == "w" else (4,)) for k in
         ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    x = rng.normal(size=(2, 3, 4))
    got, weights = nn.multi_head_attention(nn.Tensor(x), {k: nn.Tensor(v) for k, v in p.items()}, 2,
                                           return_weights=True)
    assert np.max(np.abs(got.data - _naive_attention(x, p, 2))) < 1e-6
    assert np.allclose(weights.sum(-1), 1, atol=1e-6)


def test_attention_trivial_cases():
    rng = np.random.default_rng(4)
    p = {k: nn.Tensor(rng.normal(size=(4, 4)) if k[0] == "w" else np.zeros(4)) for k in
         ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    x = rng.normal(size=(1, 1, 4))
    out, w = nn.multi_head_attention(nn.Tensor(x), p, 2, return_weights=True)
    assert np.allclose(w, 1.0)
    assert np.allclose(out.data, x @ p["wv"].data @ p["wo"].data)
    zero = nn.multi_head_attention(nn.Tensor(np.zeros((1, 3, 4))), p, 2)
    assert np.all(zero.data == 0)
    with pytest.raises(ConfigError):
        nn.multi_head_attention(nn.Tensor(np.zeros((1, 3, 4))), p, 3)


def test_dropout_semantics():
    x = nn.Tensor(np.ones((200, 200)))
    assert nn.dropout(x, 0.25, training=False) is x
    y = nn.dropout(x, 0.25, True, rng=0).data
    kept = y != 0
    assert abs(kept.mean() - 0.75) < 0.01
    assert np.allclose(y[kept], 1 / 0.75)


def test_backward_rules():
    a = T(rnd(3))
    loss = nn.tsum(nn.mul(a, a))
    loss.backward()
    assert np.allclose(a.grad, 2 * a.data)
    with pytest.raises(GraphError):
        loss.backward()
    with pytest.raises(ShapeError):
        nn.mul(T(rnd(3)), 2.0).backward()


def test_shared_subexpression_accumulates():
    a = T(np.array([1.5, -2.0]))
    b = nn.add(a, a)
    nn.tsum(nn.mul(b, a)).backward()  # d/da sum(2a^2) = 4a
    assert np.allclose(a.grad, 4 * a.data)


def test_cross_entropy_clamp():
    p = nn.Tensor(np.array([[1.0, 0.0]]), requires_grad=True)
    loss = nn.cross_entropy(p, [1])
    assert loss.item() == pytest.approx(-math.log(1e-12))


@given(st.integers(1, 4), st.integers(2, 9), st.integers(1, 3))
def test_graph_determinism(b, l, c):
    x = np.random.default_rng(b * 100 + l).normal(size=(b, l, c)).astype(np.float32)
    w = np.random.default_rng(7).normal(size=(3, c, 2)).astype(np.float32)

    def run():
        return nn.global_maxpool1d(nn.gelu(nn.conv1d(nn.Tensor(x), nn.Tensor(w)))).data

    assert np.array_equal(run(), run())

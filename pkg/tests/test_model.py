import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmae_ids import model as M
from cmae_ids import nncore as nn
from cmae_ids.embed import EmbeddingMatrix, xavier_init
from cmae_ids.errors import ConfigError

TINY = M.CmaeConfig(max_len=12, vocab_size=17, embedding_dim=8, d_model=8, heads=2, cab_filters=(8, 8),
                    mkb_filters=4, attn_ffn_hidden=8, mkb_ffn_hidden=8, dropout=0.0)


def small(**kw):
    base = dict(max_len=32, vocab_size=257, embedding_dim=8, d_model=8, heads=2, cab_filters=(8, 8),
                mkb_filters=8, attn_ffn_hidden=16, mkb_ffn_hidden=16)
    base.update(kw)
    return M.CmaeConfig(**base)


def test_parameter_totals():
    assert M.count_parameters_for_config(M.xavier_cmae_config()) == (410_823, 0, 410_823)
    emb = sum(n for name, n in M.parameter_breakdown(M.xavier_cmae_config()).items() if name.startswith("emb"))
    assert emb == 3 * 257 * 64 == 49_344
    t, f, total = M.count_parameters_for_config(M.llm_hex2tok_config(frozen=True))
    assert (t, f, total) == (9_651_207, 3_158_016, 12_809_223)
    assert f == 3 * 257 * 4096


def test_count_parameters_on_built_model():
    m = M.build_model(M.xavier_cmae_config())
    assert M.count_parameters(m) == (410_823, 0, 410_823)


def test_removing_kernel_branch_arithmetic():
    full = M.count_parameters_for_config(M.xavier_cmae_config())[2]
    two = M.count_parameters_for_config(M.xavier_cmae_config(mkb_kernels=(3, 4)))[2]
    k, emb, filters, hidden = 5, 64, 128, 208 - 48  # mkb hidden is 160
    assert full - two == k * emb * filters + filters + filters * hidden


def test_initialization_rules():
    m = M.build_model(small(), seed=3)
    for name, p in m.params.items():
        if name.endswith(".gain"):
            assert np.all(p.data == 1)
        elif p.ndim == 1:
            assert np.all(p.data == 0)
    w = m["cab1.ffn1.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / sum(w.shape))
    m2 = M.build_model(small(), seed=3)
    assert all(np.array_equal(a, b) for a, b in zip(m.state().values(), m2.state().values()))


def test_embedding_shape_errors():
    cfg = small()
    e = xavier_init(257, 8)
    with pytest.raises(ConfigError):
        M.build_model(cfg, [e, e, xavier_init(257, 9)])
    with pytest.raises(ConfigError):
        M.build_model(cfg, [xavier_init(100, 8)] * 3)
    with pytest.raises(ConfigError):
        M.build_model(small(d_model=9, cab_filters=(8, 9)))


@pytest.mark.parametrize("length", [1, 2, 3, 4, 5, 33])
@pytest.mark.parametrize("batch", [1, 8])
def test_output_shapes(length, batch):
    m = M.build_model(small())
    ids = np.random.default_rng(0).integers(0, 257, (batch, length))
    probs = M.forward(m, ids).data
    assert probs.shape == (batch, 7)
    assert np.allclose(probs.sum(1), 1, atol=1e-6) and (probs >= 0).all() and (probs <= 1).all()
    x = M._pad_min(ids, 0)
    assert M.cab_forward(m, "cab1", "emb1.weight", x).shape == (batch, 8)
    assert M.mkb_forward(m, "emb3.weight", x).shape == (batch, 8)


def test_long_inputs_and_attention_width(monkeypatch):
    m = M.build_model(small())
    seen = []
    real = nn.multi_head_attention

    def spy(x, params, heads, return_weights=False):
        seen.append(x.shape[1])
        return real(x, params, heads, return_weights)

    monkeypatch.setattr(nn, "multi_head_attention", spy)
    ids = np.random.default_rng(1).integers(0, 257, (1, 1500))
    assert M.forward(m, ids).shape == (1, 7)
    assert seen == [375, 375]
    assert M.forward(m, np.random.default_rng(2).integers(0, 257, (1, 3000))).shape == (1, 7)


def test_batch_64_shape():
    m = M.build_model(small())
    assert M.forward(m, np.zeros((64, 16), dtype=np.int64)).shape == (64, 7)


def test_all_pad_is_constant():
    m = M.build_model(small())
    out = M.forward(m, np.zeros((3, 20), dtype=np.int64)).data
    assert np.allclose(out, out[0])


def test_inference_determinism_and_permutation():
    m = M.build_model(small())
    ids = np.random.default_rng(5).integers(0, 257, (6, 24))
    a = M.forward(m, ids).data
    assert np.array_equal(a, M.forward(m, ids).data)
    perm = np.array([3, 0, 5, 1, 4, 2])
    assert np.allclose(M.forward(m, ids[perm]).data, a[perm], atol=1e-6)


def test_ensemble_contracts():
    m = M.build_model(small())
    v = nn.Tensor(np.random.default_rng(0).normal(size=(2, 8)).astype(np.float32))
    assert np.allclose(nn.average([v, v, v]).data, v.data)
    m["ensemble.gate.weight"].data[...] = 0
    probs = M.ensemble_forward(m, v, v, v).data
    W, b = m["ensemble.out.weight"].data, m["ensemble.out.bias"].data
    logits = (v.data / 2) @ W + b
    ref = np.exp(logits - logits.max(1, keepdims=True))
    assert np.allclose(probs, ref / ref.sum(1, keepdims=True), atol=1e-6)


def test_argmax_invariant_to_logit_shift():
    m = M.build_model(small())
    ids = np.random.default_rng(7).integers(0, 257, (5, 16))
    before = M.forward(m, ids).data.argmax(1)
    m["ensemble.out.bias"].data += 3.5
    assert np.array_equal(M.forward(m, ids).data.argmax(1), before)


def test_frozen_embeddings_have_no_gradient():
    cfg = small(embeddings_frozen=True)
    m = M.build_model(cfg)
    assert not m["emb1.weight"].trainable and m["emb1.weight"].grad is None
    ids = np.random.default_rng(0).integers(0, 257, (2, 10))
    nn.cross_entropy(M.forward(m, ids), [0, 1]).backward()
    assert m["emb1.weight"].grad is None and m["cab1.conv1.weight"].grad is not None


def test_end_to_end_gradient_check():
    m = M.build_model(TINY, seed=1, dtype=np.float64)
    rng = np.random.default_rng(2)
    ids = rng.integers(0, 17, (2, 12))
    labels = np.array([3, 5])
    names = list(m.params)
    m.zero_grad()
    nn.cross_entropy(M.forward(m, ids), labels).backward()
    analytic = [m[n].grad.copy() for n in names]

    def f():
        with nn.no_grad():
            return float(nn.cross_entropy(M.forward(m, ids), labels).data)

    numeric = nn.numerical_grad(f, [m[n].data for n in names])
    worst = max(nn.max_relative_error(a, g) for a, g in zip(analytic, numeric))
    assert worst < 1e-3


@settings(max_examples=10)
@given(st.sampled_from([4, 5, 12, 40]), st.sampled_from([1, 3]))
def test_shape_property(length, batch):
    m = M.build_model(small())
    ids = np.random.default_rng(length).integers(0, 257, (batch, length))
    assert M.forward(m, ids).shape == (batch, 7)


def test_config_round_trip():
    cfg = M.desk_config()
    assert M.CmaeConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        M.CmaeConfig.from_dict({"nonsense": 1})

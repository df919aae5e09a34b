import numpy as np
import pytest

from msct.attention import (
    AttentionConfig, AttentionWeights, attention_map, dca, differential_attention, mha_cross,
    mha_self, mssa, split_heads,
)
from msct.autograd import ShapeError, Tensor
from msct.gradcheck import grad_check


# independent numpy reference: explicit loops over batch and heads

def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _proj(x, w, role):
    return x @ w.weights[role].data + w.biases[role].data


def _conv_same(plane, ker):
    k = ker.shape[0]
    r = k // 2
    pad = np.pad(plane, r)
    out = np.zeros_like(plane)
    for i in range(plane.shape[0]):
        for j in range(plane.shape[1]):
            out[i, j] = np.sum(pad[i:i + k, j:j + k] * ker)
    return out


def ref_attention(x_q, x_kv, w, cfg, kernels=None, q_cross_from=None):
    B, S, C = x_q.shape
    d = cfg.head_dim
    out = np.zeros((B, S, C))
    for b in range(B):
        q = _proj(x_q[b], w, "q")
        k = _proj(x_kv[b], w, "k")
        v = _proj(x_kv[b], w, "v")
        heads = []
        for hd in range(cfg.h):
            sl = slice(hd * d, (hd + 1) * d)
            kh = k[:, sl]
            if kernels is not None:
                group = cfg.h // len(kernels)
                kh = _conv_same(kh, kernels[hd // group][hd % group])
            attn = _softmax(q[:, sl] @ kh.T / np.sqrt(d))
            if q_cross_from is not None:
                qc = _proj(q_cross_from[b], w, "q_cross")
                attn = attn - _softmax(qc[:, sl] @ kh.T / np.sqrt(d))
            heads.append(attn @ v[:, sl])
        out[b] = np.concatenate(heads, axis=1) @ w.weights["o"].data + w.biases["o"].data
    return out


def _weights(kind, cfg, rng, std=0.3):
    w = AttentionWeights.init(kind, cfg, rng, std=std, kernel_noise=0.3)
    for b in w.biases.values():
        b.data = rng.normal(0.0, 0.1, b.shape)
    return w


CFG8 = AttentionConfig(C=8, h=2)
CFG16 = AttentionConfig(C=16, h=4)


def test_mha_self_matches_loop(rng):
    x = rng.normal(size=(1, 3, 8))
    w = _weights("sa", CFG8, rng)
    np.testing.assert_allclose(mha_self(Tensor(x), w, CFG8).data, ref_attention(x, x, w, CFG8), atol=1e-10)


def test_mha_cross_matches_loop(rng):
    x_q, x_kv = rng.normal(size=(2, 5, 16)), rng.normal(size=(2, 5, 16))
    w = _weights("ca", CFG16, rng)
    np.testing.assert_allclose(mha_cross(Tensor(x_q), Tensor(x_kv), w, CFG16).data,
                               ref_attention(x_q, x_kv, w, CFG16), atol=1e-10)


def test_mssa_matches_loop(rng):
    x = rng.normal(size=(2, 6, 16))
    w = _weights("mssa", CFG16, rng)
    kernels = [k.data for k in w.kernels]
    np.testing.assert_allclose(mssa(Tensor(x), w, CFG16).data,
                               ref_attention(x, x, w, CFG16, kernels=kernels), atol=1e-10)


def test_dca_matches_loop(rng):
    x_a, x_b = rng.normal(size=(2, 5, 16)), rng.normal(size=(2, 5, 16))
    w = _weights("dca", CFG16, rng)
    np.testing.assert_allclose(dca(Tensor(x_a), Tensor(x_b), w, CFG16).data,
                               ref_attention(x_a, x_a, w, CFG16, q_cross_from=x_b), atol=1e-10)


def test_single_token_is_value_projection(rng):
    x = rng.normal(size=(2, 1, 8))
    w = _weights("sa", CFG8, rng)
    expected = _proj(_proj(x, w, "v"), w, "o")
    np.testing.assert_allclose(mha_self(Tensor(x), w, CFG8).data, expected, atol=1e-12)


def test_identical_tokens_give_identical_rows(rng):
    x = np.repeat(rng.normal(size=(1, 1, 8)), 4, axis=1)
    out = mha_self(Tensor(x), _weights("sa", CFG8, rng), CFG8).data
    np.testing.assert_allclose(out, np.repeat(out[:, :1], 4, axis=1), atol=1e-14)


def test_mha_self_is_permutation_equivariant(rng):
    x = rng.normal(size=(1, 5, 16))
    w = _weights("sa", CFG16, rng)
    perm = rng.permutation(5)
    np.testing.assert_allclose(mha_self(Tensor(x[:, perm]), w, CFG16).data,
                               mha_self(Tensor(x), w, CFG16).data[:, perm], atol=1e-12)


def test_cross_with_identical_inputs_is_self(rng):
    x = rng.normal(size=(2, 4, 16))
    w = _weights("sa", CFG16, rng)
    np.testing.assert_allclose(mha_cross(Tensor(x), Tensor(x), w, CFG16).data,
                               mha_self(Tensor(x), w, CFG16).data, atol=1e-12)


def test_cross_with_constant_kv_ignores_attention_values(rng):
    x_q = rng.normal(size=(1, 4, 8))
    x_kv = np.repeat(rng.normal(size=(1, 1, 8)), 4, axis=1)
    w = _weights("ca", CFG8, rng)
    out = mha_cross(Tensor(x_q), Tensor(x_kv), w, CFG8).data
    expected = _proj(_proj(x_kv, w, "v"), w, "o")
    np.testing.assert_allclose(out, expected, atol=1e-12)


def _delta_kernels(w):
    for k in w.kernels:
        size = k.shape[-1]
        ker = np.zeros(k.shape)
        ker[:, size // 2, size // 2] = 1.0
        k.data = ker


def test_mssa_with_delta_kernels_is_self_attention(rng):
    x = rng.normal(size=(2, 8, 16))
    w = _weights("mssa", CFG16, rng)
    _delta_kernels(w)
    out = mssa(Tensor(x), w, CFG16).data
    ref = mha_self(Tensor(x), w, CFG16).data
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_attention_rows_are_stochastic(rng):
    x = Tensor(rng.normal(size=(2, 7, 16)))
    w = _weights("sa", CFG16, rng)
    q = split_heads(x @ w.weights["q"], CFG16.h)
    k = split_heads(x @ w.weights["k"], CFG16.h)
    np.testing.assert_allclose(attention_map(q, k, CFG16).data.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_differential_rows_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    x_a, x_b = rng.normal(size=(2, 6, 16)), rng.normal(size=(2, 6, 16)) * 3
    diff, _ = differential_attention(Tensor(x_a), Tensor(x_b), _weights("dca", CFG16, rng), CFG16)
    assert np.max(np.abs(diff.data.sum(axis=-1))) <= 1e-12


def test_dca_vanishes_with_tied_queries(rng):
    x = rng.normal(size=(2, 6, 16))
    w = _weights("dca", CFG16, rng, std=1.0)
    w.weights["q_cross"] = w.weights["q"]
    w.biases["q_cross"] = w.biases["q"]
    w.biases["o"].data = np.zeros(16)
    out = dca(Tensor(x), Tensor(x), w, CFG16).data
    assert np.max(np.abs(out)) <= 1e-10


def test_shape_errors(rng):
    w = _weights("sa", CFG16, rng)
    with pytest.raises(ShapeError):
        mha_self(Tensor(rng.normal(size=(1, 4, 8))), w, CFG16)
    with pytest.raises(ShapeError):
        dca(Tensor(rng.normal(size=(1, 4, 16))), Tensor(rng.normal(size=(1, 5, 16))),
            _weights("dca", CFG16, rng), CFG16)


def test_config_validation():
    with pytest.raises(ValueError):
        AttentionConfig(C=10, h=4)
    with pytest.raises(ValueError):
        AttentionConfig(C=16, h=4, scales=(1, 2, 5, 7))


def test_mssa_needs_head_count_divisible_by_scales(rng):
    cfg = AttentionConfig(C=12, h=6)
    with pytest.raises(ValueError):
        AttentionWeights.init("mssa", cfg, rng)


def test_named_round_trip(rng):
    w = _weights("mssa", CFG16, rng)
    named = w.named("blk.")
    back = AttentionWeights.from_named(named, "blk.")
    assert back.weights.keys() == w.weights.keys()
    assert [k is k2 for k, k2 in zip(back.kernels, w.kernels)] == [True] * 4


@pytest.mark.parametrize("kind", ["sa", "ca", "mssa", "dca"])
def test_layer_gradients(kind, rng):
    w = _weights(kind, CFG16, rng)
    x = Tensor(rng.normal(size=(1, 4, 16)), requires_grad=True)
    x_b = Tensor(rng.normal(size=(1, 4, 16)), requires_grad=True)
    proj = rng.normal(size=(1, 4, 16))
    op = {"sa": lambda: mha_self(x, w, CFG16), "mssa": lambda: mssa(x, w, CFG16),
          "ca": lambda: mha_cross(x, x_b, w, CFG16), "dca": lambda: dca(x, x_b, w, CFG16)}[kind]
    params = {"x": x, "x_b": x_b, **w.named()} if kind in ("ca", "dca") else {"x": x, **w.named()}
    report = grad_check(lambda: (op() * proj).sum(), params, max_components=12)
    assert report.passed(1e-4), report.worst

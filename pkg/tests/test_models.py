import math

import numpy as np
import pytest

from tokenattack.errors import ContractError, ShapeError
from tokenattack.models import (
    AttentionParams,
    Classifier,
    ModelSpec,
    build_model,
    default_spec,
    mixer_block,
    multi_head_attention,
    parameter_shapes,
    patch_embed,
    residual_block,
    self_attention_block,
)
from tokenattack.tensor import Tensor, backward, tsum

from conftest import SMALL_SPECS


def T(a):
    return Tensor(a, dtype=np.float64)


def gelu_np(v):
    return 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3)))


def ln_np(v, g, b, eps=1e-5):
    mu = v.mean(-1, keepdims=True)
    var = ((v - mu) ** 2).mean(-1, keepdims=True)
    return (v - mu) / np.sqrt(var + eps) * g + b


# ------------------------------------------------------------ patch embed


def test_single_patch_token(rng):
    img = rng.normal(size=(1, 4, 4))
    e = rng.normal(size=(16, 5))
    pos = rng.normal(size=(1, 5))
    out = patch_embed(T(img), 4, T(e), pos=T(pos)).data
    np.testing.assert_allclose(out, img.reshape(1, 16) @ e + pos)


def test_raster_order_q2():
    img = np.arange(16.0).reshape(1, 4, 4)
    out = patch_embed(T(img), 2, T(np.eye(4))).data
    assert out.shape == (4, 4)
    np.testing.assert_array_equal(out[0], [img[0, 0, 0], img[0, 0, 1], img[0, 1, 0], img[0, 1, 1]])
    np.testing.assert_array_equal(out[1], [img[0, 0, 2], img[0, 0, 3], img[0, 1, 2], img[0, 1, 3]])


def test_identity_embed_channel_minor(rng):
    img = rng.normal(size=(3, 8, 8))
    out = patch_embed(T(img), 4, T(np.eye(48))).data
    for t in range(4):
        r, c = divmod(t, 2)
        ref = [img[ch, r * 4 + y, c * 4 + x] for y in range(4) for x in range(4) for ch in range(3)]
        np.testing.assert_array_equal(out[t], ref)


def test_patch_embed_rejects_bad_side():
    with pytest.raises(ShapeError):
        patch_embed(T(np.zeros((1, 6, 6))), 4, T(np.zeros((16, 2))))


# -------------------------------------------------------------- attention


def attention_oracle(x, wq, wk, wv):
    n, d = x.shape
    dh = wq.shape[1]
    q = [[sum(x[i, a] * wq[a, j] for a in range(d)) for j in range(dh)] for i in range(n)]
    k = [[sum(x[i, a] * wk[a, j] for a in range(d)) for j in range(dh)] for i in range(n)]
    v = [[sum(x[i, a] * wv[a, j] for a in range(d)) for j in range(dh)] for i in range(n)]
    out = np.zeros((n, dh))
    for i in range(n):
        s = [sum(q[i][c] * k[j][c] for c in range(dh)) / math.sqrt(dh) for j in range(n)]
        mx = max(s)
        e = [math.exp(t - mx) for t in s]
        z = sum(e)
        for c in range(dh):
            out[i, c] = sum(e[j] / z * v[j][c] for j in range(n))
    return out


def test_single_head_attention_matches_scalar_loop(rng):
    x = rng.normal(size=(3, 4))
    ws = [rng.normal(size=(4, 4)) for _ in range(3)]
    out = multi_head_attention(T(x), AttentionParams(*map(T, ws))).data
    np.testing.assert_allclose(out, attention_oracle(x, *ws), atol=1e-5)


def test_single_token_attention_ignores_query(rng):
    x = rng.normal(size=(1, 4))
    wv, wo = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    a = multi_head_attention(T(x), AttentionParams(T(rng.normal(size=(4, 4))), T(rng.normal(size=(4, 4))), T(wv), T(wo), num_heads=2))
    np.testing.assert_allclose(a.data, x @ wv @ wo, atol=1e-12)


def _block_params(rng, d, prefix="b."):
    p = {}
    for nm in ("q", "k", "v", "o"):
        p[prefix + f"attn.w_{nm}"] = rng.normal(size=(d, d))
        p[prefix + f"attn.b_{nm}"] = rng.normal(size=d)
    for ln in ("ln1", "ln2"):
        p[prefix + f"{ln}.gamma"] = rng.normal(size=d)
        p[prefix + f"{ln}.beta"] = rng.normal(size=d)
    p[prefix + "mlp.w1"] = rng.normal(size=(d, 2 * d))
    p[prefix + "mlp.b1"] = rng.normal(size=2 * d)
    p[prefix + "mlp.w2"] = rng.normal(size=(2 * d, d))
    p[prefix + "mlp.b2"] = rng.normal(size=d)
    return p


def test_zero_value_matrix_leaves_mlp_path(rng):
    d = 4
    p = _block_params(rng, d)
    p["b.attn.w_v"] = np.zeros((d, d))
    p["b.attn.b_v"] = np.zeros(d)
    p["b.attn.b_o"] = np.zeros(d)
    x = rng.normal(size=(3, d))
    out = self_attention_block(T(x), {k: T(v) for k, v in p.items()}, "b.", num_heads=2).data
    h = ln_np(x, p["b.ln2.gamma"], p["b.ln2.beta"])
    ref = x + gelu_np(h @ p["b.mlp.w1"] + p["b.mlp.b1"]) @ p["b.mlp.w2"] + p["b.mlp.b2"]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_full_block_matches_numpy_oracle(rng):
    d, heads = 8, 2
    p = _block_params(rng, d)
    x = rng.normal(size=(5, d))
    out = self_attention_block(T(x), {k: T(v) for k, v in p.items()}, "b.", num_heads=heads).data
    h = ln_np(x, p["b.ln1.gamma"], p["b.ln1.beta"])
    q, k, v = (h @ p[f"b.attn.w_{n}"] + p[f"b.attn.b_{n}"] for n in "qkv")
    dh = d // heads
    cat = []
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        a = np.exp(s - s.max(1, keepdims=True))
        cat.append(a / a.sum(1, keepdims=True) @ v[:, sl])
    x1 = x + np.concatenate(cat, 1) @ p["b.attn.w_o"] + p["b.attn.b_o"]
    h2 = ln_np(x1, p["b.ln2.gamma"], p["b.ln2.beta"])
    ref = x1 + gelu_np(h2 @ p["b.mlp.w1"] + p["b.mlp.b1"]) @ p["b.mlp.w2"] + p["b.mlp.b2"]
    np.testing.assert_allclose(out, ref, atol=1e-10)


def test_attention_shape_mismatch():
    with pytest.raises(ShapeError):
        multi_head_attention(T(np.zeros((3, 5))), AttentionParams(T(np.zeros((4, 4))), T(np.zeros((4, 4))), T(np.zeros((4, 4)))))
    with pytest.raises(ContractError):
        AttentionParams(T(np.zeros((4, 4))), T(np.zeros((4, 4))), T(np.zeros((4, 4))), num_heads=3)


# --------------------------------------------------------------- residual


def conv_oracle(x, w):
    n, c, h, wd = x.shape
    co = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, co, h, wd))
    for b in range(n):
        for o in range(co):
            for i in range(h):
                for j in range(wd):
                    for ci in range(c):
                        for di in range(3):
                            for dj in range(3):
                                out[b, o, i, j] += xp[b, ci, i + di, j + dj] * w[o, ci, di, dj]
    return out


def test_residual_zero_weights_is_relu(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    out = residual_block(T(x), T(np.zeros((2, 2, 3, 3)))).data
    np.testing.assert_array_equal(out, np.maximum(x, 0))


def test_residual_zero_input_is_zero(rng):
    out = residual_block(T(np.zeros((1, 2, 4, 4))), T(rng.normal(size=(2, 2, 3, 3)))).data
    np.testing.assert_array_equal(out, 0)


def test_residual_matches_loop_oracle(rng):
    x = rng.normal(size=(1, 2, 4, 4))
    w = rng.normal(size=(2, 2, 3, 3))
    ref = np.maximum(x + np.maximum(conv_oracle(x, w), 0), 0)
    np.testing.assert_allclose(residual_block(T(x), T(w)).data, ref, atol=1e-10)


def test_residual_channel_change_needs_projection(rng):
    x = T(rng.normal(size=(1, 2, 4, 4)))
    with pytest.raises(ShapeError):
        residual_block(x, T(rng.normal(size=(4, 2, 3, 3))))
    out = residual_block(x, T(rng.normal(size=(4, 2, 3, 3))), stride=2, proj_w=T(rng.normal(size=(4, 2, 1, 1))))
    assert out.shape == (1, 4, 2, 2)


# ------------------------------------------------------------------ mixer


def _mixer_params(rng, n, d, hid_t=3, hid_c=5, zero=False):
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(size=s))
    return {
        "m.ln1.gamma": rng.normal(size=d), "m.ln1.beta": rng.normal(size=d),
        "m.tok.w1": f(n, hid_t), "m.tok.b1": f(hid_t), "m.tok.w2": f(hid_t, n), "m.tok.b2": f(n),
        "m.ln2.gamma": rng.normal(size=d), "m.ln2.beta": rng.normal(size=d),
        "m.ch.w1": f(d, hid_c), "m.ch.b1": f(hid_c), "m.ch.w2": f(hid_c, d), "m.ch.b2": f(d),
    }


def mixer_oracle(x, p):
    h = ln_np(x, p["m.ln1.gamma"], p["m.ln1.beta"])
    n, d = x.shape
    tok = np.zeros_like(x)
    for j in range(d):  # one MLP per channel column, across tokens
        col = h[:, j]
        tok[:, j] = gelu_np(col @ p["m.tok.w1"] + p["m.tok.b1"]) @ p["m.tok.w2"] + p["m.tok.b2"]
    x = x + tok
    h = ln_np(x, p["m.ln2.gamma"], p["m.ln2.beta"])
    for i in range(n):  # one MLP per token row, across channels
        x[i] = x[i] + gelu_np(h[i] @ p["m.ch.w1"] + p["m.ch.b1"]) @ p["m.ch.w2"] + p["m.ch.b2"]
    return x


@pytest.mark.parametrize("n", [1, 4])
def test_mixer_matches_per_axis_oracle(n, rng):
    p = _mixer_params(rng, n, 4)
    x = rng.normal(size=(n, 4))
    out = mixer_block(T(x), {k: T(v) for k, v in p.items()}, "m.", n).data
    np.testing.assert_allclose(out, mixer_oracle(x.copy(), p), atol=1e-10)


def test_mixer_zero_mlps_is_identity(rng):
    p = _mixer_params(rng, 4, 4, zero=True)
    x = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(mixer_block(T(x), {k: T(v) for k, v in p.items()}, "m.", 4).data, x)


def test_mixer_token_count_checked(rng):
    p = _mixer_params(rng, 4, 4)
    with pytest.raises(ShapeError):
        mixer_block(T(rng.normal(size=(3, 4))), {k: T(v) for k, v in p.items()}, "m.", 4)


# ------------------------------------------------------------ classifiers


def test_spec_validation():
    with pytest.raises(ShapeError):
        ModelSpec("vit", 1, 28, 28, patch=5)
    with pytest.raises(ContractError):
        ModelSpec("vit", 1, 28, 28, num_classes=1)
    with pytest.raises(ContractError):
        ModelSpec("cnn", 1, 28, 28)
    with pytest.raises(ContractError):
        default_spec("vit", "imagenet")
    assert default_spec("vit").num_tokens == 49
    assert default_spec("mixer", "cifar10").num_tokens == 64


def test_default_resnet_layout():
    shapes = parameter_shapes(default_spec("resnet"))
    convs = [k for k in shapes if k.endswith("conv.w")]
    assert len(convs) == 6
    assert shapes["head.w"] == (64, 10)
    assert sum(k.endswith("proj.w") for k in shapes) == 2


@pytest.mark.parametrize("family", sorted(SMALL_SPECS))
def test_zero_head_gives_bias(family, rng):
    m = build_model(SMALL_SPECS[family], 0)
    m.params["head.w"].data[:] = 0
    m.params["head.b"].data[:] = np.arange(10)
    x = rng.normal(size=(3, 1, 8, 8)).astype(np.float32)
    np.testing.assert_array_equal(m(Tensor(x)).data, np.tile(np.arange(10, dtype=np.float32), (3, 1)))


@pytest.mark.parametrize("family", sorted(SMALL_SPECS))
def test_identical_images_identical_logits(family, rng):
    m = build_model(SMALL_SPECS[family], 0)
    x = rng.normal(size=(1, 8, 8)).astype(np.float32)
    a = m(Tensor(np.stack([x, x])))
    np.testing.assert_array_equal(a.data[0], a.data[1])
    np.testing.assert_array_equal(m(Tensor(x)).data, m(Tensor(x)).data)


def _swap_patches(img, q, a, b):
    out = img.copy()
    gw = img.shape[-1] // q
    (ra, ca), (rb, cb) = divmod(a, gw), divmod(b, gw)
    pa = img[:, ra * q:(ra + 1) * q, ca * q:(ca + 1) * q].copy()
    out[:, ra * q:(ra + 1) * q, ca * q:(ca + 1) * q] = img[:, rb * q:(rb + 1) * q, cb * q:(cb + 1) * q]
    out[:, rb * q:(rb + 1) * q, cb * q:(cb + 1) * q] = pa
    return out


def test_vit_token_permutation(rng):
    m = build_model(SMALL_SPECS["vit"], 0).astype(np.float64)
    x = rng.normal(size=(1, 8, 8))
    swapped = _swap_patches(x, 4, 0, 3)
    m.params["embed.pos"].data[:] = rng.normal(size=m.params["embed.pos"].shape)
    assert not np.allclose(m(Tensor(x, dtype=np.float64)).data, m(Tensor(swapped, dtype=np.float64)).data)
    m.params["embed.pos"].data[:] = 0
    np.testing.assert_allclose(m(Tensor(x, dtype=np.float64)).data, m(Tensor(swapped, dtype=np.float64)).data, atol=1e-12)


@pytest.mark.parametrize("family", sorted(SMALL_SPECS))
def test_input_gradient_full_shape(family, rng):
    m = build_model(SMALL_SPECS[family], 2)
    x = Tensor(rng.normal(size=(2, 1, 8, 8)), requires_grad=True)
    backward(tsum(m(x)))
    assert x.grad.shape == (2, 1, 8, 8)
    assert np.count_nonzero(x.grad) > 0.5 * x.grad.size


def test_classifier_checks_parameters():
    spec = SMALL_SPECS["vit"]
    params = build_model(spec).params
    bad = dict(params)
    bad["head.w"] = Tensor(np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        Classifier(spec, bad)
    missing = dict(params)
    missing.pop("head.b")
    with pytest.raises(ShapeError):
        Classifier(spec, missing)
    with pytest.raises(ShapeError):
        build_model(spec)(Tensor(np.zeros((1, 1, 4, 4))))


def test_build_model_is_seeded():
    a = build_model(SMALL_SPECS["mixer"], 9)
    b = build_model(SMALL_SPECS["mixer"], 9)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)

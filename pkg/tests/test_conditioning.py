import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from triplanelab import conditioning as cd


def test_pyramid_shapes():
    enc = cd.ConditionEncoder(8)
    f = enc.encode(np.zeros((64, 64, 3)))
    assert f.shapes_hwc() == [(32, 32, 8), (16, 16, 16), (8, 8, 32)]
    assert f.batch == 1


@settings(max_examples=10, deadline=None)
@given(st.sampled_from([8, 16, 24, 32]), st.sampled_from([8, 16, 40]), st.sampled_from([2, 4]))
def test_pyramid_geometry_grid(h, w, c):
    f = cd.ConditionEncoder(c).encode(torch.zeros(2, 3, h, w))
    assert f.shapes_hwc() == [(h // 2, w // 2, c), (h // 4, w // 4, 2 * c), (h // 8, w // 8, 4 * c)]


def test_indivisible_portrait_rejected():
    with pytest.raises(ValueError):
        cd.ConditionEncoder(4).encode(np.zeros((60, 64, 3)))


def test_zero_image_zero_bias_gives_zero_features():
    enc = cd.ConditionEncoder(4)
    with torch.no_grad():
        for conv in enc.stages:
            conv.bias.zero_()
    f = enc.encode(np.zeros((16, 16, 3)))
    assert all(not y.any() for y in f.scales())


def test_encoder_gradient_finite_differences():
    torch.manual_seed(0)
    enc = cd.ConditionEncoder(4).double()
    img = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    probe = torch.randn(1, 16, 2, 2, dtype=torch.float64)
    (enc.encode(img).y3 * probe).sum().backward()
    g = img.grad.clone()
    h = 1e-6
    rng = np.random.default_rng(0)
    with torch.no_grad():
        for _ in range(20):
            idx = tuple(int(rng.integers(0, n)) for n in img.shape)
            x = img.detach().clone()
            x[idx] += h
            fp = float((enc.encode(x).y3 * probe).sum())
            x[idx] -= 2 * h
            fm = float((enc.encode(x).y3 * probe).sum())
            fd = (fp - fm) / (2 * h)
            assert abs(fd - float(g[idx])) <= 1e-4 * max(abs(fd), 1e-6)


def test_encoder_counts_calls():
    enc = cd.ConditionEncoder(4)
    enc.encode(np.zeros((8, 8, 3)))
    enc(torch.zeros(1, 3, 8, 8))
    assert enc.calls == 2


def test_partition_whole_map():
    y = torch.arange(64.0).reshape(1, 1, 8, 8)
    tok, grid = cd.patch_partition(y, 8)
    assert grid == (1, 1) and tok.shape == (1, 1, 64)
    assert torch.equal(tok[0, 0], y.reshape(-1))


def test_partition_index_oracle():
    y = torch.arange(64.0).reshape(1, 1, 8, 8)
    tok, grid = cd.patch_partition(y, 4)
    assert grid == (2, 2)
    first = set(int(v) for v in tok[0, 0])
    assert first == set(range(0, 4)) | set(range(8, 12)) | set(range(16, 20)) | set(range(24, 28))
    # row-major patch order: second patch is the top-right block
    assert int(tok[0, 1, 0]) == 4 and int(tok[0, 2, 0]) == 32


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(1, 3), st.integers(1, 3))
def test_partition_roundtrip(b, c, p, r, q):
    y = torch.randn(b, c, r * p, q * p)
    tok, grid = cd.patch_partition(y, p)
    assert tok.shape == (b, r * q, p * p * c)
    assert torch.equal(cd.patch_merge(tok, grid, p, c), y)
    # lossless: every texel appears exactly once
    assert sorted(tok.reshape(-1).tolist()) == sorted(y.reshape(-1).tolist())


def test_partition_indivisible():
    with pytest.raises(ValueError):
        cd.patch_partition(torch.zeros(1, 1, 6, 8), 4)


def _layer(qc=2, cc=2, n=3, patch=1, width=2):
    layer = cd.CrossAttention(qc, cc, n, patch, width, query_norm=False).double()
    layer.mask_positions = True
    return layer


def test_attention_matches_scalar_oracle():
    layer = _layer()
    wq = [[1.0, 0.5], [-0.3, 2.0]]
    wk = [[0.2, -1.0], [1.5, 0.4]]
    wv = [[0.7, 0.1], [-0.6, 1.2]]
    wo = [[1.0, -0.5], [0.25, 2.0]]
    bo = [0.1, -0.2]
    with torch.no_grad():
        layer.to_q.weight.copy_(torch.tensor(wq, dtype=torch.float64))
        layer.to_k.weight.copy_(torch.tensor(wk, dtype=torch.float64))
        layer.to_v.weight.copy_(torch.tensor(wv, dtype=torch.float64))
        layer.to_out.weight.copy_(torch.tensor(wo, dtype=torch.float64))
        layer.to_out.bias.copy_(torch.tensor(bo, dtype=torch.float64))
    queries = [[0.3, -1.2], [2.0, 0.5]]
    keys = [[1.0, 0.0], [-0.5, 0.8], [0.2, 0.2]]
    with torch.no_grad():
        out = layer.attend(torch.tensor([queries], dtype=torch.float64),
                           torch.tensor([keys], dtype=torch.float64))

    mat = lambda m, v: [sum(m[i][j] * v[j] for j in range(len(v))) for i in range(len(m))]
    for n, x in enumerate(queries):
        q = mat(wq, x)
        logits = [sum(a * b for a, b in zip(q, mat(wk, k))) / math.sqrt(2) for k in keys]
        top = max(logits)
        e = [math.exp(v - top) for v in logits]
        w = [v / sum(e) for v in e]
        mix = [sum(w[k] * mat(wv, keys[k])[d] for k in range(3)) for d in range(2)]
        expect = [a + b for a, b in zip(mat(wo, mix), bo)]
        for d in range(2):
            assert abs(float(out[0, n, d]) - expect[d]) < 1e-12


def test_zero_value_projection_is_identity():
    layer = cd.CrossAttention(4, 2, 4, patch=2, width=8)
    with torch.no_grad():
        layer.to_v.weight.zero_()
        layer.to_out.bias.zero_()
    x = torch.randn(2, 4, 4, 4)
    assert torch.equal(layer(x, torch.randn(2, 2, 4, 4)), x)


def test_single_token_broadcasts_value():
    layer = _layer(n=1)
    x = torch.randn(1, 2, 3, 3, dtype=torch.float64)
    ctx = torch.randn(1, 2, 1, 1, dtype=torch.float64)
    out = layer(x, ctx)
    assert torch.allclose(layer.last_weights, torch.ones_like(layer.last_weights))
    v = layer.to_out(layer.to_v(ctx.reshape(1, 1, 2)))[0, 0]
    assert torch.allclose(out - x, v.view(1, 2, 1, 1).expand_as(x), atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_rows_sum_to_one_and_permutation_invariance(seed):
    torch.manual_seed(seed)
    layer = cd.CrossAttention(4, 3, 6, patch=2, width=8).double()
    layer.mask_positions = True
    q = torch.randn(2, 5, 4, dtype=torch.float64)
    tok = torch.randn(2, 6, 12, dtype=torch.float64)
    out = layer.attend(q, tok)
    assert torch.allclose(layer.last_weights.sum(-1), torch.ones(2, 5, dtype=torch.float64), atol=1e-9)
    perm = torch.randperm(6)
    assert torch.allclose(layer.attend(q, tok[:, perm]), out, atol=1e-12)


def test_positions_break_permutation_symmetry():
    torch.manual_seed(0)
    layer = cd.CrossAttention(4, 3, 6, patch=2, width=8).double()
    with torch.no_grad():
        layer.pos.normal_()
    q = torch.randn(1, 5, 4, dtype=torch.float64)
    tok = torch.randn(1, 6, 12, dtype=torch.float64)
    assert not torch.allclose(layer.attend(q, tok[:, torch.tensor([1, 0, 2, 3, 4, 5])]), layer.attend(q, tok))


def test_width_mismatch_rejected():
    layer = cd.CrossAttention(4, 3, 4, patch=2, width=8)
    with pytest.raises(ValueError):
        layer.attend(torch.randn(1, 5, 3), torch.randn(1, 4, 12))
    with pytest.raises(ValueError):
        layer(torch.randn(1, 5, 4, 4), torch.randn(1, 3, 4, 4))
    with pytest.raises(ValueError):
        layer(torch.randn(1, 4, 4, 4), torch.randn(1, 3, 8, 8))


def test_dropout_extremes():
    enc = cd.ConditionEncoder(4)
    f = enc.encode(torch.rand(6, 3, 16, 16))
    null = enc.null_features(6, (16, 16))
    kept, m = cd.condition_dropout(f, null, 0.0, 0)
    assert not m.any() and kept is f
    dropped, m = cd.condition_dropout(f, null, 1.0, 0)
    assert m.all() and all(not y.any() for y in dropped.scales())
    with pytest.raises(ValueError):
        cd.dropout_mask(3, 1.5, 0)


def test_dropout_is_whole_sample():
    enc = cd.ConditionEncoder(4)
    with torch.no_grad():
        for i, p in enumerate(enc.null):
            p.fill_(float(i + 7))
    f = enc.encode(torch.rand(64, 3, 16, 16))
    out, m = cd.condition_dropout(f, enc.null_features(64, (16, 16)), 0.5, 3)
    assert 0 < m.sum() < 64
    for i, keep in enumerate(~m):
        for s, (a, b) in enumerate(zip(out.scales(), f.scales())):
            assert torch.equal(a[i], b[i]) if keep else bool(torch.all(a[i] == s + 7))


def test_dropout_rate_binomial():
    n = 100_000
    rate = cd.dropout_mask(n, 0.2, 11).mean()
    assert abs(rate - 0.2) <= 0.005
    assert abs(rate - 0.2) <= 3 * math.sqrt(0.2 * 0.8 / n)

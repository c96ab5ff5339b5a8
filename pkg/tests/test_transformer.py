import numpy as np
import pytest

from qslam.errors import ContractViolation
from qslam.layers import mha_backward, mha_forward, positional_encoding, softplus
from qslam.transformer import QuadricRayTransformer, TransformerConfig, TransformerInputs

TINY = TransformerConfig(feat_dim=8, sem_dim=4, n_heads=2, pe_bands=2, view_bands=2, color_hidden=6,
                         n_classes=3, n_ids=5, max_rays=8, max_samples=8, d_far=4.0, seed=3)


def make_inputs(B=2, N=4, seed=0, ids=None):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(B, 3))
    return TransformerInputs(
        points=rng.uniform(-1, 1, size=(B, N, 3)),
        view_dirs=v / np.linalg.norm(v, axis=1, keepdims=True),
        t=np.sort(rng.uniform(0.5, 3.5, size=(B, N)), axis=1),
        pixels=rng.uniform(0, 1, size=(B, 2)),
        ids=np.array(ids if ids is not None else [1, 2] * (B // 2) + [1] * (B % 2)),
    )


def randomize(model, rng, scale=0.3):
    for k, v in model.params.items():
        v[...] = rng.normal(scale=scale, size=v.shape)
    model.params["sem_table"][0] = 0.0


def test_positional_encoding_examples():
    np.testing.assert_array_equal(positional_encoding(0.0, 3), [0, 1, 0, 1, 0, 1])
    pe = positional_encoding(1.0, 2)
    assert abs(pe[0]) < 1e-15 and pe[1] == -1.0


def test_positional_encoding_injective():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 1, 10000), rng.uniform(0, 1, 10000)
    keep = np.abs(a - b) > 1e-3
    ea, eb = positional_encoding(a[keep, None], 8), positional_encoding(b[keep, None], 8)
    assert np.all(np.max(np.abs(ea - eb), axis=1) > 1e-6)


def test_query_features_shape_and_determinism():
    m = QuadricRayTransformer(TransformerConfig(feat_dim=32))
    pts = np.tile(np.array([0.1, 0.2, 0.3]), (8, 48, 1))
    f, fs, _ = m.query_features(pts, np.arange(8))
    assert f.shape == (8, 48, 32) and fs.shape == (8, 16)
    assert np.all(f == f[0, 0])


def test_zero_field_gives_zero_features():
    m = QuadricRayTransformer(TINY)
    for k in ("f_w1", "f_b1", "f_w2", "f_b2", "f_w3", "f_b3"):
        m.params[k][...] = 0.0
    f, _, _ = m.query_features(np.random.default_rng(0).normal(size=(2, 4, 3)), np.array([1, 2]))
    assert not f.any()


def test_shape_contract():
    m = QuadricRayTransformer(TINY)
    with pytest.raises(ContractViolation):
        m.query_features(np.zeros((2, 4)), np.array([1, 2]))
    with pytest.raises(ContractViolation):
        m.query_features(np.zeros((2, 4, 3)), np.array([1, 9]))
    with pytest.raises(ContractViolation):
        m.backward()
    with pytest.raises(ContractViolation):
        TransformerConfig(feat_dim=10, n_heads=4)


def test_single_sample_attention():
    m = QuadricRayTransformer(TINY)
    p = m.params
    x = np.random.default_rng(1).normal(size=(3, 1, 8))
    out, _ = m.intra_ray_attention(x, np.zeros_like(x))
    np.testing.assert_allclose(out, x + x @ p["a_wv"] @ p["a_wo"], atol=1e-14)


def test_intra_identical_tokens_and_equivariance():
    m = QuadricRayTransformer(TINY)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 5, 8))
    x[:, 3] = x[:, 1]
    out, _ = m.intra_ray_attention(x, np.zeros_like(x))
    np.testing.assert_allclose(out[:, 3], out[:, 1], atol=1e-14)
    perm = rng.permutation(5)
    out_p, _ = m.intra_ray_attention(x[:, perm], np.zeros_like(x))
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)
    # with encodings, co-permuting them preserves equivariance too
    d = m.depth_encoding(np.sort(rng.uniform(0, 4, (2, 5)), axis=1))
    a, _ = m.intra_ray_attention(x, d)
    b, _ = m.intra_ray_attention(x[:, perm], d[:, perm])
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_inter_ray_equivariance_and_single_ray():
    m = QuadricRayTransformer(TINY)
    rng = np.random.default_rng(3)
    f2 = rng.normal(size=(6, 4, 8))
    dpp = m.pixel_encoding(rng.uniform(0, 1, (6, 2)))
    ids = np.array([1, 1, 2, 2, 3, 3])
    out, _ = m.inter_ray_attention(f2, dpp, ids)
    perm = rng.permutation(6)
    out_p, _ = m.inter_ray_attention(f2[perm], dpp[perm], ids[perm])
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)
    one, _ = m.inter_ray_attention(f2[:1], dpp[:1], ids[:1])
    p = m.params
    x = f2[:1] + dpp[:1, None, :]
    np.testing.assert_allclose(one, f2[:1] + x @ p["r_wv"] @ p["r_wo"], atol=1e-14)


def test_masked_inter_ray_distinct_segments_is_self_attention():
    cfg = TransformerConfig(**{**TINY.__dict__, "quadric_masking": True})
    m = QuadricRayTransformer(cfg)
    rng = np.random.default_rng(4)
    f2 = rng.normal(size=(4, 3, 8))
    dpp = m.pixel_encoding(rng.uniform(0, 1, (4, 2)))
    out, _ = m.inter_ray_attention(f2, dpp, np.array([1, 2, 3, 4]))
    for i in range(4):
        solo, _ = m.inter_ray_attention(f2[i:i + 1], dpp[i:i + 1], np.array([i + 1]))
        np.testing.assert_allclose(out[i], solo[0], atol=1e-14)


def test_masked_row_without_keys_is_identity():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(2, 3, 4))
    W = [rng.normal(size=(4, 4)) for _ in range(4)]
    allowed = np.ones((3, 3), dtype=bool)
    allowed[1] = False
    out, _ = mha_forward(X, *W, 2, allowed)
    assert not out[:, 1].any()


def test_semantic_swap_changes_only_those_rays():
    cfg = TransformerConfig(**{**TINY.__dict__, "max_rays": 1})  # isolate rays from inter-ray mixing
    m = QuadricRayTransformer(cfg)
    randomize(m, np.random.default_rng(0))
    inp = make_inputs(B=4, ids=[1, 2, 3, 4])
    s0, _, _ = m.forward(inp)
    inp.ids = np.array([2, 1, 3, 4])
    s1, _, _ = m.forward(inp)
    changed = np.any(s0 != s1, axis=1)
    assert changed.tolist() == [True, True, False, False]


def test_zero_semantic_embedding_ignored():
    m = QuadricRayTransformer(TINY)
    f1 = np.random.default_rng(6).normal(size=(2, 3, 8))
    a, _ = m.fuse_semantic(f1, np.zeros((2, 4)))
    z = softplus(f1 @ m.params["u_w1"][:8] + m.params["u_b1"]) @ m.params["u_w2"] + m.params["u_b2"]
    np.testing.assert_allclose(a, z, atol=1e-14)


def test_heads_ranges():
    m = QuadricRayTransformer(TINY)
    for k in ("s_w", "s_b"):
        m.params[k][...] = 0.0
    sigma, rgb, logits = m.forward(make_inputs(B=4, N=5))
    np.testing.assert_allclose(sigma, np.log(2.0), rtol=1e-15)
    assert np.all((rgb > 0) & (rgb < 1))
    assert logits.shape == (4, 5, 3)


def test_attention_rows_sum_to_one():
    m = QuadricRayTransformer(TransformerConfig(**{**TINY.__dict__, "max_rays": 3, "quadric_masking": True}))
    randomize(m, np.random.default_rng(7), 1.0)
    m.forward(make_inputs(B=7, N=6, ids=[1, 2, 1, 3, 3, 2, 1]))
    intra, inter = m.attention_maps()
    for A in [intra] + inter:
        assert np.all(A >= 0)
        assert np.max(np.abs(A.sum(axis=-1) - 1)) <= 1e-12


def test_forward_deterministic():
    m = QuadricRayTransformer(TINY)
    inp = make_inputs()
    a = m.forward(inp)
    b = m.forward(inp)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_zero_upstream_zero_gradients():
    m = QuadricRayTransformer(TINY)
    m.forward(make_inputs())
    m.zero_grad()
    out = m.backward()
    assert all(not g.any() for g in m.grads.values())
    assert not out["points"].any()


def _loss(model, inp, w_rgb, w_log):
    sigma, rgb, logits = model.forward(inp)
    return float(np.sum(sigma) + np.sum(w_rgb * rgb) + np.sum(w_log * logits))


def _rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8)


@pytest.mark.parametrize("masking", [False, True])
def test_full_stack_gradients(masking):
    cfg = TransformerConfig(**{**TINY.__dict__, "quadric_masking": masking, "max_rays": 2})
    m = QuadricRayTransformer(cfg)
    rng = np.random.default_rng(11)
    randomize(m, rng)
    inp = make_inputs(B=3 if masking else 2, N=4, ids=[1, 2, 1] if masking else [1, 2])
    B, N = inp.t.shape
    w_rgb = rng.normal(size=(B, N, 3))
    w_log = rng.normal(size=(B, N, 3))
    sigma, rgb, logits = m.forward(inp)
    m.zero_grad()
    d_in = m.backward(np.ones_like(sigma), w_rgb, w_log)
    h = 1e-5
    for name, P in m.params.items():
        fd = np.zeros_like(P)
        for idx in np.ndindex(P.shape):
            old = P[idx]
            P[idx] = old + h
            lp = _loss(m, inp, w_rgb, w_log)
            P[idx] = old - h
            lm = _loss(m, inp, w_rgb, w_log)
            P[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        if name == "sem_table":
            fd[0] = 0.0
        assert _rel_err(m.grads[name], fd) <= 1e-5, name
    for key, arr in (("points", inp.points), ("view_dirs", inp.view_dirs)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            lp = _loss(m, inp, w_rgb, w_log)
            arr[idx] = old - h
            lm = _loss(m, inp, w_rgb, w_log)
            arr[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        assert _rel_err(d_in[key], fd) <= 1e-5, key


def test_sigma_sum_gradient_matches_fd():
    # the plain L = sum(sigma) oracle on the B=2, N=4, D=8 instance
    m = QuadricRayTransformer(TINY)
    randomize(m, np.random.default_rng(12))
    inp = make_inputs()
    m.forward(inp)
    m.zero_grad()
    m.backward(np.ones((2, 4)))
    h = 1e-5
    P = m.params["f_w1"]
    fd = np.zeros_like(P)
    for idx in np.ndindex(P.shape):
        old = P[idx]
        P[idx] = old + h
        lp = m.forward(inp)[0].sum()
        P[idx] = old - h
        lm = m.forward(inp)[0].sum()
        P[idx] = old
        fd[idx] = (lp - lm) / (2 * h)
    assert _rel_err(m.grads["f_w1"], fd) <= 1e-5


def test_mha_backward_with_mask():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(3, 4))
    W = [rng.normal(size=(4, 4)) * 0.5 for _ in range(4)]
    allowed = np.array([[1, 1, 0], [1, 1, 0], [0, 0, 1]], dtype=bool)
    G = rng.normal(size=(3, 4))
    _, cache = mha_forward(X, *W, 2, allowed)
    dX = mha_backward(G, cache)[0]
    h = 1e-6
    fd = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        fd[idx] = (np.sum(G * mha_forward(Xp, *W, 2, allowed)[0]) - np.sum(G * mha_forward(Xm, *W, 2, allowed)[0])) / (2 * h)
    np.testing.assert_allclose(dX, fd, rtol=1e-6, atol=1e-8)


def test_checkpoint_round_trip(tmp_path):
    m = QuadricRayTransformer(TINY)
    randomize(m, np.random.default_rng(9))
    m.save(tmp_path / "ck.json")
    back = QuadricRayTransformer.load(tmp_path / "ck.json")
    assert back.cfg == m.cfg
    for k in m.params:
        assert back.params[k].tobytes() == m.params[k].tobytes()

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from semantix.denoiser import (
    Condition,
    KVInjection,
    Taps,
    default_tap_table,
    get_adapter,
    register_adapter,
    tap_table_from_overrides,
    toy_backend,
)

from conftest import rand_latent

ALL = (1, 2, 3, 4)


def test_eps_shape_and_determinism(backend16):
    x = rand_latent(0, (2, 3, 16, 16))
    a = backend16.predict(x, 500, Condition("a cat"), Taps(features=ALL, self_attn=ALL))
    b = backend16.predict(x, 500, Condition("a cat"), Taps(features=ALL, self_attn=ALL))
    assert a.eps_cond.shape == x.shape and a.eps_uncond.shape == x.shape
    assert torch.equal(a.eps_cond, b.eps_cond)
    for k in ALL:
        assert torch.equal(a.features[k].data, b.features[k].data)


def test_equal_seed_backends_agree():
    x = rand_latent(1)
    a = toy_backend(seed=7).predict(x, 300, Condition("x"), Taps(features=(2,)))
    b = toy_backend(seed=7).predict(x, 300, Condition("x"), Taps(features=(2,)))
    c = toy_backend(seed=8).predict(x, 300, Condition("x"), Taps(features=(2,)))
    assert torch.equal(a.features[2].data, b.features[2].data)
    assert not torch.equal(a.features[2].data, c.features[2].data)


def test_conditional_differs_from_unconditional(backend16):
    out = backend16.predict(rand_latent(2), 601, Condition("a dog"))
    assert not torch.equal(out.eps_cond, out.eps_uncond)


def test_self_attention_rows_sum_to_one(backend16):
    out = backend16.predict(rand_latent(3), 601, Condition(""), Taps(self_attn=ALL))
    for k in ALL:
        np.testing.assert_allclose(out.self_attn[k].sum(-1).numpy(), 1.0, atol=1e-5)


def test_eps_linear_in_latent(backend16):
    x = rand_latent(4)
    c = Condition("p")
    e0 = backend16.predict(torch.zeros_like(x), 400, c).eps_cond
    ex = backend16.predict(x, 400, c).eps_cond
    for a in (0.5, -2.0, 3.0):
        ea = backend16.predict(a * x, 400, c).eps_cond
        np.testing.assert_allclose((ea - e0).numpy(), (a * (ex - e0)).numpy(), atol=1e-6)


def test_tap_shapes_64():
    be = toy_backend(seed=0, latent_shape=(3, 64, 64))
    out = be.predict(rand_latent(5, (1, 3, 64, 64)), 601, Condition(""), Taps(features=(2, 3)))
    # hand table: strides 8, 4, 2, 1 for blocks 1..4
    hand = {2: (32, 16, 16), 3: (16, 32, 32)}
    for k, shape in hand.items():
        assert tuple(out.features[k].data.shape[1:]) == shape
        spec = be.tap_table[k]
        assert (spec.channels, *spec.spatial) == shape


def test_unknown_tap_raises_naming_id(backend16):
    with pytest.raises(ValueError, match="7"):
        backend16.predict(rand_latent(0), 10, Condition(""), Taps(features=(7,)))


def test_latent_shape_checked(backend16):
    with pytest.raises(ValueError):
        backend16.predict(torch.zeros(1, 3, 8, 8), 10, Condition(""))
    with pytest.raises(ValueError):
        backend16.predict(torch.full((1, 3, 16, 16), float("nan")), 10, Condition(""))


def test_self_injection_identity(backend16):
    x = rand_latent(6, (2, 3, 16, 16))
    c = Condition("style")
    inj = backend16.capture_kv(x, 601, c, (3, 4))
    taps = Taps(features=ALL, self_attn=ALL, cross_attn=ALL)
    a = backend16.predict(x, 601, c, taps)
    b = backend16.predict(x, 601, c, taps, inj)
    for k in ALL:
        np.testing.assert_allclose(a.features[k].data.numpy(), b.features[k].data.numpy(), atol=1e-6)
        np.testing.assert_allclose(a.cross_attn[k].numpy(), b.cross_attn[k].numpy(), atol=1e-6)


def test_captured_shapes(backend16):
    inj = backend16.capture_kv(rand_latent(7), 601, Condition(""), (2, 3, 4))
    for k in (2, 3, 4):
        spec = backend16.tap_table[k]
        assert tuple(inj.source_keys[k].shape) == (1, spec.heads, spec.positions, spec.head_dim)
        assert tuple(inj.source_values[k].shape) == (1, spec.heads, spec.positions, spec.head_dim)


def test_cross_injection_matches_swap_oracle(backend16):
    """features = tok + softmax(Q_out K_ref^T / sqrt d) V_ref W_o, rebuilt in numpy."""
    x_out, x_ref = rand_latent(8), rand_latent(9)
    c = Condition("")
    inj = backend16.capture_kv(x_ref, 601, c, (3,))
    out = backend16.predict(x_out, 601, c, Taps(features=(3,), self_attn=(3,)), inj)
    np.testing.assert_allclose(out.self_attn[3].sum(-1).numpy(), 1.0, atol=1e-5)

    spec, w = backend16.tap_table[3], backend16._blocks[3]
    tok = backend16.patch_projection(x_out, 3).flatten(2).transpose(1, 2)[0].numpy()
    tok_r = backend16.patch_projection(x_ref, 3).flatten(2).transpose(1, 2)[0].numpy()
    d, H = spec.head_dim, spec.heads
    q, k, v = tok @ w["wq"].numpy(), tok_r @ w["wk"].numpy(), tok_r @ w["wv"].numpy()
    mixed = np.zeros_like(tok)
    for h in range(H):
        sl = slice(h * d, (h + 1) * d)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(d)
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        mixed[:, sl] = p @ v[:, sl]
    expect = tok + mixed @ w["wo"].numpy()
    got = out.features[3].data[0].flatten(1).T.numpy()
    np.testing.assert_allclose(got, expect, atol=1e-10)


def test_injection_shape_mismatch(backend16):
    inj = backend16.capture_kv(rand_latent(1), 601, Condition(""), (3,))
    bad = KVInjection({3}, {3: inj.source_keys[3][..., :4, :]}, {3: inj.source_values[3]})
    with pytest.raises(ValueError, match="layer 3"):
        backend16.predict(rand_latent(2), 601, Condition(""), Taps(features=(3,)), bad)
    with pytest.raises(ValueError):
        KVInjection({3, 4}, {3: inj.source_keys[3]}, {3: inj.source_values[3]})


def test_identical_patches_identical_features():
    be = toy_backend(seed=3, latent_shape=(3, 16, 16))
    x = torch.zeros(1, 3, 16, 16, dtype=torch.float64)
    patch = torch.from_numpy(np.random.default_rng(0).standard_normal((3, 4, 4)))
    # 4x4 window at (i, j) covers rows i-1..i+2; plant the same content twice
    x[0, :, 1:5, 1:5] = patch
    x[0, :, 9:13, 9:13] = patch
    proj = be.patch_projection(x, 4)[0]
    np.testing.assert_allclose(proj[:, 2, 2].numpy(), proj[:, 10, 10].numpy(), atol=1e-12)
    feat = be.predict(x, 601, Condition(""), Taps(features=(4,))).features[4].data[0]
    np.testing.assert_allclose(feat[:, 2, 2].numpy(), feat[:, 10, 10].numpy(), atol=1e-6)


def test_patch_projection_oracle(backend16):
    x = rand_latent(10)
    proj = backend16.patch_projection(x, 4)[0].numpy()
    W = backend16._blocks[4]["proj"].numpy()
    xp = np.pad(x[0].numpy(), ((0, 0), (1, 2), (1, 2)))
    for i, j in [(0, 0), (5, 7), (15, 15)]:
        expect = np.einsum("ocij,cij->o", W, xp[:, i:i + 4, j:j + 4])
        np.testing.assert_allclose(proj[:, i, j], expect, atol=1e-12)


def test_outputs_finite(backend16):
    out = backend16.predict(rand_latent(11) * 100, 999, Condition("big"), Taps(features=ALL, self_attn=ALL,
                                                                             cross_attn=ALL, kv=ALL))
    tensors = [out.eps_cond, out.eps_uncond] + [f.data for f in out.features.values()]
    tensors += list(out.self_attn.values()) + list(out.cross_attn.values()) + list(out.keys.values())
    assert all(bool(torch.isfinite(t).all()) for t in tensors)


def test_gradient_matches_finite_differences(backend16):
    x = rand_latent(12)
    c = Condition("grad")
    taps = Taps(features=(2, 3), cross_attn=(3,))

    def fn(out):
        return (out.features[2].data ** 2).sum() + out.features[3].data.sin().sum() + out.cross_attn[3][..., 0].sum()

    g = backend16.gradient(fn, x, 601, c, taps)
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(40):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        xp, xm = x.clone(), x.clone()
        xp[idx] += h
        xm[idx] -= h
        with torch.no_grad():
            fd = (fn(backend16.predict(xp, 601, c, taps)) - fn(backend16.predict(xm, 601, c, taps))) / (2 * h)
        assert abs(float(fd) - float(g[idx])) <= 1e-3 * max(abs(float(fd)), 1e-6) + 1e-8


def test_encode_decode_roundtrip():
    be = toy_backend(latent_shape=(3, 8, 8), downscale=2)
    img = np.random.default_rng(0).random((1, 16, 16, 3))
    lat = be.encode(img)
    assert tuple(lat.shape) == (1, 3, 8, 8)
    np.testing.assert_allclose(lat[0, 0, 0, 0].item(), img[0, :2, :2, 0].mean())
    flat = np.kron(np.random.default_rng(1).random((8, 8, 3)), np.ones((2, 2, 1)))[None]
    np.testing.assert_allclose(be.decode(be.encode(flat)), flat, atol=1e-12)


def test_tap_table_overrides():
    table = tap_table_from_overrides((3, 32, 32), [{"id": 2, "stride": 2, "channels": 8, "heads": 4}])
    assert table[2].spatial == (16, 16) and table[2].head_dim == 2
    assert table[3] == default_tap_table((3, 32, 32))[3]
    with pytest.raises(ValueError):
        tap_table_from_overrides((3, 32, 32), [{"id": 2, "stride": 3}])


def test_adapter_registry():
    register_adapter("unit-test", lambda **kw: toy_backend())
    assert get_adapter("unit-test")().differentiable
    with pytest.raises(LookupError):
        get_adapter("does-not-exist")

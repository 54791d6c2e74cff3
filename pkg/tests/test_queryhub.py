import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, rel_err, sliding_window_conv
from dethub.errors import ConfigError, DataError
from dethub.queryhub import (
    DetectionHub,
    DyConv,
    KernelGenerator,
    QueryInteraction,
    dyconv,
    generate_kernels,
    hub_adapt,
    interact,
)


def _identity_hub(d: int) -> DetectionHub:
    hub = DetectionHub(d, d, heads=1)
    with torch.no_grad():
        for lin in (hub.attn.v_proj, hub.attn.out_proj):
            lin.weight.copy_(torch.eye(d))
            lin.bias.zero_()
    return hub


def test_single_key_attention_returns_value():
    torch.manual_seed(0)
    hub = _identity_hub(8)
    Q = torch.randn(5, 8)
    E = torch.randn(1, 8)
    out = hub_adapt(Q, E, hub)
    assert out.shape == (5, 8)
    assert torch.allclose(out, E.expand(5, -1), atol=1e-6)


def test_padded_keys_are_ignored():
    torch.manual_seed(0)
    hub = _identity_hub(8)
    Q = torch.randn(4, 8)
    E = torch.randn(3, 8)
    mask = torch.tensor([True, False, False])
    assert torch.allclose(hub_adapt(Q, E, hub, mask), E[:1].expand(4, -1), atol=1e-6)


def test_empty_embedding_errors():
    hub = DetectionHub(8, 8, 2)
    with pytest.raises(DataError, match="empty dataset embedding"):
        hub_adapt(torch.randn(3, 8), torch.zeros(0, 8), hub)
    with pytest.raises(DataError, match="empty dataset embedding"):
        hub_adapt(torch.randn(3, 8), torch.zeros(4, 8), hub, torch.zeros(4, dtype=torch.bool))


def test_hub_width_mismatch():
    with pytest.raises(ConfigError):
        hub_adapt(torch.randn(3, 8), torch.randn(4, 6), DetectionHub(8, 8, 2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_hub_row_equivariance(seed):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    hub = DetectionHub(16, 12, 4)
    Q = torch.randn(6, 16, generator=g)
    E = torch.randn(5, 12, generator=g)
    perm = torch.randperm(6, generator=g)
    assert torch.allclose(hub_adapt(Q[perm], E, hub), hub_adapt(Q, E, hub)[perm], atol=1e-5)


def test_hub_distinguishes_embeddings():
    for seed in range(10):
        torch.manual_seed(seed)
        hub = DetectionHub(16, 12, 4)
        Q = torch.randn(6, 16)
        Ea, Eb = torch.randn(5, 12), torch.randn(5, 12)
        assert not torch.allclose(hub_adapt(Q, Ea, hub), hub_adapt(Q, Eb, hub))


def test_interact_single_query_residual_plus_value():
    torch.manual_seed(0)
    block = QueryInteraction(8, heads=2)
    q = torch.randn(1, 8)
    h = block.norm1(q)
    a = block.attn.out_proj(block.attn.v_proj(h))  # softmax over one key is 1
    x = q + a
    expected = x + block.ffn(block.norm2(x))
    assert torch.allclose(interact(q, block), expected, atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_interact_permutation_equivariance(seed):
    torch.manual_seed(seed)
    block = QueryInteraction(16, heads=4)
    q = torch.randn(7, 16)
    perm = torch.randperm(7)
    assert torch.allclose(interact(q[perm], block), interact(q, block)[perm], atol=1e-5)


def test_interact_default_shape():
    block = QueryInteraction(64, heads=8)
    assert interact(torch.randn(300, 64), block).shape == (300, 64)


def test_kernel_numel_arithmetic():
    gen = KernelGenerator(64, 64, 16, 64, k=3)
    assert gen.kernel_numel == 3 * 3 * 64 * 16 + 3 * 3 * 16 * 64 == 18432
    kernels = generate_kernels(torch.randn(2, 64), gen)
    assert kernels[0].K1.shape == (16, 64, 3, 3) and kernels[0].K2.shape == (64, 16, 3, 3)


@pytest.mark.parametrize("k,c_mid", [(2, 4), (0, 4), (3, 8), (3, 0)])
def test_kernel_config_errors(k, c_mid):
    with pytest.raises(ConfigError):
        KernelGenerator(8, 8, c_mid, 8, k=k)


def test_zero_query_gives_zero_kernels():
    gen = KernelGenerator(8, 8, 2, 8, k=3)
    with torch.no_grad():
        gen.to_k1.bias.zero_()
        gen.to_k2.bias.zero_()
    k1, k2 = gen(torch.zeros(3, 8))
    assert not k1.any() and not k2.any()


def test_kernel_row_independence():
    torch.manual_seed(0)
    gen = KernelGenerator(8, 8, 2, 8, k=3)
    q = torch.randn(4, 8)
    k1, k2 = gen(q)
    q2 = q.clone()
    q2[2] += torch.randn(8)
    j1, j2 = gen(q2)
    keep = [0, 1, 3]
    assert torch.equal(k1[keep], j1[keep]) and torch.equal(k2[keep], j2[keep])
    assert not torch.equal(k1[2], j1[2])


def test_dyconv_identity_in_linear_mode():
    x = torch.randn(4, 5, 5)
    eye = torch.eye(4)[:, :, None, None]
    assert torch.allclose(dyconv(x, eye, eye), x)


def test_dyconv_zero_k1():
    x = torch.randn(4, 5, 5)
    k1 = torch.zeros(2, 4, 3, 3)
    k2 = torch.randn(4, 2, 3, 3)
    assert not dyconv(x, k1, k2).any()
    assert not DyConv(2)(x, k1, k2).any()


def test_dyconv_matches_sliding_window_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        c_in, c_mid, c_out = rng.integers(1, 4, 3)
        k = int(rng.choice([1, 3, 5]))
        h, w = rng.integers(3, 7, 2)
        x = rng.normal(size=(c_in, h, w))
        k1 = rng.normal(size=(c_mid, c_in, k, k))
        k2 = rng.normal(size=(c_out, c_mid, k, k))
        ref = sliding_window_conv(sliding_window_conv(x, k1), k2)
        got = dyconv(*(torch.from_numpy(a) for a in (x, k1, k2))).numpy()
        assert got.shape == (c_out, h, w)
        assert np.abs(got - ref).max() < 1e-6


def test_dyconv_batched_equals_single():
    torch.manual_seed(0)
    x = torch.randn(2, 3, 4, 5, 5)
    k1 = torch.randn(2, 3, 2, 4, 3, 3)
    k2 = torch.randn(2, 3, 4, 2, 3, 3)
    out = dyconv(x, k1, k2)
    for b in range(2):
        for q in range(3):
            assert torch.allclose(out[b, q], dyconv(x[b, q], k1[b, q], k2[b, q]), atol=1e-5)


def test_dyconv_channel_mismatch_names_stage():
    x = torch.randn(4, 5, 5)
    with pytest.raises(ValueError, match="K1"):
        dyconv(x, torch.randn(2, 3, 3, 3), torch.randn(4, 2, 3, 3))
    with pytest.raises(ValueError, match="K2"):
        dyconv(x, torch.randn(2, 4, 3, 3), torch.randn(4, 3, 3, 3))


@pytest.mark.parametrize("linear", [True, False])
def test_dyconv_gradients(float64, linear):
    torch.manual_seed(0)
    gen = KernelGenerator(6, 4, 2, 4, k=3)
    norm = None if linear else DyConv(2).norm
    x = torch.randn(2, 4, 5, 5, requires_grad=True)
    q = torch.randn(2, 6, requires_grad=True)
    weight = torch.randn(2, 4, 5, 5)

    def loss():
        k1, k2 = gen(q)
        return (dyconv(x, k1, k2, norm) * weight).sum()

    loss().backward()
    with torch.no_grad():
        assert rel_err(x.grad, central_difference(loss, x)) < 1e-4
        assert rel_err(q.grad, central_difference(loss, q)) < 1e-4
        w = gen.to_k1.weight
        assert rel_err(w.grad, central_difference(loss, w)) < 1e-4

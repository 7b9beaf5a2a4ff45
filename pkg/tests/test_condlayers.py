import numpy as np
import pytest
import torch

from helpers import central_difference_check, naive_conv1d_same, random_pose7
from poseloc.condlayers import (
    CondConv1d,
    CondLayerNorm,
    PoseCrossAttention,
    PoseExpand,
    PoseToken,
    cond_conv1d,
    cond_layer_norm,
    conv1d_same,
    normalize,
    pose_cross_attention,
    pose_expand,
    pose_token_concat,
)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def poses(n, seed=0, dtype=torch.float64):
    return torch.tensor(random_pose7(np.random.default_rng(seed), n), dtype=dtype)


# -- PoseExpand ------------------------------------------------------------- #


def test_pose_expand_zero_last_layer_gives_zero():
    net = PoseExpand(16, (32,), zero_init_last=True)
    out = pose_expand(poses(10, dtype=torch.float32), net)
    assert torch.count_nonzero(out) == 0


def test_pose_expand_separates_poses_after_warmup():
    net = PoseExpand(16, (32, 32)).double()
    rng = np.random.default_rng(1)
    p = torch.tensor(random_pose7(rng, 64))
    target = torch.tensor(rng.normal(size=(64, 16)))
    opt = torch.optim.Adam(net.parameters(), 1e-2)
    for _ in range(100):
        opt.zero_grad()
        ((net(p) - target) ** 2).mean().backward()
        opt.step()
    a, b = net(p[:1]), net(p[1:2])
    assert torch.linalg.norm(a - b).item() > 0


def test_pose_expand_gradients():
    net = PoseExpand(12, (8, 8)).double()
    p = poses(5).requires_grad_()
    w = torch.randn(5, 12, dtype=torch.float64)
    central_difference_check(lambda: (net(p) * w).sum(), [*net.parameters(), p])


# -- CondConv --------------------------------------------------------------- #


def test_delta_kernel_is_identity():
    x = torch.randn(4, 3, 256, dtype=torch.float64)
    w = torch.zeros(4, 1, 5, dtype=torch.float64)
    w[:, 0, 2] = 1
    out = cond_conv1d(x, w, torch.zeros(4, 1, dtype=torch.float64))
    assert torch.equal(out, x)


def test_delta_override_in_layer():
    layer = CondConv1d(kernels=1, size=5, act="identity").double()
    w = torch.zeros(1, 5, dtype=torch.float64)
    w[0, 2] = 1
    layer.override = (w[None], torch.zeros(1, 1, dtype=torch.float64))
    x = torch.randn(6, 3, 256, dtype=torch.float64)
    assert torch.equal(layer(x, poses(6)), x)


def test_zero_weights_give_zero():
    x = torch.randn(2, 3, 256)
    for act in (None, torch.nn.GELU(), torch.nn.ReLU()):
        out = cond_conv1d(x, torch.zeros(2, 8, 5), torch.zeros(2, 8), act)
        assert torch.count_nonzero(out) == 0


def test_matches_naive_convolution_100_cases():
    rng = np.random.default_rng(2)
    for case in range(100):
        K = int(rng.integers(1, 9))
        S = int(rng.choice([1, 3, 5, 7]))
        N = int(rng.integers(S, 64))
        x = rng.normal(size=N)
        w = rng.normal(size=(K, S))
        b = rng.normal(size=K)
        ref = naive_conv1d_same(x, w, b)
        got = conv1d_same(torch.tensor(x)[None, None], torch.tensor(w)[None], torch.tensor(b)[None])[0, 0].numpy()
        np.testing.assert_allclose(got, ref, atol=1e-6, rtol=0)
        mean_ref = ref.mean(0)
        got_mean = cond_conv1d(torch.tensor(x)[None, None], torch.tensor(w)[None], torch.tensor(b)[None])[0, 0]
        np.testing.assert_allclose(got_mean.numpy(), mean_ref, atol=1e-6, rtol=0)


def test_cond_conv_rejects_non_finite():
    x = torch.zeros(1, 1, 8)
    x[0, 0, 3] = float("nan")
    with pytest.raises(ValueError):
        cond_conv1d(x, torch.zeros(1, 1, 3), torch.zeros(1, 1))


def test_cond_conv_gradients():
    layer = CondConv1d(kernels=3, size=5, hidden=(8,), act="gelu").double()
    x = torch.randn(4, 2, 16, dtype=torch.float64, requires_grad=True)
    p = poses(4).requires_grad_()
    w = torch.randn(4, 2, 16, dtype=torch.float64)
    central_difference_check(lambda: (layer(x, p) * w).sum(), [*layer.parameters(), x, p])


def test_cond_conv_batch_permutation_equivariance():
    layer = CondConv1d().double()
    x = torch.randn(5, 3, 256, dtype=torch.float64)
    p = poses(5)
    perm = torch.tensor([3, 0, 4, 1, 2])
    torch.testing.assert_close(layer(x[perm], p[perm]), layer(x, p)[perm], rtol=0, atol=1e-12)


# -- CLN -------------------------------------------------------------------- #


def test_unit_gamma_zero_beta_is_standardization():
    x = torch.randn(16, 256, dtype=torch.float64) * 3 + 5
    y = cond_layer_norm(x, torch.ones(16, dtype=torch.float64), torch.zeros(16, dtype=torch.float64))
    assert y.mean(1).abs().max() <= 1e-6
    assert (y.std(1, unbiased=False) - 1).abs().max() <= 1e-4


def test_constant_input_gives_beta():
    x = torch.full((3, 32), 0.7, dtype=torch.float64)
    beta = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    y = cond_layer_norm(x, torch.tensor([2.0, 3.0, 4.0], dtype=torch.float64), beta)
    torch.testing.assert_close(y, beta[:, None].expand(3, 32), atol=1e-9, rtol=0)


def test_cln_entry_swap():
    layer = CondLayerNorm().double()
    torch.nn.init.normal_(layer.head.weight)
    head = PoseExpand(16, (16,)).double()
    x = torch.randn(2, 64, dtype=torch.float64)
    p = poses(2)
    out = layer(x, head(p))
    swapped = layer(x.flip(0), head(p.flip(0)))
    torch.testing.assert_close(swapped, out.flip(0), rtol=0, atol=1e-12)


def test_cln_pre_affine_invariant_on_maps():
    x = torch.randn(4, 8, 6, 8, dtype=torch.float64) * 2 - 1
    y = normalize(x, ndim=3)
    assert y.mean(dim=(1, 2, 3)).abs().max() <= 1e-6
    assert (y.flatten(1).std(1, unbiased=False) - 1).abs().max() <= 1e-4


def test_cln_gradients():
    layer = CondLayerNorm(ndim=1).double()
    torch.nn.init.normal_(layer.head.weight, std=0.3)
    expand = PoseExpand(16, (16,)).double()
    x = torch.randn(3, 20, dtype=torch.float64, requires_grad=True)
    p = poses(3).requires_grad_()
    w = torch.randn(3, 20, dtype=torch.float64)
    params = [*layer.parameters(), *expand.parameters(), x, p]
    central_difference_check(lambda: (layer(x, expand(p)) * w).sum(), params)


def test_fresh_cln_equals_plain_normalization():
    layer = CondLayerNorm(ndim=3)
    x = torch.randn(2, 4, 6, 8)
    torch.testing.assert_close(layer(x, torch.randn(2, 16)), normalize(x, 3), rtol=0, atol=0)


# -- comparison mechanisms -------------------------------------------------- #


def test_cross_attention_zero_init_is_identity():
    block = PoseCrossAttention(32, 4)
    t = torch.randn(3, 10, 32)
    assert torch.equal(pose_cross_attention(t, poses(3, dtype=torch.float32), block), t)


@pytest.mark.parametrize("n", [1, 8, 64])
def test_cross_attention_token_count(n):
    block = PoseCrossAttention(16, 2)
    assert block(torch.randn(2, n, 16), poses(2, dtype=torch.float32)).shape == (2, n, 16)


def test_cross_attention_gradients():
    block = PoseCrossAttention(8, 2).double()
    torch.nn.init.normal_(block.o.weight, std=0.3)
    t = torch.randn(2, 3, 8, dtype=torch.float64, requires_grad=True)
    p = poses(2).requires_grad_()
    w = torch.randn(2, 3, 8, dtype=torch.float64)
    central_difference_check(lambda: (block(t, p) * w).sum(), [*block.parameters(), t, p])


def test_pose_token_concat():
    layer = PoseToken(16)
    t = torch.randn(2, 5, 16)
    before = t.clone()
    out = pose_token_concat(t, poses(2, dtype=torch.float32), layer)
    assert out.shape == (2, 6, 16)
    assert torch.equal(out[:, :5], before)
    assert torch.linalg.norm(out[0, 5] - out[1, 5]) > 1e-3


def test_pose_token_gradients():
    layer = PoseToken(6).double()
    t = torch.randn(2, 3, 6, dtype=torch.float64)
    p = poses(2).requires_grad_()
    w = torch.randn(2, 4, 6, dtype=torch.float64)
    central_difference_check(lambda: (layer(t, p) * w).sum(), [*layer.parameters(), p])

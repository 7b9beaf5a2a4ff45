import numpy as np
import pytest
import torch

from helpers import central_difference_check, random_pose7
from poseloc.model import (
    VARIANTS,
    ModelSpec,
    adapter_forward,
    assemble_model,
    backbone_forward,
    param_count,
    param_paths,
)
from poseloc.synthworld import MODALITIES, SHAPES


def frames(B, modality, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(B, *SHAPES[modality], generator=g, dtype=dtype)
    return x * 10 if modality == "depth_like" else x


def batch(B=2, nodes=3, seed=0, dtype=torch.float32):
    b = {m: frames(B * nodes, m, seed + i, dtype).reshape(B, nodes, *SHAPES[m]) for i, m in enumerate(MODALITIES)}
    b["pose"] = torch.tensor(random_pose7(np.random.default_rng(seed), B * nodes), dtype=dtype).reshape(B, nodes, 7)
    return b


@pytest.fixture(scope="module")
def models():
    return {v: assemble_model(ModelSpec(variant=v)) for v in VARIANTS}


def test_image_backbones_give_twelve_tokens(models):
    m = models["unconditional"]
    for mod in ("camera_like", "depth_like"):
        assert backbone_forward(m, frames(2, mod), mod).shape == (2, 12, 64)
    assert backbone_forward(m, frames(2, "radar_like"), "radar_like").shape == (2, 16, 64)


def test_backbone_shape_mismatch(models):
    with pytest.raises(ValueError):
        backbone_forward(models["unconditional"], torch.zeros(2, 32, 32), "camera_like")


def test_backbone_deterministic(models):
    m = models["cln"]
    x = frames(3, "camera_like")
    assert torch.equal(backbone_forward(m, x, "camera_like"), backbone_forward(m, x, "camera_like"))


def test_fresh_cln_backbone_matches_plain(models):
    plain, cln = models["unconditional"], assemble_model(ModelSpec(variant="cln"))
    own = cln.state_dict()
    for k, v in plain.state_dict().items():
        if k.startswith("backbones.") and k in own and own[k].shape == v.shape:
            own[k] = v.clone()
    cln.load_state_dict(own)
    pose = torch.tensor(random_pose7(np.random.default_rng(1), 4), dtype=torch.float32)
    for mod in MODALITIES:
        x = frames(4, mod)
        a = backbone_forward(plain, x, mod, pose)
        b = backbone_forward(cln, x, mod, pose)
        assert (a - b).abs().max() <= 1e-5


def test_adapter_dims(models):
    m = models["unconditional"]
    for mod in MODALITIES:
        tokens = backbone_forward(m, frames(2, mod), mod)
        out = adapter_forward(m, tokens, mod)
        assert out.shape == (2, 256)
        assert torch.count_nonzero(adapter_forward(m, torch.zeros_like(tokens), mod)) == 0
    with pytest.raises(ValueError):
        adapter_forward(m, torch.zeros(2, 0, 64), "camera_like")


def test_adapter_gradients():
    from poseloc.model import Adapter

    torch.manual_seed(0)
    a = Adapter(3, 4, 5).double()
    t = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(2, 5, dtype=torch.float64)
    central_difference_check(lambda: (a(t) * w).sum(), [*a.parameters(), t])


@pytest.mark.parametrize("variant", VARIANTS)
def test_fuse_permutation_invariance(models, variant):
    m = models[variant].double()
    g = torch.Generator().manual_seed(2)
    v = torch.randn(3, 9, 256, generator=g, dtype=torch.float64)
    p = torch.tensor(random_pose7(np.random.default_rng(2), 27)).reshape(3, 9, 7)
    mask = torch.rand(3, 9, generator=g) > 0.3
    mask[:, 0] = True
    perm = torch.randperm(9, generator=g)
    with torch.no_grad():
        a = m.fuse_and_predict(v, p, mask)
        b = m.fuse_and_predict(v[:, perm], p[:, perm], mask[:, perm])
    m.float()
    assert (a - b).abs().max() <= 1e-6


def test_fuse_single_token_and_empty(models):
    m = models["condconv"]
    v = torch.randn(2, 1, 256)
    p = torch.tensor(random_pose7(np.random.default_rng(3), 2), dtype=torch.float32)[:, None]
    with torch.no_grad():
        assert torch.isfinite(m.fuse_and_predict(v, p)).all()
    with pytest.raises(ValueError):
        m.fuse_and_predict(torch.randn(2, 3, 256), p.expand(2, 3, 7), torch.zeros(2, 3, dtype=torch.bool))


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_smoke(models, variant):
    m = models[variant].eval()
    with torch.no_grad():
        for s in range(100 // len(VARIANTS) + 1):
            out = m(batch(2, 3, seed=s))
            assert out.shape == (2, 2) and torch.isfinite(out).all()


def test_variant_wiring(models):
    paths = {v: param_paths(models[v]) for v in VARIANTS}
    extra = paths["condconv"] - paths["unconditional"]
    assert extra and all(p.startswith("condconv.") for p in extra)
    assert paths["unconditional"] - paths["condconv"] == set()
    assert not any(p.startswith("condconv.") for p in paths["cln"])
    assert not any(p.startswith("cln_expand.") for p in paths["condconv"])
    both = paths["condconv_plus_cln"]
    assert any(p.startswith("condconv.") for p in both) and any(p.startswith("cln_expand.") for p in both)
    assert param_count(models["cln"]) < param_count(models["unconditional"])


def test_unknown_variant():
    with pytest.raises(ValueError):
        ModelSpec(variant="film")


def test_same_seed_same_init():
    a = assemble_model(ModelSpec(variant="condconv", seed=4)).state_dict()
    b = assemble_model(ModelSpec(variant="condconv", seed=4)).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
    c = assemble_model(ModelSpec(variant="condconv", seed=5)).state_dict()
    assert not all(torch.equal(a[k], c[k]) for k in a)


@pytest.mark.parametrize("variant", ["condconv", "cln", "pose_token"])
def test_end_to_end_gradient(variant):
    m = assemble_model(ModelSpec(variant=variant)).double()
    # wake up zero-initialized heads so their gradients are non-trivial
    for name, p in m.named_parameters():
        if "head.weight" in name and "cln" not in name and p.abs().max() == 0:
            torch.nn.init.normal_(p, std=0.1)
    if m.spec.uses_cln:
        for mod in m.modules():
            if type(mod).__name__ == "CondLayerNorm":
                torch.nn.init.normal_(mod.head.weight, std=0.1)
    b = batch(2, 3, seed=7, dtype=torch.float64)
    target = torch.tensor([[2.0, 1.0], [5.0, 3.0]], dtype=torch.float64)

    def loss():
        return ((m(b) - target) ** 2).sum(-1).mean()

    params = [p for p in m.parameters()]
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(0)
    picks = rng.choice(sizes.sum(), 20, replace=False)
    bounds = np.cumsum(sizes)
    an = torch.autograd.grad(loss(), params)
    for flat in picks:
        i = int(np.searchsorted(bounds, flat, side="right"))
        j = int(flat - (bounds[i - 1] if i else 0))
        p = params[i].data.view(-1)
        old = p[j].item()
        eps = 1e-6
        with torch.no_grad():
            p[j] = old + eps
            up = loss().item()
            p[j] = old - eps
            down = loss().item()
            p[j] = old
        fd = (up - down) / (2 * eps)
        np.testing.assert_allclose(an[i].view(-1)[j].item(), fd, rtol=1e-3, atol=1e-7)

"""Pose-conditioned layers.

All conditioning starts from a node's 7-value pose vector (unit quaternion +
arena-normalized position). ``PoseExpand`` maps it to whatever a layer needs:
kernel weights and biases for ``CondConv1d``, or a 16-d embedding from which
every ``CondLayerNorm`` draws its own (gamma, beta) scalar pair.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

POSE_DIM = 7
CLN_EMBED_DIM = 16
NORM_EPS = 1e-5

_ACTIVATIONS = {
    "identity": nn.Identity,
    "relu": nn.ReLU,
    "gelu": nn.GELU,
    "tanh": nn.Tanh,
}


def activation(name: str) -> nn.Module:
    try:
        return _ACTIVATIONS[name]()
    except KeyError:
        raise ValueError(f"unknown activation {name!r}") from None


class PoseExpand(nn.Module):
    """Stack of linear layers lifting the 7-value pose to ``out_dim``."""

    def __init__(self, out_dim: int, hidden: Sequence[int] = (64, 64), act: str = "relu",
                 zero_init_last: bool = False):
        super().__init__()
        dims = [POSE_DIM, *hidden]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), activation(act)]
        self.body = nn.Sequential(*layers)
        self.last = nn.Linear(dims[-1], out_dim)
        self.out_dim = out_dim
        if zero_init_last:
            nn.init.zeros_(self.last.weight)
            nn.init.zeros_(self.last.bias)

    def forward(self, pose7: torch.Tensor) -> torch.Tensor:
        return self.last(self.body(pose7))


def pose_expand(pose7: torch.Tensor, net: PoseExpand) -> torch.Tensor:
    return net(pose7)


# --------------------------------------------------------------------------- #
# conditional 1D convolution
# --------------------------------------------------------------------------- #


def conv1d_same(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-entry 1D convolution with zero same-padding.

    x: (B, M, N) vectors, weight: (B, K, S), bias: (B, K) -> (B, M, K, N) with
    ``y[b, m, k, n] = bias[b, k] + sum_s weight[b, k, s] * x[b, m, n + s - S//2]``.
    Every vector of entry ``b`` uses that entry's kernels.
    """
    S = weight.shape[-1]
    if S % 2 != 1:
        raise ValueError("kernel size must be odd")
    xp = F.pad(x, (S // 2, S // 2))
    win = xp.unfold(-1, S, 1)  # (B, M, N, S)
    return torch.einsum("bmns,bks->bmkn", win, weight) + bias[:, None, :, None]


def cond_conv1d(features: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
                act: nn.Module | None = None) -> torch.Tensor:
    """Convolve each of M feature vectors with K generated kernels, then reduce
    the K outputs by a mean (after ``act``) back to shape (B, M, N)."""
    if not torch.isfinite(features).all():
        raise ValueError("non-finite features passed to cond_conv1d")
    y = conv1d_same(features, weight, bias)
    if act is not None:
        y = act(y)
    return y.mean(dim=2)


class CondConv1d(nn.Module):
    """Convolution whose K kernels of size S and K biases come from the pose."""

    def __init__(self, kernels: int = 8, size: int = 5, hidden: Sequence[int] = (64, 64),
                 act: str = "gelu", init_scale: float = 0.05):
        super().__init__()
        if size % 2 != 1 or kernels < 1:
            raise ValueError("need odd kernel size and K >= 1")
        self.K, self.S = kernels, size
        self.expand = PoseExpand(kernels * size + kernels, hidden)
        self.act = activation(act)
        # start close to a centred delta kernel so the layer begins near act(x)
        with torch.no_grad():
            self.expand.last.weight.mul_(init_scale)
            b = torch.zeros(kernels, size)
            b[:, size // 2] = 1.0
            self.expand.last.bias.copy_(torch.cat([b.flatten(), torch.zeros(kernels)]))
        self.override: tuple[torch.Tensor, torch.Tensor] | None = None

    def kernels(self, pose7: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.override is not None:
            w, b = self.override
            B = pose7.shape[0]
            return w.expand(B, -1, -1), b.expand(B, -1)
        out = self.expand(pose7)
        w = out[:, : self.K * self.S].reshape(-1, self.K, self.S)
        return w, out[:, self.K * self.S :]

    def forward(self, features: torch.Tensor, pose7: torch.Tensor) -> torch.Tensor:
        """features: (B, M, N) vectors of one node each; pose7: (B, 7)."""
        w, b = self.kernels(pose7)
        return cond_conv1d(features, w, b, self.act)


# --------------------------------------------------------------------------- #
# normalization
# --------------------------------------------------------------------------- #


def normalize(x: torch.Tensor, ndim: int = 1, eps: float = NORM_EPS) -> torch.Tensor:
    """(x - mean) / (std + eps) over the trailing ``ndim`` dims."""
    # one flat reduction axis is markedly faster on CPU than a multi-dim var_mean
    flat = x.flatten(x.dim() - ndim) if ndim > 1 else x
    centred = flat - flat.mean(-1, keepdim=True)
    var = (centred * centred).mean(-1, keepdim=True)
    # clamp keeps d(sqrt)/dvar finite on constant inputs
    return (centred / (var.clamp_min(1e-20).sqrt() + eps)).view_as(x)


def cond_layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, ndim: int = 1,
                    eps: float = NORM_EPS) -> torch.Tensor:
    """Normalize each entry over its trailing ``ndim`` dims, then scale and
    shift by that entry's scalar ``gamma[i]``, ``beta[i]``.

    ``gamma``/``beta`` have the leading batch shape of ``x`` minus the
    normalized dims, or just (B,) which is broadcast over everything else.
    """
    xhat = normalize(x, ndim, eps)
    shape = gamma.shape + (1,) * (x.dim() - gamma.dim())
    return gamma.reshape(shape) * xhat + beta.reshape(shape)


class PlainNorm(nn.Module):
    """Layer normalization over the trailing ``ndim`` dims with an optional
    learnable per-channel affine. ``channel_dim`` picks which axis carries
    the affine (-1 for tokens, -3 for (C, H, W) maps)."""

    def __init__(self, channels: int, ndim: int = 1, channel_dim: int = -1, affine: bool = True):
        super().__init__()
        self.channels, self.ndim, self.channel_dim = channels, ndim, channel_dim
        if affine:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def forward(self, x: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        y = normalize(x, self.ndim)
        if self.weight is None:
            return y
        shape = [1] * x.dim()
        shape[self.channel_dim] = self.channels
        return y * self.weight.view(shape) + self.bias.view(shape)


class CondLayerNorm(nn.Module):
    """Normalization whose scalar gamma/beta come from the shared pose
    embedding. The head is zero-initialized: gamma = 1 + h0, beta = h1, so a
    fresh layer reproduces plain (affine-free) normalization."""

    def __init__(self, ndim: int = 1, embed_dim: int = CLN_EMBED_DIM):
        super().__init__()
        self.ndim = ndim
        self.head = nn.Linear(embed_dim, 2)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def gamma_beta(self, cond: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.head(cond)
        return 1.0 + h[:, 0], h[:, 1]

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond is None:
            raise ValueError("CondLayerNorm needs a pose embedding")
        g, b = self.gamma_beta(cond)
        return cond_layer_norm(x, g, b, self.ndim)


# --------------------------------------------------------------------------- #
# comparison mechanisms
# --------------------------------------------------------------------------- #


class AttentionCore(nn.Module):
    """softmax(q k^T / sqrt(d)) v over heads; holds no parameters."""

    def __init__(self, heads: int):
        super().__init__()
        self.heads = heads

    def forward(self, q, k, v, key_mask: torch.Tensor | None = None):
        B, Tq, D = q.shape
        Tk = k.shape[1]
        h = self.heads
        q = q.view(B, Tq, h, D // h).transpose(1, 2)
        k = k.view(B, Tk, h, D // h).transpose(1, 2)
        v = v.view(B, Tk, h, D // h).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / (D // h) ** 0.5
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        out = att.softmax(-1) @ v
        return out.transpose(1, 2).reshape(B, Tq, D)


class PoseCrossAttention(nn.Module):
    """Tokens attend to a single key/value derived from the pose. The output
    projection starts at zero, so the block is an exact residual identity at
    initialization."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.embed = nn.Linear(POSE_DIM, dim)
        self.norm = PlainNorm(dim)
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.core = AttentionCore(heads)
        nn.init.zeros_(self.o.weight)
        nn.init.zeros_(self.o.bias)

    def forward(self, tokens: torch.Tensor, pose7: torch.Tensor) -> torch.Tensor:
        p = self.embed(pose7)[:, None, :]
        att = self.core(self.q(self.norm(tokens)), self.k(p), self.v(p))
        return tokens + self.o(att)


def pose_cross_attention(tokens: torch.Tensor, pose7: torch.Tensor, block: PoseCrossAttention):
    return block(tokens, pose7)


class PoseToken(nn.Module):
    """Linear pose embedding appended as one extra token."""

    def __init__(self, dim: int):
        super().__init__()
        self.embed = nn.Linear(POSE_DIM, dim)

    def forward(self, tokens: torch.Tensor, pose7: torch.Tensor) -> torch.Tensor:
        return torch.cat([tokens, self.embed(pose7)[:, None, :]], dim=1)


def pose_token_concat(tokens: torch.Tensor, pose7: torch.Tensor, layer: PoseToken):
    return layer(tokens, pose7)

"""Backbones, adapters, fusion encoder and output head, wired per variant.

Data flow for one frame::

    per node, per modality: frame -> backbone -> tokens -> adapter -> 256-d vector
    [condconv]: each node's vectors pass through CondConv1d with that node's pose
    all vectors -> fusion transformer encoder (no positional encoding)
                -> masked mean pool -> MLP head -> world (x, y)

Backbones and adapters are shared across nodes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .condlayers import (
    CLN_EMBED_DIM,
    AttentionCore,
    CondConv1d,
    CondLayerNorm,
    PlainNorm,
    PoseCrossAttention,
    PoseExpand,
    PoseToken,
    activation,
)
from .geometry import Arena
from .synthworld import FAR_PLANE, MODALITIES, SHAPES

VARIANTS = ("condconv", "cln", "condconv_plus_cln", "unconditional", "cross_attention", "pose_token")


@dataclass
class ModelSpec:
    variant: str = "condconv"
    adapter_dim: int = 256
    modalities: tuple = MODALITIES
    image_backbone: str = "resnet"  # or "transformer"
    resnet_channels: tuple = (8, 16, 32, 64)
    patch: int = 8
    token_dim: int = 64
    backbone_layers: int = 2
    backbone_heads: int = 4
    backbone_ffn: int = 128
    fusion_layers: int = 2
    fusion_heads: int = 4
    fusion_ffn: int = 512
    head_hidden: int = 128
    condconv_kernels: int = 8
    condconv_size: int = 5
    condconv_hidden: tuple = (64, 64)
    condconv_activation: str = "gelu"
    cln_hidden: tuple = (16,)
    arena: dict = field(default_factory=lambda: Arena().to_dict())
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        for name in ("modalities", "resnet_channels", "condconv_hidden", "cln_hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        if self.image_backbone not in ("resnet", "transformer"):
            raise ValueError(f"unknown image backbone {self.image_backbone!r}")

    @property
    def uses_condconv(self) -> bool:
        return self.variant in ("condconv", "condconv_plus_cln")

    @property
    def uses_cln(self) -> bool:
        return self.variant in ("cln", "condconv_plus_cln")

    def backbone_kind(self, modality: str) -> str:
        return "transformer" if modality == "radar_like" else self.image_backbone

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------- #
# building blocks
# --------------------------------------------------------------------------- #


def make_norm(kind: str, channels: int, ndim: int, channel_dim: int) -> nn.Module:
    if kind == "cln":
        return CondLayerNorm(ndim)
    return PlainNorm(channels, ndim, channel_dim, affine=(kind == "plain"))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, norm: str):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, 2, 1, bias=False)
        self.norm1 = make_norm(norm, cout, 3, -3)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = make_norm(norm, cout, 3, -3)
        self.skip = nn.Conv2d(cin, cout, 1, 2, bias=False)

    def forward(self, x, cond=None):
        y = F.relu(self.norm1(self.conv1(x), cond))
        y = self.norm2(self.conv2(y), cond)
        return F.relu(y + self.skip(x))


class ResNetBackbone(nn.Module):
    """Four stride-2 residual blocks; 48x64 -> 3x4 grid -> 12 tokens."""

    def __init__(self, channels=(8, 16, 32, 64), norm: str = "plain"):
        super().__init__()
        dims = [1, *channels]
        self.blocks = nn.ModuleList(ResBlock(a, b, norm) for a, b in zip(dims[:-1], dims[1:]))
        self.out_dim = channels[-1]

    def forward(self, x, pose7=None, cond=None):
        for blk in self.blocks:
            x = blk(x, cond)
        return x.flatten(2).transpose(1, 2)  # (B, H*W, C)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        self.core = AttentionCore(heads)

    def forward(self, x, key_mask=None):
        return self.o(self.core(self.q(x), self.k(x), self.v(x), key_mask))


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer with an optional pose
    cross-attention block between self-attention and the MLP."""

    def __init__(self, dim: int, heads: int, ffn: int, norm: str = "plain", cross: bool = False):
        super().__init__()
        self.norm1 = make_norm(norm, dim, 1, -1)
        self.attn = SelfAttention(dim, heads)
        self.cross = PoseCrossAttention(dim, heads) if cross else None
        self.norm2 = make_norm(norm, dim, 1, -1)
        self.fc1 = nn.Linear(dim, ffn)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(ffn, dim)

    def forward(self, x, key_mask=None, pose7=None, cond=None):
        x = x + self.attn(self.norm1(x, cond), key_mask)
        if self.cross is not None:
            x = self.cross(x, pose7)
        return x + self.fc2(self.act(self.fc1(self.norm2(x, cond))))


class PositionalEmbedding(nn.Module):
    def __init__(self, tokens: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(tokens, dim) * 0.02)

    def forward(self, x):
        return x + self.weight


class TransformerBackbone(nn.Module):
    """Non-overlapping patches -> linear embedding -> encoder stack."""

    def __init__(self, shape, patch: int, dim: int, layers: int, heads: int, ffn: int,
                 norm: str = "plain", pose: str | None = None):
        super().__init__()
        H, W = shape
        if H % patch or W % patch:
            raise ValueError(f"patch {patch} does not tile {shape}")
        self.patch = patch
        self.n_tokens = (H // patch) * (W // patch)
        self.embed = nn.Linear(patch * patch, dim)
        self.pos = PositionalEmbedding(self.n_tokens, dim)
        self.pose_token = PoseToken(dim) if pose == "token" else None
        self.layers = nn.ModuleList(
            EncoderLayer(dim, heads, ffn, norm, cross=(pose == "cross")) for _ in range(layers)
        )
        self.norm = make_norm(norm, dim, 1, -1)
        self.out_dim = dim

    def forward(self, x, pose7=None, cond=None):
        p = self.patch
        B = x.shape[0]
        t = F.unfold(x, p, stride=p).transpose(1, 2)  # (B, T, p*p)
        t = self.pos(self.embed(t))
        if self.pose_token is not None:
            t = self.pose_token(t, pose7)
        for layer in self.layers:
            t = layer(t, None, pose7, cond)
        t = self.norm(t, cond)
        return t[:, : self.n_tokens].reshape(B, self.n_tokens, -1)


class Adapter(nn.Module):
    """Flatten the token grid (keeps spatial layout) and project to ``dim``."""

    def __init__(self, n_tokens: int, token_dim: int, dim: int = 256, bias: bool = False):
        super().__init__()
        self.proj = nn.Linear(n_tokens * token_dim, dim, bias=bias)

    def forward(self, tokens):
        return self.proj(tokens.flatten(1))


def preprocess(frame: torch.Tensor, modality: str) -> torch.Tensor:
    """Fixed input scaling; depth becomes 0 at the far plane, larger when near."""
    if modality == "depth_like":
        return 1.0 - frame / FAR_PLANE
    return frame


def build_backbone(spec: ModelSpec, modality: str, norm: str, pose: str | None = None) -> nn.Module:
    kind = spec.backbone_kind(modality)
    if kind == "resnet":
        return ResNetBackbone(spec.resnet_channels, norm)
    return TransformerBackbone(
        SHAPES[modality], spec.patch, spec.token_dim, spec.backbone_layers, spec.backbone_heads,
        spec.backbone_ffn, norm, pose,
    )


def backbone_tokens(spec: ModelSpec, modality: str) -> tuple[int, int]:
    """(token count, token width) produced by a modality's backbone."""
    H, W = SHAPES[modality]
    if spec.backbone_kind(modality) == "resnet":
        n = len(spec.resnet_channels)
        return (H >> n) * (W >> n), spec.resnet_channels[-1]
    return (H // spec.patch) * (W // spec.patch), spec.token_dim


# --------------------------------------------------------------------------- #
# full model
# --------------------------------------------------------------------------- #


class LocalizationModel(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        norm = "cln" if spec.uses_cln else "plain"
        pose = {"cross_attention": "cross", "pose_token": "token"}.get(spec.variant)
        self.backbones = nn.ModuleDict()
        self.adapters = nn.ModuleDict()
        for m in spec.modalities:
            self.backbones[m] = build_backbone(spec, m, norm, pose if spec.backbone_kind(m) == "transformer" else None)
            n, d = backbone_tokens(spec, m)
            self.adapters[m] = Adapter(n, d, spec.adapter_dim)
        self.cln_expand = (
            PoseExpand(CLN_EMBED_DIM, spec.cln_hidden) if spec.uses_cln else None
        )
        self.condconv = (
            CondConv1d(spec.condconv_kernels, spec.condconv_size, spec.condconv_hidden,
                       spec.condconv_activation)
            if spec.uses_condconv else None
        )
        D = spec.adapter_dim
        self.fusion = nn.ModuleList(
            EncoderLayer(D, spec.fusion_heads, spec.fusion_ffn) for _ in range(spec.fusion_layers)
        )
        self.fusion_norm = PlainNorm(D)
        self.head = nn.Sequential(nn.Linear(D, spec.head_hidden), activation("gelu"), nn.Linear(spec.head_hidden, 2))
        arena = Arena.from_dict(spec.arena)
        self.register_buffer("out_offset", torch.tensor(arena.lower[:2] + arena.extents[:2] / 2, dtype=torch.float32))
        self.register_buffer("out_scale", torch.tensor(arena.extents[:2] / 2, dtype=torch.float32))

    # -- stages ------------------------------------------------------------- #

    def encode(self, frame: torch.Tensor, modality: str, pose7: torch.Tensor) -> torch.Tensor:
        """One modality of B node-observations -> (B, adapter_dim)."""
        cond = self.cln_expand(pose7) if self.cln_expand is not None else None
        x = preprocess(frame, modality)
        if x.dim() == 3:
            x = x[:, None]
        tokens = self.backbones[modality](x, pose7, cond)
        return self.adapters[modality](tokens)

    def fuse_and_predict(self, vectors: torch.Tensor, token_pose: torch.Tensor,
                         token_mask: torch.Tensor | None = None) -> torch.Tensor:
        """vectors: (B, T, D) modality vectors, token_pose: (B, T, 7) pose of the
        node each vector came from, token_mask: (B, T) bool, True = present."""
        B, T, D = vectors.shape
        if token_mask is None:
            token_mask = torch.ones(B, T, dtype=torch.bool, device=vectors.device)
        if not bool(token_mask.any(dim=1).all()):
            raise ValueError("every entry needs at least one modality vector")
        x = vectors
        if self.condconv is not None:
            x = self.condconv(x.reshape(B * T, 1, D), token_pose.reshape(B * T, -1)).reshape(B, T, D)
        for layer in self.fusion:
            x = layer(x, token_mask)
        x = self.fusion_norm(x)
        w = token_mask.to(x.dtype)[..., None]
        pooled = (x * w).sum(1) / w.sum(1)
        return self.out_offset.to(x.dtype) + self.out_scale.to(x.dtype) * self.head(pooled)

    def forward(self, batch: dict) -> torch.Tensor:
        """batch: modality -> (B, nodes, H, W); "pose": (B, nodes, 7);
        optional "mask": (B, modalities) or (B, nodes, modalities) bool."""
        pose = batch["pose"]
        B, Nn = pose.shape[:2]
        flat_pose = pose.reshape(B * Nn, -1)
        vecs = []
        for m in self.spec.modalities:
            f = batch[m]
            vecs.append(self.encode(f.reshape(B * Nn, *f.shape[2:]), m, flat_pose).reshape(B, Nn, -1))
        vectors = torch.stack(vecs, dim=2)  # (B, nodes, M, D)
        M = len(vecs)
        token_pose = pose[:, :, None, :].expand(B, Nn, M, pose.shape[-1])
        mask = batch.get("mask")
        if mask is None:
            mask = torch.ones(B, Nn, M, dtype=torch.bool, device=pose.device)
        elif mask.dim() == 2:
            mask = mask[:, None, :].expand(B, Nn, M)
        return self.fuse_and_predict(
            vectors.reshape(B, Nn * M, -1), token_pose.reshape(B, Nn * M, -1), mask.reshape(B, Nn * M)
        )


def assemble_model(spec: ModelSpec) -> LocalizationModel:
    """Build a variant with deterministic initialization from ``spec.seed``."""
    if not isinstance(spec, ModelSpec):
        spec = ModelSpec.from_dict(spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(spec.seed)
        return LocalizationModel(spec)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def param_paths(model: nn.Module) -> set[str]:
    return {n for n, _ in model.named_parameters()}


def backbone_forward(model: LocalizationModel, frame: torch.Tensor, modality: str,
                     pose7: torch.Tensor | None = None) -> torch.Tensor:
    """Backbone tokens for a batch of single-node frames (B, H, W)."""
    if pose7 is None:
        pose7 = torch.zeros(frame.shape[0], 7, dtype=frame.dtype)
        pose7[:, 0] = 1.0
    cond = model.cln_expand(pose7) if model.cln_expand is not None else None
    x = preprocess(frame, modality)
    if x.dim() == 3:
        x = x[:, None]
    expected = SHAPES[modality]
    if tuple(x.shape[-2:]) != tuple(expected):
        raise ValueError(f"{modality} frame must be {expected}, got {tuple(x.shape[-2:])}")
    return model.backbones[modality](x, pose7, cond)


def adapter_forward(model: LocalizationModel, tokens: torch.Tensor, modality: str) -> torch.Tensor:
    if tokens.shape[1] == 0:
        raise ValueError("adapter needs at least one token")
    return model.adapters[modality](tokens)


def numpy_pose_batch(poses: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(np.asarray(poses), dtype=dtype)

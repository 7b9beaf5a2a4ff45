"""Training: backbone pretraining, sensor dropout, early stopping."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .condlayers import activation
from .data import SplitData, to_torch
from .evaluation import frame_errors_cm, predict
from .model import LocalizationModel, ModelSpec, build_backbone, backbone_tokens, Adapter, preprocess
from .synthworld import MODALITIES

log = logging.getLogger(__name__)

LOCAL_SCALE = 4.0  # meters; local-coordinate regression targets are divided by this


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    schedule: str = "cosine"  # or "constant"
    max_epochs: int = 10
    steps_per_epoch: int = 100
    dropout_p: float = 0.5
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    pretrain: bool = True
    pretrain_steps: int = 300
    pretrain_batch_size: int = 64
    pretrain_view: int = 0
    patience: int = 1000
    val_stride: int = 5
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    stop_below_cm: float | None = None  # end early once validation error drops below this

    def __post_init__(self):
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if len(self.seeds) < 1:
            raise ValueError("need at least one seed")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------- #
# sensor dropout
# --------------------------------------------------------------------------- #


def apply_sensor_dropout(batch_size: int, n_modalities: int, p: float,
                         rng: np.random.Generator) -> np.ndarray:
    """(B, M) keep-mask. Each modality is dropped independently with
    probability ``p``; rows that lose every modality are redrawn."""
    if not 0 <= p < 1:
        raise ValueError("p must be in [0, 1)")
    keep = rng.random((batch_size, n_modalities)) >= p
    bad = ~keep.any(axis=1)
    while bad.any():
        keep[bad] = rng.random((int(bad.sum()), n_modalities)) >= p
        bad = ~keep.any(axis=1)
    return keep


# --------------------------------------------------------------------------- #
# single-modality local regressor (pretraining and late-fusion predictor)
# --------------------------------------------------------------------------- #


class LocalRegressor(nn.Module):
    """Backbone + adapter + head predicting the target in the node's frame
    (meters) and a visibility logit."""

    def __init__(self, spec: ModelSpec, modality: str):
        super().__init__()
        self.modality = modality
        self.backbone = build_backbone(spec, modality, norm="none")
        n, d = backbone_tokens(spec, modality)
        self.adapter = Adapter(n, d, spec.adapter_dim)
        self.head = nn.Sequential(nn.Linear(spec.adapter_dim, 128), activation("gelu"), nn.Linear(128, 4))

    def forward(self, frame: torch.Tensor):
        x = preprocess(frame, self.modality)
        if x.dim() == 3:
            x = x[:, None]
        out = self.head(self.adapter(self.backbone(x)))
        return out[:, :3] * LOCAL_SCALE, out[:, 3]


def _local_batches(data: SplitData, modality: str, idx: np.ndarray):
    b = data.get(idx)
    local, vis = data.local_targets(b)
    mi = MODALITIES.index(modality)
    frames = b[modality].reshape(-1, *b[modality].shape[2:])
    return frames, local.reshape(-1, 3), vis[..., mi].reshape(-1)


def train_local_regressor(spec: ModelSpec, modality: str, data: SplitData, steps: int,
                          batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> LocalRegressor:
    """Fit a single-modality regressor on every node of ``data``. Coordinates
    are only supervised where the target is visible to that modality."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = LocalRegressor(spec, modality)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / max(steps, 1))))
    n_frames = max(1, batch_size // data.n_nodes)
    net.train()
    for step in range(steps):
        frames, local, vis = _local_batches(data, modality, rng.integers(0, len(data), n_frames))
        x = torch.from_numpy(frames)
        y = torch.from_numpy(local).float()
        v = torch.from_numpy(vis)
        pred, logit = net(x)
        coord = ((pred - y) ** 2).sum(-1)
        loss = (coord * v).sum() / v.sum().clamp(min=1) + 0.1 * nn.functional.binary_cross_entropy_with_logits(
            logit, v.float()
        )
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"local regressor {modality} loss {loss.item()} at step {step}")
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(net.parameters(), 1.0)
        opt.step()
        sched.step()
    net.eval()
    return net


def pretrain_backbone(modality: str, data: SplitData, spec: ModelSpec, steps: int = 300,
                      batch_size: int = 64, seed: int = 0) -> dict:
    """Pretrain one modality's backbone on a single training view and return
    its weights under the fused model's parameter names.

    Uses affine-free normalization so the weights drop into any variant: a
    plain-norm layer at identity affine and a zero-initialized CLN head
    compute the same function. The regressor's adapter and head stay behind.
    """
    if len(data.view_ids) != 1:
        raise ValueError("pretraining draws from exactly one view")
    net = train_local_regressor(spec, modality, data, steps, batch_size, seed=seed)
    return {f"backbones.{modality}.{k}": v for k, v in net.backbone.state_dict().items()}


def load_pretrained(model: LocalizationModel, state: dict) -> list:
    """Copy pretrained tensors into ``model``; returns the keys loaded."""
    own = model.state_dict()
    loaded = []
    for k, v in state.items():
        if k in own and own[k].shape == v.shape:
            own[k].copy_(v)
            loaded.append(k)
    model.load_state_dict(own)
    return loaded


# --------------------------------------------------------------------------- #
# main training loop
# --------------------------------------------------------------------------- #


def localization_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared Euclidean distance in m^2."""
    return ((pred - target) ** 2).sum(-1).mean()


@dataclass
class TrainResult:
    model: LocalizationModel
    curves: list  # (step, train_loss, val_error_cm)
    best_epoch: int
    best_val_cm: float
    seconds: float


def validation_error_cm(model, data: SplitData) -> float:
    pred, gt = predict(model, data)
    return float(frame_errors_cm(pred, gt).mean())


def train(model: LocalizationModel, train_data: SplitData, val_data: SplitData | None,
          config: TrainConfig, seed: int = 0, curves_path=None) -> TrainResult:
    """Minimize MSE on world (x, y); validate each epoch and restore the best
    epoch's parameters."""
    t0 = time.time()
    torch.manual_seed(seed)
    rng = np.random.default_rng([seed, 0xDA7A])
    dtype = next(model.parameters()).dtype
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    total = config.max_epochs * config.steps_per_epoch
    if config.schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / max(total, 1))))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0)
    M = len(model.spec.modalities)
    curves = []
    best = (math.inf, -1, None)
    stale = 0
    step = 0
    for epoch in range(config.max_epochs):
        model.train()
        losses = []
        for _ in range(config.steps_per_epoch):
            idx = rng.integers(0, len(train_data), config.batch_size)
            b = train_data.get(idx)
            b["mask"] = apply_sensor_dropout(len(idx), M, config.dropout_p, rng)
            tb = to_torch(b, dtype, model.spec.modalities)
            pred = model(tb)
            loss = localization_loss(pred, torch.from_numpy(b["target"]).to(dtype))
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at step {step} (epoch {epoch})")
            opt.zero_grad()
            loss.backward()
            if config.grad_clip:
                nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            losses.append(loss.item())
            step += 1
        val = validation_error_cm(model, val_data) if val_data is not None else float(np.mean(losses))
        curves.append((step, float(np.mean(losses)), val))
        log.info("epoch %d step %d loss %.4f val %.2f cm", epoch, step, np.mean(losses), val)
        if val < best[0]:
            best = (val, epoch, copy.deepcopy(model.state_dict()))
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break
        if config.stop_below_cm is not None and val < config.stop_below_cm:
            break
    model.load_state_dict(best[2])
    model.eval()
    if curves_path is not None:
        write_curves(curves_path, curves)
    return TrainResult(model, curves, best[1], best[0], time.time() - t0)


def write_curves(path, curves) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_error_cm"])
        for s, l, v in curves:
            w.writerow([s, f"{l:.8f}", f"{v:.6f}"])

"""Error statistics, CDFs, SSIM view-split checks and overhead accounting."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


# --------------------------------------------------------------------------- #
# localization error
# --------------------------------------------------------------------------- #


def frame_errors_cm(predictions, ground_truths) -> np.ndarray:
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(ground_truths, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"prediction/ground-truth shape mismatch {p.shape} vs {g.shape}")
    return 100.0 * np.linalg.norm(p - g, axis=-1)


def nearest_rank_percentile(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("empty input")
    rank = int(np.ceil(q / 100.0 * v.size))
    return float(v[max(rank, 1) - 1])


def euclidean_error_stats(predictions, ground_truths, grouping=None) -> dict:
    """Per-group error summary in centimeters.

    Returns {group: {"n", "mean", "std", "p50", "p90"}}; without ``grouping``
    everything lands in group ``"all"``.
    """
    err = frame_errors_cm(predictions, ground_truths)
    groups = np.full(len(err), "all", dtype=object) if grouping is None else np.asarray(grouping)
    if len(groups) != len(err):
        raise ValueError("grouping length does not match predictions")
    out = {}
    for g in dict.fromkeys(groups.tolist()):
        e = err[groups == g]
        out[g] = {
            "n": int(e.size),
            "mean": float(e.mean()),
            "std": float(e.std()),
            "p50": nearest_rank_percentile(e, 50),
            "p90": nearest_rank_percentile(e, 90),
        }
    return out


@dataclass
class CDF:
    values: np.ndarray  # sorted unique errors
    fractions: np.ndarray  # P(error <= value)
    p90: float

    def __call__(self, x: float) -> float:
        i = np.searchsorted(self.values, x, side="right")
        return 0.0 if i == 0 else float(self.fractions[i - 1])

    def rows(self):
        return list(zip(self.values.tolist(), self.fractions.tolist()))


def error_cdf(errors) -> CDF:
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("error_cdf needs at least one value")
    vals, counts = np.unique(e, return_counts=True)
    return CDF(vals, np.cumsum(counts) / e.size, nearest_rank_percentile(e, 90))


def per_view_table(per_seed_view_means: dict) -> dict:
    """{seed: {view: mean_cm}} -> {view: (mean, std)} plus "average".

    Std is taken across seeds; the average column averages views per seed
    first, then takes mean/std across seeds.
    """
    seeds = sorted(per_seed_view_means)
    views = list(per_seed_view_means[seeds[0]])
    table = {}
    for v in views:
        x = np.array([per_seed_view_means[s][v] for s in seeds])
        table[v] = (float(x.mean()), float(x.std()))
    avg = np.array([np.mean([per_seed_view_means[s][v] for v in views]) for s in seeds])
    table["average"] = (float(avg.mean()), float(avg.std()))
    return table


# --------------------------------------------------------------------------- #
# SSIM and split validation
# --------------------------------------------------------------------------- #


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def ssim(img_a, img_b) -> float:
    """Mean SSIM over all fully-contained 11x11 Gaussian windows, unit range."""
    a = np.asarray(img_a, dtype=np.float64)
    b = np.asarray(img_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError("images smaller than the SSIM window")
    g = _gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def similarity_matrix(frames_a, frames_b) -> np.ndarray:
    if frames_a is None or frames_b is None or len(frames_a) == 0 or len(frames_b) == 0:
        raise ValueError("view similarity needs one camera frame per node")
    return np.array([[ssim(a, b) for b in frames_b] for a in frames_a])


def view_similarity(frames_a, frames_b) -> float:
    """Max pairwise SSIM between two views' per-node camera frames."""
    return float(similarity_matrix(frames_a, frames_b).max())


@dataclass
class SplitVerdict:
    passed: bool
    max_similarity: float
    worst_pair: tuple
    threshold: float
    pairs: dict = field(default_factory=dict)


def validate_split(manifest: dict, threshold: float = 0.60) -> SplitVerdict:
    """Check every cross-split pair of views against the SSIM threshold."""
    from .geometry import Arena
    from .synthworld import SPLITS, first_camera_frames

    arena = Arena.from_dict(manifest["arena"])
    rate = manifest["rate_hz"]
    frames = {
        v["config_id"]: first_camera_frames(v, arena, rate)
        for s in SPLITS
        for v in manifest["splits"][s]
    }
    ids = {s: [v["config_id"] for v in manifest["splits"][s]] for s in SPLITS}
    pairs = {}
    for i, sa in enumerate(SPLITS):
        for sb in SPLITS[i + 1 :]:
            for a, b in product(ids[sa], ids[sb]):
                pairs[(a, b)] = view_similarity(frames[a], frames[b])
    worst = max(pairs, key=pairs.get)
    return SplitVerdict(pairs[worst] < threshold, pairs[worst], worst, threshold, pairs)


# --------------------------------------------------------------------------- #
# overhead accounting
# --------------------------------------------------------------------------- #


@dataclass
class Overhead:
    params: int
    macs: int
    per_layer: list  # (name, type, params, macs)
    enumerated_params: int

    def as_dict(self):
        return {"params": self.params, "macs": self.macs, "enumerated_params": self.enumerated_params}


def _analytic_params(mod) -> int:
    import torch.nn as nn

    from .condlayers import PlainNorm
    from .model import PositionalEmbedding

    if isinstance(mod, nn.Linear):
        return mod.in_features * mod.out_features + (mod.out_features if mod.bias is not None else 0)
    if isinstance(mod, nn.Conv2d):
        kh, kw = mod.kernel_size
        w = mod.out_channels * (mod.in_channels // mod.groups) * kh * kw
        return w + (mod.out_channels if mod.bias is not None else 0)
    if isinstance(mod, PlainNorm):
        return 2 * mod.channels if mod.weight is not None else 0
    if isinstance(mod, PositionalEmbedding):
        return mod.weight.shape[0] * mod.weight.shape[1]
    return 0


def count_params_and_macs(model, n_nodes: int = 3) -> Overhead:
    """Analytic parameter and multiply-accumulate counts for one frame.

    MAC rules: conv = Cout*Cin*kh*kw per output position; linear = in*out per
    row; attention = 2*Tq*Tk*D (scores and weighted sum); CondConv = K*S*N per
    vector; normalization = one MAC per element for the fused
    ``x*(gamma/sigma) + offset`` plus one more per element when gamma/beta are
    per-channel vectors rather than per-entry scalars.
    """
    import torch
    import torch.nn as nn

    from .condlayers import AttentionCore, CondConv1d, CondLayerNorm, PlainNorm
    from .synthworld import SHAPES

    per_layer = []
    hooks = []

    def hook(name):
        def fn(mod, inputs, output):
            x = inputs[0]
            if isinstance(mod, nn.Linear):
                macs = mod.in_features * mod.out_features * (x.numel() // mod.in_features)
            elif isinstance(mod, nn.Conv2d):
                kh, kw = mod.kernel_size
                macs = (mod.in_channels // mod.groups) * kh * kw * output.numel()
            elif isinstance(mod, PlainNorm):
                macs = x.numel() * (2 if mod.weight is not None else 1)
            elif isinstance(mod, CondLayerNorm):
                macs = x.numel()
            elif isinstance(mod, AttentionCore):
                q, k = inputs[0], inputs[1]
                macs = 2 * q.shape[0] * q.shape[1] * k.shape[1] * q.shape[2]
            elif isinstance(mod, CondConv1d):
                macs = mod.K * mod.S * x.numel()
            else:
                macs = 0
            per_layer.append((name, type(mod).__name__, _analytic_params(mod), int(macs)))

        return fn

    counted = (nn.Linear, nn.Conv2d, PlainNorm, CondLayerNorm, AttentionCore, CondConv1d)
    for name, mod in model.named_modules():
        if isinstance(mod, counted):
            hooks.append(mod.register_forward_hook(hook(name)))
    dtype = next(model.parameters()).dtype
    batch = {m: torch.zeros(1, n_nodes, *SHAPES[m], dtype=dtype) for m in model.spec.modalities}
    pose = torch.zeros(1, n_nodes, 7, dtype=dtype)
    pose[..., 0] = 1.0
    batch["pose"] = pose
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(batch)
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    # parameters are counted once per module, however many times it ran
    analytic = sum(_analytic_params(m) for m in model.modules())
    macs = sum(r[3] for r in per_layer)
    enumerated = sum(p.numel() for p in model.parameters())
    return Overhead(analytic, macs, per_layer, enumerated)


def overhead_table(models: dict, reference: str = "unconditional") -> dict:
    """{variant: Overhead} -> {variant: {params, macs, d_params, d_params_pct, d_macs, d_macs_pct}}."""
    ref = models[reference]
    out = {}
    for name, o in models.items():
        out[name] = {
            "params": o.params,
            "macs": o.macs,
            "d_params": o.params - ref.params,
            "d_params_pct": 100.0 * (o.params - ref.params) / ref.params,
            "d_macs": o.macs - ref.macs,
            "d_macs_pct": 100.0 * (o.macs - ref.macs) / ref.macs,
        }
    return out


# --------------------------------------------------------------------------- #
# model evaluation
# --------------------------------------------------------------------------- #


def predict(model, data, modality_mask=None, batch_size: int = 128):
    """Run ``model`` over every sample of ``data`` (a SplitData).

    ``modality_mask``: sequence of bools over the model's modalities; False
    entries are removed exactly as sensor dropout removes them.
    """
    import torch

    from .data import to_torch

    dtype = next(model.parameters()).dtype
    model.eval()
    preds = []
    with torch.no_grad():
        for s in range(0, len(data), batch_size):
            idx = np.arange(s, min(s + batch_size, len(data)))
            b = data.get(idx)
            if modality_mask is not None:
                b["mask"] = np.tile(np.asarray(modality_mask, dtype=bool), (len(idx), 1))
            preds.append(model(to_torch(b, dtype, model.spec.modalities)).double().numpy())
    return np.concatenate(preds), data.targets()


def evaluate_model(model, data, modality_mask=None, batch_size: int = 128) -> dict:
    """Per-view stats plus pooled stats and raw frame errors."""
    pred, gt = predict(model, data, modality_mask, batch_size)
    views = np.array(data.view_ids, dtype=object)[data.view_of]
    stats = euclidean_error_stats(pred, gt, views)
    pooled = euclidean_error_stats(pred, gt)["all"]
    return {"per_view": stats, "pooled": pooled, "errors_cm": frame_errors_cm(pred, gt), "pred": pred}


def modality_subset_eval(model, data, subset) -> dict:
    subset = list(subset)
    if not subset:
        raise ValueError("modality subset must be non-empty")
    unknown = set(subset) - set(model.spec.modalities)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")
    mask = [m in subset for m in model.spec.modalities]
    return evaluate_model(model, data, mask)

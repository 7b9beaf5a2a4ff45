"""The two pose-conditioning layers on their own, and what they cost.

A conditional 1D convolution generates its kernels from the node pose, so
the same feature vector is filtered differently by differently placed
sensors. Conditional layer normalization rescales and shifts normalized
features by two pose-derived scalars.
"""

# %%
import torch

from poseloc.condlayers import CondConv1d, CondLayerNorm, PoseExpand
from poseloc.evaluation import count_params_and_macs, overhead_table
from poseloc.model import ModelSpec, assemble_model

torch.manual_seed(0)
feats = torch.randn(2, 3, 256)  # two nodes, three modality vectors of 256 each
pose_a = torch.tensor([1.0, 0, 0, 0, 0.1, 0.5, 0.3])
pose_b = torch.tensor([0.0, 0, 0, 1, 0.9, 0.5, 0.3])  # facing the other way
poses = torch.stack([pose_a, pose_b])

conv = CondConv1d(kernels=8, size=5)
w, b = conv.kernels(poses)
print("generated kernels:", tuple(w.shape), "biases:", tuple(b.shape))
same_input = feats[:1].expand(2, -1, -1)
with torch.no_grad():
    out = conv(same_input, poses)
# kernels start near a centred delta, so the pose effect is small before training
print("same features, different poses -> output difference:", float((out[0] - out[1]).abs().mean()))

# %% Conditional layer norm: gamma and beta are per-entry scalars.
embed = PoseExpand(16, hidden=(16,))
cln = CondLayerNorm()
with torch.no_grad():
    cln.head.weight.normal_(0, 0.5)
    gamma, beta = cln.gamma_beta(embed(poses))
    y = cln(feats, embed(poses))
print("gamma", gamma.numpy().round(3), "beta", beta.numpy().round(3))
print("node-0 vectors after CLN, mean:", y.mean(-1)[0].numpy().round(3), "std:", y.std(-1, unbiased=False)[0].numpy().round(3))

# %% Parameter and MAC overhead against the unconditional model.
counts = {v: count_params_and_macs(assemble_model(ModelSpec(variant=v)))
          for v in ("unconditional", "condconv", "cln", "condconv_plus_cln", "pose_token", "cross_attention")}
for name, row in overhead_table(counts).items():
    print(f"{name:18s} params {row['params']:>9,d} ({row['d_params_pct']:+.3f}%)  "
          f"MACs {row['macs']:>11,d} ({row['d_macs_pct']:+.3f}%)")

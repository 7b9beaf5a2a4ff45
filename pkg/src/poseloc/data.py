"""Batch access to the frame files of a dataset split."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch

from .geometry import Arena, NodePose, encode_pose
from .synthworld import MODALITIES, TARGET_HEIGHT, in_frustum, in_radar_fov, load_manifest, read_frames


class SplitData:
    """Memory-mapped frames of some views of one split.

    ``views`` selects config ids (default: all views of the split).
    ``time_range`` keeps frames whose position within their trajectory lies in
    [lo, hi) as a fraction of its length, e.g. (0.75, 1.0) for a held-out tail.
    ``stride`` subsamples frames.
    """

    def __init__(self, root, split: str, views=None, time_range=(0.0, 1.0), stride: int = 1,
                 manifest: dict | None = None):
        self.root = Path(root)
        self.manifest = manifest if manifest is not None else load_manifest(self.root)
        self.arena = Arena.from_dict(self.manifest["arena"])
        self.split = split
        all_views = self.manifest["splits"][split]
        if views is not None:
            wanted = list(views)
            by_id = {v["config_id"]: v for v in all_views}
            missing = [w for w in wanted if w not in by_id]
            if missing:
                raise KeyError(f"views {missing} not in split {split}")
            all_views = [by_id[w] for w in wanted]
        self.views = all_views
        self.view_ids = [v["config_id"] for v in all_views]
        self.node_poses = [
            [NodePose.from_dict(p) for p in v["configuration"]["node_poses"]] for v in all_views
        ]
        self.n_nodes = len(self.node_poses[0])
        self.pose7 = np.stack(
            [np.stack([encode_pose(p, self.arena) for p in ps]) for ps in self.node_poses]
        ).astype(np.float32)
        self.records = []
        rows = []
        for vi, v in enumerate(all_views):
            for t in v["trajectories"]:
                rec = read_frames(self.root / t["frame_file"], self.n_nodes)
                n = len(rec)
                lo, hi = int(np.floor(time_range[0] * n)), int(np.floor(time_range[1] * n))
                fi = np.arange(lo, hi, stride)
                rows.append(np.column_stack([np.full(len(fi), vi), np.full(len(fi), len(self.records)), fi]))
                self.records.append(rec)
        self.index = np.concatenate(rows).astype(np.int64)  # (view, file, frame)

    def __len__(self) -> int:
        return len(self.index)

    @property
    def view_of(self) -> np.ndarray:
        return self.index[:, 0]

    def targets(self) -> np.ndarray:
        return np.stack([self.records[f]["target"][i] for _, f, i in self.index])

    def timestamps(self) -> np.ndarray:
        return np.array([self.records[f]["timestamp"][i] for _, f, i in self.index])

    def get(self, idx) -> dict:
        """Numpy batch for sample positions ``idx``."""
        idx = np.asarray(idx)
        rows = self.index[idx]
        out = {m: np.empty((len(idx), self.n_nodes, *self.records[0][m].shape[2:]), np.float32) for m in MODALITIES}
        target = np.empty((len(idx), 2))
        for j, (_, f, i) in enumerate(rows):
            r = self.records[f][i]
            for m in MODALITIES:
                out[m][j] = r[m]
            target[j] = r["target"]
        out["target"] = target
        out["pose"] = self.pose7[rows[:, 0]]
        out["view"] = rows[:, 0]
        return out

    def local_targets(self, batch: dict) -> tuple[np.ndarray, np.ndarray]:
        """Target in each node's local frame, (B, nodes, 3), plus per-modality
        visibility flags (B, nodes, M)."""
        B = len(batch["target"])
        z = self.arena.lower[2] + TARGET_HEIGHT
        world = np.column_stack([batch["target"], np.full(B, z)])
        local = np.empty((B, self.n_nodes, 3))
        vis = np.empty((B, self.n_nodes, len(MODALITIES)), dtype=bool)
        for j in range(B):
            for k, pose in enumerate(self.node_poses[batch["view"][j]]):
                loc = (world[j] - pose.position) @ pose.rotation
                local[j, k] = loc
                cam = in_frustum(loc)
                vis[j, k] = (cam, cam, in_radar_fov(loc))
        return local, vis


def to_torch(batch: dict, dtype=torch.float32, modalities=MODALITIES) -> dict:
    out = {m: torch.from_numpy(np.ascontiguousarray(batch[m])).to(dtype) for m in modalities}
    out["pose"] = torch.from_numpy(batch["pose"]).to(dtype)
    if "mask" in batch:
        out["mask"] = torch.as_tensor(batch["mask"], dtype=torch.bool)
    return out

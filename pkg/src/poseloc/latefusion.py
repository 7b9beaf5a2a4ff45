"""Late-fusion baseline: per-(node, modality) local predictions, a known
local-to-world transform, and a constant-velocity Kalman filter."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import SplitData
from .geometry import NodePose, local_to_world
from .synthworld import MODALITIES

H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])
PSD_TOL = 1e-9


class FilterError(ValueError):
    pass


@dataclass
class Measurement:
    timestamp: float
    position: np.ndarray
    covariance: np.ndarray
    source: tuple = ("?", "?")

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)
        c = np.asarray(self.covariance, dtype=np.float64).reshape(2, 2)
        if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
            raise FilterError("measurement covariance must be symmetric positive definite")
        self.covariance = c


@dataclass
class KalmanState:
    x: np.ndarray  # (x, y, vx, vy)
    P: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(4)
        self.P = np.asarray(self.P, dtype=np.float64).reshape(4, 4)


def _check_psd(P: np.ndarray) -> None:
    if not np.all(np.isfinite(P)) or not np.allclose(P, P.T, atol=1e-9 * max(1.0, np.abs(P).max())):
        raise FilterError("covariance is not symmetric")
    if np.linalg.eigvalsh(P).min() < -PSD_TOL * max(1.0, np.abs(P).max()):
        raise FilterError("covariance is not positive semidefinite")


def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise(dt: float, q: float) -> np.ndarray:
    """Continuous white-acceleration model, intensity ``q`` (m^2/s^3)."""
    a, b, c = dt**3 / 3, dt**2 / 2, dt
    return q * np.array([[a, 0, b, 0], [0, a, 0, b], [b, 0, c, 0], [0, b, 0, c]])


def kalman_predict(state: KalmanState, dt: float, q: float) -> KalmanState:
    if dt < 0:
        raise FilterError("dt must be non-negative")
    _check_psd(state.P)
    F = transition(dt)
    P = F @ state.P @ F.T + process_noise(dt, q)
    return KalmanState(F @ state.x, 0.5 * (P + P.T), state.t + dt)


def kalman_update(state: KalmanState, m: Measurement) -> KalmanState:
    S = H @ state.P @ H.T + m.covariance
    K = np.linalg.solve(S, H @ state.P).T
    x = state.x + K @ (m.position - H @ state.x)
    A = np.eye(4) - K @ H
    P = A @ state.P @ A.T + K @ m.covariance @ K.T  # Joseph form
    return KalmanState(x, 0.5 * (P + P.T), state.t)


def kalman_step(state: KalmanState, dt: float, measurement: Measurement | None, q: float = 1.0) -> KalmanState:
    """Constant-velocity predict over ``dt`` then update on (x, y)."""
    s = kalman_predict(state, dt, q)
    return s if measurement is None else kalman_update(s, measurement)


def initial_state(position, pos_var: float = 4.0, vel_var: float = 1.0, t: float = 0.0) -> KalmanState:
    return KalmanState(np.r_[np.asarray(position, dtype=np.float64)[:2], 0.0, 0.0],
                       np.diag([pos_var, pos_var, vel_var, vel_var]), t)


# --------------------------------------------------------------------------- #
# fusion of local predictions
# --------------------------------------------------------------------------- #


@dataclass
class NoiseModel:
    q: float = 0.5
    r: dict = field(default_factory=lambda: {m: np.eye(2) * 0.05 for m in MODALITIES})
    min_conf: float = 1e-3

    def covariance(self, modality: str, conf: float) -> np.ndarray:
        return self.r[modality] / max(conf, self.min_conf) ** 2


def fuse_track(timestamps, local, conf, node_poses: list[NodePose], noise: NoiseModel,
               modalities=MODALITIES, init_position=None) -> np.ndarray:
    """Kalman-fuse one continuous track.

    local: (T, nodes, M, 3) node-frame predictions; conf: (T, nodes, M) in
    [0, 1] with NaN marking a missing measurement. Returns (T, 2) posterior
    positions in the world frame.
    """
    T = len(timestamps)
    world = np.stack([local_to_world(p, local[:, k]) for k, p in enumerate(node_poses)], axis=1)[..., :2]
    if init_position is None:
        ok = np.isfinite(conf[0])
        init_position = world[0][ok].mean(axis=0) if ok.any() else np.zeros(2)
    state = initial_state(init_position, t=timestamps[0])
    out = np.empty((T, 2))
    for i in range(T):
        dt = 0.0 if i == 0 else timestamps[i] - timestamps[i - 1]
        state = kalman_predict(state, dt, noise.q)
        for k in range(len(node_poses)):
            for j, m in enumerate(modalities):
                c = conf[i, k, j]
                if not np.isfinite(c):
                    continue
                state = kalman_update(state, Measurement(timestamps[i], world[i, k, j], noise.covariance(m, c), (k, m)))
        out[i] = state.x[:2]
    return out


def local_predict(predictor, frames) -> tuple[np.ndarray, np.ndarray]:
    """(n, H, W) frames -> node-local (n, 3) positions and (n,) confidence."""
    x = torch.as_tensor(np.asarray(frames), dtype=next(predictor.parameters()).dtype)
    predictor.eval()
    with torch.no_grad():
        loc, logit = predictor(x)
    return loc.double().numpy(), torch.sigmoid(logit).double().numpy()


def predict_local_all(predictors: dict, data: SplitData, batch_size: int = 128):
    n = len(data)
    M = len(MODALITIES)
    local = np.full((n, data.n_nodes, M, 3), np.nan)
    conf = np.full((n, data.n_nodes, M), np.nan)
    for s in range(0, n, batch_size):
        idx = np.arange(s, min(s + batch_size, n))
        b = data.get(idx)
        for j, m in enumerate(MODALITIES):
            if m not in predictors:
                continue
            f = b[m].reshape(-1, *b[m].shape[2:])
            loc, c = local_predict(predictors[m], f)
            local[idx, :, j] = loc.reshape(len(idx), data.n_nodes, 3)
            conf[idx, :, j] = c.reshape(len(idx), data.n_nodes)
    return local, conf


def _tracks(data: SplitData):
    """Sample positions grouped per trajectory file, in time order."""
    files = data.index[:, 1]
    for f in dict.fromkeys(files.tolist()):
        pos = np.flatnonzero(files == f)
        yield pos[np.argsort(data.index[pos, 2])]


def run_late_fusion(data: SplitData, predictors: dict | None = None, noise: NoiseModel | None = None,
                    node_poses=None, cached=None) -> np.ndarray:
    """World (x, y) estimate for every sample of ``data`` (aligned with its
    index). ``node_poses`` overrides the known poses per view, e.g. to test
    sensitivity to pose errors. ``cached`` = (local, conf) skips inference."""
    noise = noise or NoiseModel()
    local, conf = cached if cached is not None else predict_local_all(predictors, data)
    poses = node_poses if node_poses is not None else data.node_poses
    ts = data.timestamps()
    est = np.empty((len(data), 2))
    for pos in _tracks(data):
        v = data.index[pos[0], 0]
        est[pos] = fuse_track(ts[pos], local[pos], conf[pos], poses[v], noise)
    return est


def fit_noise_model(data: SplitData, local, conf, q_grid=(0.05, 0.2, 1.0, 5.0)) -> NoiseModel:
    """Per-modality measurement covariance from validation residuals of
    confident predictions, then pick the process-noise intensity with the
    lowest validation error."""
    gt = data.targets()
    r = {}
    for j, m in enumerate(MODALITIES):
        res = []
        for k in range(data.n_nodes):
            ok = conf[:, k, j] > 0.5
            if not ok.any():
                continue
            for i in np.flatnonzero(ok):
                pose = data.node_poses[data.index[i, 0]][k]
                res.append(local_to_world(pose, local[i, k, j])[:2] - gt[i])
        res = np.array(res) if res else np.zeros((0, 2))
        cov = np.cov(res.T) if len(res) > 2 else np.eye(2) * 0.25
        r[m] = 0.5 * (cov + cov.T) + np.eye(2) * 1e-4
    best = None
    for q in q_grid:
        nm = NoiseModel(q, r)
        est = run_late_fusion(data, noise=nm, cached=(local, conf))
        err = np.linalg.norm(est - gt, axis=1).mean()
        if best is None or err < best[0]:
            best = (err, nm)
    return best[1]


def write_estimates_csv(path, timestamps, estimates, ground_truth) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    err = np.linalg.norm(np.asarray(estimates) - np.asarray(ground_truth), axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", "x", "y", "error"])
        for t, (x, y), e in zip(timestamps, estimates, err):
            w.writerow([f"{t:.6f}", f"{x:.6f}", f"{y:.6f}", f"{e:.6f}"])

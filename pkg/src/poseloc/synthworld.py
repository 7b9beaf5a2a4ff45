"""Synthetic multi-view, multimodal tracking world.

Three sensor nodes watch a single target moving on a plane. Each node carries
three synthetic modalities:

``camera_like``
    48x64 intensity image, pinhole projection of a Gaussian blob over a fixed
    per-node clutter texture.
``depth_like``
    48x64 z-depth image; blob pixels carry the metric depth of the target,
    everything else sits at the far plane.
``radar_like``
    32x32 range-azimuth heatmap with multiplicative speckle.

Every pixel of every frame is a pure function of the seeds recorded in the
manifest, so frame files can be regenerated bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import Arena, NodePose, local_to_world, look_at_quaternion, world_to_local

log = logging.getLogger(__name__)

MODALITIES = ("camera_like", "depth_like", "radar_like")
IMAGE_SHAPE = (48, 64)
RADAR_SHAPE = (32, 32)
SHAPES = {"camera_like": IMAGE_SHAPE, "depth_like": IMAGE_SHAPE, "radar_like": RADAR_SHAPE}

HFOV_DEG = 60.0
FOCAL_PX = (IMAGE_SHAPE[1] / 2) / np.tan(np.deg2rad(HFOV_DEG / 2))
PRINCIPAL = (IMAGE_SHAPE[1] / 2, IMAGE_SHAPE[0] / 2)  # (cu, cv), lands on a pixel center
NEAR_PLANE = 0.1
FAR_PLANE = 10.0
TARGET_RADIUS = 0.15
BLOB_AMPLITUDE = 0.7
PIXEL_NOISE = 0.02
DEPTH_NOISE = 0.01
CLUTTER_STD = 0.08

RADAR_MAX_RANGE = 8.0
RADAR_FOV_DEG = 60.0  # half-width
RADAR_FLOOR = 0.02
SPECKLE_SHAPE = 4.0

TARGET_HEIGHT = 0.1
TRAJ_MARGIN = 0.75
MAX_SPEED = 1.0
FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    """Raised when a configuration or dataset cannot be generated."""


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) & 0xFFFFFFFFFFFFFFFF for k in keys]))


def _mod_index(modality: str) -> int:
    try:
        return MODALITIES.index(modality)
    except ValueError:
        raise ValueError(f"unknown modality {modality!r}") from None


# --------------------------------------------------------------------------- #
# configurations and trajectories
# --------------------------------------------------------------------------- #


@dataclass
class ViewConfiguration:
    node_poses: list
    config_id: str
    rng_seed: int

    def to_dict(self) -> dict:
        return {
            "config_id": self.config_id,
            "rng_seed": int(self.rng_seed),
            "node_poses": [p.to_dict() for p in self.node_poses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ViewConfiguration":
        return cls([NodePose.from_dict(p) for p in d["node_poses"]], d["config_id"], d["rng_seed"])


def sample_configuration(seed: int, arena: Arena = Arena(), n_nodes: int = 3, config_id: str | None = None,
                         min_spacing: float = 0.1) -> ViewConfiguration:
    """Place ``n_nodes`` near the arena walls, each aimed at a random central point."""
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    rng = _rng(seed, 0xC0F1)
    lo, ext = arena.lower, arena.extents
    perimeter = 2 * (ext[0] + ext[1])
    for _ in range(1000):
        poses = []
        for _n in range(n_nodes):
            s = rng.uniform(0, perimeter)
            inset = rng.uniform(0.1, 0.4)
            if s < ext[0]:
                xy = (s, inset)
            elif s < ext[0] + ext[1]:
                xy = (ext[0] - inset, s - ext[0])
            elif s < 2 * ext[0] + ext[1]:
                xy = (ext[0] - (s - ext[0] - ext[1]), ext[1] - inset)
            else:
                xy = (inset, ext[1] - (s - 2 * ext[0] - ext[1]))
            xy = np.clip(xy, [inset, inset], [ext[0] - inset, ext[1] - inset])
            pos = lo + np.array([xy[0], xy[1], rng.uniform(0.5, 1.5)])
            aim = lo + np.array(
                [rng.uniform(0.25, 0.75) * ext[0], rng.uniform(0.25, 0.75) * ext[1], TARGET_HEIGHT]
            )
            poses.append(NodePose(look_at_quaternion(pos, aim), pos))
        pts = np.array([p.position for p in poses])
        d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(n_nodes) * 1e9
        if d.min() > min_spacing:
            return ViewConfiguration(poses, config_id or f"cfg-{seed}", int(seed))
    raise GenerationError(f"could not satisfy node spacing for seed {seed}")


@dataclass
class Trajectory:
    kind: str
    times: np.ndarray
    positions: np.ndarray
    rate: float

    def __len__(self) -> int:
        return len(self.times)


def generate_trajectory(kind: str, duration_s: float, rate_hz: float, seed: int,
                        arena: Arena = Arena()) -> Trajectory:
    if duration_s <= 0 or rate_hz <= 0:
        raise ValueError("duration and rate must be positive")
    n = int(round(duration_s * rate_hz))
    dt = 1.0 / rate_hz
    t = np.arange(n) * dt
    rng = _rng(seed, 0x7A1)
    lo = arena.lower[:2] + TRAJ_MARGIN
    hi = arena.upper[:2] - TRAJ_MARGIN
    z = arena.lower[2] + TARGET_HEIGHT
    if kind == "circular":
        half = (hi - lo) / 2
        radius = rng.uniform(0.5, min(1.4, half.min() * 0.95))
        center = rng.uniform(lo + radius, hi - radius)
        speed = rng.uniform(0.3, 0.8)
        omega = speed / radius * rng.choice([-1.0, 1.0])
        phase = rng.uniform(0, 2 * np.pi)
        ang = phase + omega * t
        xy = center + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elif kind == "random_walk":
        vmax = 0.9 * MAX_SPEED
        alpha = np.exp(-dt / 1.5)
        p = rng.uniform(lo, hi)
        v = np.zeros(2)
        xy = np.empty((n, 2))
        for i in range(n):
            xy[i] = p
            v = alpha * v + (1 - alpha) * rng.normal(0.0, 1.2, 2)
            sp = np.linalg.norm(v)
            if sp > vmax:
                v *= vmax / sp
            p = p + v * dt
            for a in range(2):
                if p[a] < lo[a]:
                    p[a] = 2 * lo[a] - p[a]
                    v[a] = -v[a]
                elif p[a] > hi[a]:
                    p[a] = 2 * hi[a] - p[a]
                    v[a] = -v[a]
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    pos = np.column_stack([xy, np.full(n, z)])
    return Trajectory(kind, t, pos, float(rate_hz))


# --------------------------------------------------------------------------- #
# rendering
# --------------------------------------------------------------------------- #

_V, _U = np.mgrid[0 : IMAGE_SHAPE[0], 0 : IMAGE_SHAPE[1]].astype(np.float64)
_RANGE_CENTERS = (np.arange(RADAR_SHAPE[0]) + 0.5) * RADAR_MAX_RANGE / RADAR_SHAPE[0]
_AZ_CENTERS = np.deg2rad(
    -RADAR_FOV_DEG + (np.arange(RADAR_SHAPE[1]) + 0.5) * 2 * RADAR_FOV_DEG / RADAR_SHAPE[1]
)


def project(local) -> tuple[float, float, float]:
    """Node-local point -> (u, v, z-depth). u is the column, v the row."""
    x, y, z = np.asarray(local, dtype=np.float64)
    return PRINCIPAL[0] - FOCAL_PX * y / x, PRINCIPAL[1] - FOCAL_PX * z / x, x


def in_frustum(local) -> bool:
    if local[0] <= NEAR_PLANE or local[0] >= FAR_PLANE:
        return False
    u, v, _ = project(local)
    return bool(-0.5 <= u < IMAGE_SHAPE[1] - 0.5 and -0.5 <= v < IMAGE_SHAPE[0] - 0.5)


def radar_coords(local) -> tuple[float, float]:
    local = np.asarray(local, dtype=np.float64)
    return float(np.linalg.norm(local)), float(np.arctan2(local[1], local[0]))


def in_radar_fov(local) -> bool:
    r, az = radar_coords(local)
    return bool(r < RADAR_MAX_RANGE and abs(az) <= np.deg2rad(RADAR_FOV_DEG))


def clutter_background(clutter_seed: int, node_index: int = 0) -> np.ndarray:
    """Smooth low-amplitude texture, fixed per (configuration, node)."""
    rng = _rng(clutter_seed, node_index, 0xB6)
    base = rng.uniform(0.15, 0.4)
    tex = gaussian_filter(rng.normal(size=IMAGE_SHAPE), sigma=rng.uniform(1.5, 4.0), mode="wrap")
    tex *= CLUTTER_STD / tex.std()
    return np.clip(base + tex, 0.0, 1.0)


def _blob(local):
    u, v, d = project(local)
    sigma = FOCAL_PX * TARGET_RADIUS / d
    g = np.exp(-((_U - u) ** 2 + (_V - v) ** 2) / (2 * sigma**2))
    return g, u, v, d


def render_frame(pose: NodePose, target_pos, modality: str, noise_seed: int | None = None,
                 clutter_seed: int = 0, node_index: int = 0) -> np.ndarray:
    """Render one node's observation of the target.

    ``noise_seed=None`` renders noiselessly. Returns a float32 array of the
    modality's shape.
    """
    _mod_index(modality)
    local = world_to_local(pose, target_pos)
    rng = None if noise_seed is None else _rng(noise_seed, _mod_index(modality))
    visible = in_frustum(local)
    if modality == "camera_like":
        img = clutter_background(clutter_seed, node_index)
        if visible:
            # alpha-blend so the peak never saturates
            img = img + BLOB_AMPLITUDE * _blob(local)[0] * (1.0 - img)
        if rng is not None:
            img = img + rng.normal(0.0, PIXEL_NOISE, IMAGE_SHAPE)
        return np.clip(img, 0.0, 1.0).astype(np.float32)
    if modality == "depth_like":
        img = np.full(IMAGE_SHAPE, FAR_PLANE)
        if visible:
            g, u, v, d = _blob(local)
            mask = g >= np.exp(-2.0)
            mask[int(np.floor(v + 0.5)), int(np.floor(u + 0.5))] = True
            val = np.full(IMAGE_SHAPE, d)
            if rng is not None:
                val = val + rng.normal(0.0, DEPTH_NOISE, IMAGE_SHAPE)
            img[mask] = np.clip(val[mask], 0.0, FAR_PLANE)
        return img.astype(np.float32)
    # radar_like
    r, az = radar_coords(local)
    dr = RADAR_MAX_RANGE / RADAR_SHAPE[0]
    da = 2 * np.deg2rad(RADAR_FOV_DEG) / RADAR_SHAPE[1]
    heat = np.full(RADAR_SHAPE, RADAR_FLOOR)
    if in_radar_fov(local):
        gr = np.exp(-((_RANGE_CENTERS - r) / dr) ** 2 / 2)
        ga = np.exp(-((_AZ_CENTERS - az) / da) ** 2 / 2)
        heat = heat + np.outer(gr, ga)
    if rng is not None:
        heat = heat * rng.gamma(SPECKLE_SHAPE, 1.0 / SPECKLE_SHAPE, RADAR_SHAPE)
    return np.clip(heat, 0.0, 1.0).astype(np.float32)


def invert_observation(pixel, depth_value: float, pose: NodePose) -> np.ndarray:
    """Inverse pinhole: (u, v) pixel + z-depth -> world point."""
    if not depth_value > 0:
        raise ValueError("depth must be positive")
    u, v = float(pixel[0]), float(pixel[1])
    x = float(depth_value)
    local = np.array([x, (PRINCIPAL[0] - u) * x / FOCAL_PX, (PRINCIPAL[1] - v) * x / FOCAL_PX])
    return local_to_world(pose, local)


def render_node(pose: NodePose, target_pos, noise_seed: int | None, clutter_seed: int,
                node_index: int) -> dict:
    return {
        m: render_frame(pose, target_pos, m, noise_seed, clutter_seed, node_index) for m in MODALITIES
    }


# --------------------------------------------------------------------------- #
# dataset
# --------------------------------------------------------------------------- #


@dataclass
class DatasetSpec:
    """How many views per split and how long each view records."""

    n_train: int = 13
    n_val: int = 4
    n_test: int = 5
    duration_s: float = 120.0
    rate_hz: float = 15.0
    n_nodes: int = 3
    seed: int = 0
    ssim_threshold: float = 0.60
    arena: dict = field(default_factory=lambda: Arena().to_dict())
    split_seeds: dict | None = None  # optional explicit {split: [seed, ...]}

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one view")
        if self.duration_s <= 0 or self.rate_hz <= 0:
            raise ValueError("duration and rate must be positive")
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown dataset keys: {sorted(unknown)}")
        return cls(**d)

    def counts(self) -> dict:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


SPLITS = ("train", "val", "test")
TRAJ_KINDS = ("circular", "random_walk")


def record_dtype(n_nodes: int) -> np.dtype:
    """One little-endian, packed record per timestep."""
    fields = [
        ("magic", "S4"),
        ("timestamp", "<f8"),
        ("config_id", "S16"),
        ("n_nodes", "<u4"),
        ("n_modalities", "<u4"),
        ("shapes", "<u4", (len(MODALITIES), 2)),
        ("target", "<f8", (2,)),
    ]
    for m in MODALITIES:
        fields.append((m, "<f4", (n_nodes, *SHAPES[m])))
    return np.dtype(fields)


def frame_noise_seed(config_seed: int, traj_index: int, frame_index: int, node_index: int) -> int:
    return int(_rng(config_seed, traj_index, frame_index, node_index, 0xF5).integers(2**62))


def trajectory_seed(config_seed: int, traj_index: int) -> int:
    return int(_rng(config_seed, traj_index, 0x7E).integers(2**62))


def view_trajectories(view: dict, arena: Arena, rate_hz: float) -> list[Trajectory]:
    return [
        generate_trajectory(t["kind"], t["duration_s"], rate_hz, t["seed"], arena)
        for t in view["trajectories"]
    ]


def render_view_frame(view: dict, traj: Trajectory, traj_index: int, frame_index: int,
                      noise: bool = True) -> dict:
    """All modalities of all nodes at one timestep: {modality: (nodes, H, W)}."""
    cfg = ViewConfiguration.from_dict(view["configuration"])
    target = traj.positions[frame_index]
    out = {m: [] for m in MODALITIES}
    for k, pose in enumerate(cfg.node_poses):
        seed = frame_noise_seed(cfg.rng_seed, traj_index, frame_index, k) if noise else None
        frames = render_node(pose, target, seed, cfg.rng_seed, k)
        for m in MODALITIES:
            out[m].append(frames[m])
    return {m: np.stack(v) for m, v in out.items()}


def first_camera_frames(view: dict, arena: Arena, rate_hz: float) -> list[np.ndarray]:
    traj = view_trajectories(view, arena, rate_hz)[0]
    return list(render_view_frame(view, traj, 0, 0)["camera_like"])


def localizable(cfg: ViewConfiguration, trajs: list[Trajectory], frac: float = 0.9) -> bool:
    for pose in cfg.node_poses:
        ok = []
        for tr in trajs:
            loc = world_to_local(pose, tr.positions)
            ok.extend(in_frustum(p) for p in loc)
        if np.mean(ok) >= frac:
            return True
    return False


def _make_view(split: str, index: int, seed: int, spec: DatasetSpec, arena: Arena) -> dict:
    """Sample a localizable configuration plus its trajectories."""
    for attempt in range(100):
        cfg_seed = int(_rng(seed, attempt, 0xCF).integers(2**62)) if attempt else int(seed)
        cfg = sample_configuration(cfg_seed, arena, spec.n_nodes, config_id=f"{split}-{index:02d}")
        trajs = []
        for k, kind in enumerate(TRAJ_KINDS):
            dur = spec.duration_s / len(TRAJ_KINDS)
            trajs.append({"kind": kind, "seed": trajectory_seed(cfg_seed, k), "duration_s": dur})
        view = {"config_id": cfg.config_id, "configuration": cfg.to_dict(), "trajectories": trajs}
        if localizable(cfg, view_trajectories(view, arena, spec.rate_hz)):
            return view
    raise GenerationError(f"no localizable configuration for {split}-{index}")


def _split_seeds(spec: DatasetSpec) -> dict:
    if spec.split_seeds is not None:
        seeds = {s: list(spec.split_seeds[s]) for s in SPLITS}
    else:
        seeds = {
            s: [int(_rng(spec.seed, i, j, 0x5EED).integers(2**62)) for j in range(n)]
            for i, (s, n) in enumerate(spec.counts().items())
        }
    for s, n in spec.counts().items():
        if n < 1:
            raise ValueError(f"split {s} needs at least one view")
        if len(seeds[s]) != n:
            raise ValueError(f"split {s}: expected {n} seeds, got {len(seeds[s])}")
    return seeds


def plan_dataset(spec: DatasetSpec, max_retries: int = 20) -> dict:
    """Build the manifest (no frame files). Regenerates val/test views that are
    too similar to a view in another split."""
    from .evaluation import validate_split

    arena = Arena.from_dict(spec.arena)
    seeds = _split_seeds(spec)
    splits = {s: [_make_view(s, j, sd, spec, arena) for j, sd in enumerate(seeds[s])] for s in SPLITS}
    manifest = {
        "format_version": FORMAT_VERSION,
        "arena": arena.to_dict(),
        "rate_hz": spec.rate_hz,
        "modalities": list(MODALITIES),
        "shapes": {m: list(SHAPES[m]) for m in MODALITIES},
        "dataset_spec": asdict(spec),
        "splits": splits,
    }
    retries = 0
    while True:
        verdict = validate_split(manifest, spec.ssim_threshold)
        if verdict.passed:
            break
        if retries >= max_retries:
            raise GenerationError(
                f"split validation failed after {max_retries} retries: {verdict.worst_pair} "
                f"similarity {verdict.max_similarity:.3f}"
            )
        retries += 1
        a, b = verdict.worst_pair
        victim = b if not b.startswith("train") else a
        split, j = victim.split("-")[0], int(victim.split("-")[1])
        new_seed = int(_rng(seeds[split][j], retries, 0xAE).integers(2**62))
        log.info("regenerating %s (similarity %.3f)", victim, verdict.max_similarity)
        splits[split][j] = _make_view(split, j, new_seed, spec, arena)
    manifest["split_validation"] = {
        "threshold": spec.ssim_threshold,
        "max_similarity": round(float(verdict.max_similarity), 12),
        "worst_pair": list(verdict.worst_pair),
    }
    return manifest


def write_trajectory_frames(path: Path, view: dict, traj: Trajectory, traj_index: int,
                            n_nodes: int) -> None:
    dt = record_dtype(n_nodes)
    rec = np.zeros(len(traj), dtype=dt)
    rec["magic"] = b"FRM1"
    rec["timestamp"] = traj.times
    rec["config_id"] = view["config_id"].encode()
    rec["n_nodes"] = n_nodes
    rec["n_modalities"] = len(MODALITIES)
    rec["shapes"] = np.array([SHAPES[m] for m in MODALITIES])
    rec["target"] = traj.positions[:, :2]
    for i in range(len(traj)):
        frames = render_view_frame(view, traj, traj_index, i)
        for m in MODALITIES:
            rec[m][i] = frames[m]
    path.parent.mkdir(parents=True, exist_ok=True)
    rec.tofile(path)


def manifest_bytes(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()


def manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(manifest_bytes(manifest)).hexdigest()


def build_dataset(spec: DatasetSpec, out_dir, write_frames: bool = True) -> dict:
    """Plan, validate and write a dataset. Returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = plan_dataset(spec)
    arena = Arena.from_dict(manifest["arena"])
    for split in SPLITS:
        for view in manifest["splits"][split]:
            trajs = view_trajectories(view, arena, spec.rate_hz)
            for k, (tref, tr) in enumerate(zip(view["trajectories"], trajs)):
                tref["n_samples"] = len(tr)
                tref["frame_file"] = f"frames/{view['config_id']}_{k}_{tref['kind']}.bin"
                if write_frames:
                    write_trajectory_frames(out / tref["frame_file"], view, tr, k, spec.n_nodes)
    (out / "manifest.json").write_bytes(manifest_bytes(manifest))
    log.info("dataset written to %s", out)
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    m = json.loads(path.read_text())
    if m.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported manifest version {m.get('format_version')}")
    return m


def read_frames(path, n_nodes: int) -> np.ndarray:
    """Memory-map a trajectory's frame records."""
    rec = np.memmap(path, dtype=record_dtype(n_nodes), mode="r")
    if len(rec) and rec["magic"][0] != b"FRM1":
        raise ValueError(f"{path}: bad record magic")
    return rec

"""Config-driven experiment pipeline: generate, pretrain, train, evaluate,
compare. Every run directory is self-describing (config copy + hash,
checkpoints, curves, report) so it can be re-evaluated later."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SplitData
from .evaluation import (
    count_params_and_macs,
    error_cdf,
    frame_errors_cm,
    overhead_table,
    per_view_table,
    predict,
)
from .latefusion import NoiseModel, fit_noise_model, predict_local_all, run_late_fusion, write_estimates_csv
from .model import ModelSpec, assemble_model
from .synthworld import MODALITIES, DatasetSpec, GenerationError, build_dataset, load_manifest, manifest_hash
from .training import (
    LocalRegressor,
    TrainConfig,
    load_pretrained,
    pretrain_backbone,
    train,
    train_local_regressor,
    write_curves,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
OUTPUT_ROOT_ENV = "POSELOC_OUTPUT_ROOT"
LATE_FUSION = "late_fusion"


class ConfigError(ValueError):
    pass


class DatasetMissing(FileNotFoundError):
    pass


class ManifestMismatch(ValueError):
    pass


@dataclass
class EvalConfig:
    test_stride: int = 1
    batch_size: int = 128
    subsets: bool = True


@dataclass
class ExperimentConfig:
    version: int
    name: str = "run"
    dataset: dict = field(default_factory=dict)
    dataset_dir: str = "dataset"
    generate: bool = True
    model: dict = field(default_factory=lambda: {"variant": "condconv"})
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    out: str = "runs/run"
    cache_dir: str = "cache"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a mapping")
        if "version" not in d:
            raise ConfigError("config is missing the mandatory 'version' field")
        if d["version"] != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d['version']!r}")
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        try:  # validate sections eagerly so errors surface before any work
            cfg.dataset_spec()
            cfg.model_spec()
            cfg.train_config()
            cfg.eval_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    # -- typed sections ----------------------------------------------------- #

    @property
    def variant(self) -> str:
        return self.model.get("variant", "condconv")

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec.from_dict(self.dataset)

    def model_spec(self, seed: int | None = None) -> ModelSpec:
        d = dict(self.model)
        if d.get("variant") == LATE_FUSION:
            d["variant"] = "unconditional"  # backbone architecture only
        if seed is not None:
            d["seed"] = seed
        return ModelSpec.from_dict(d)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def eval_config(self) -> EvalConfig:
        unknown = set(self.eval) - {f.name for f in dataclasses.fields(EvalConfig)}
        if unknown:
            raise ValueError(f"unknown eval keys: {sorted(unknown)}")
        return EvalConfig(**self.eval)

    def with_overrides(self, seed=None, variant=None, out=None) -> "ExperimentConfig":
        cfg = dataclasses.replace(self, model=dict(self.model), train=dict(self.train))
        if seed is not None:
            cfg.train["seeds"] = [int(seed)]
        if variant is not None:
            cfg.model["variant"] = variant
        if out is not None:
            cfg.out = str(out)
        return ExperimentConfig.from_dict(cfg.to_dict())


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


# --------------------------------------------------------------------------- #
# dataset and pretraining
# --------------------------------------------------------------------------- #


def ensure_dataset(cfg: ExperimentConfig) -> Path:
    """Return the dataset directory, generating it if allowed."""
    root = resolve(cfg.dataset_dir)
    spec = cfg.dataset_spec()
    if (root / "manifest.json").exists():
        man = load_manifest(root)
        if man.get("dataset_spec") != dataclasses.asdict(spec):
            raise ConfigError(f"dataset at {root} was generated from a different dataset spec")
        return root
    if not cfg.generate:
        raise DatasetMissing(f"no dataset at {root} and generation is disabled")
    log.info("generating dataset at %s", root)
    build_dataset(spec, root)
    return root


def _pretrain_key(manifest: dict, spec: ModelSpec, tc: TrainConfig, seed: int) -> str:
    arch = dataclasses.replace(spec, variant="unconditional", seed=0).to_dict()
    blob = json.dumps({"manifest": manifest_hash(manifest), "arch": arch, "steps": tc.pretrain_steps,
                       "batch": tc.pretrain_batch_size, "view": tc.pretrain_view, "seed": seed,
                       "export": "backbone"}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _save_state(path: Path, state: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **{k: v.numpy() for k, v in state.items()})
    tmp.replace(path)


def _load_state(path: Path) -> dict:
    with np.load(path) as z:
        return {k: torch.from_numpy(z[k].copy()) for k in z.files}


def pretrained_backbones(cfg: ExperimentConfig, data_root: Path, seed: int) -> dict:
    """Pretrained backbone weights for every modality, cached on disk."""
    man = load_manifest(data_root)
    spec, tc = cfg.model_spec(seed), cfg.train_config()
    path = resolve(cfg.cache_dir) / f"pretrain_{_pretrain_key(man, spec, tc, seed)}.npz"
    if path.exists():
        return _load_state(path)
    view = man["splits"]["train"][tc.pretrain_view]["config_id"]
    one = SplitData(data_root, "train", views=[view], manifest=man)
    state = {}
    t0 = time.perf_counter()
    for m in spec.modalities:
        log.info("pretraining %s backbone on %s (seed %d)", m, view, seed)
        state.update(pretrain_backbone(m, one, spec, tc.pretrain_steps, tc.pretrain_batch_size, seed=seed))
    _write_json(path.with_suffix(".json"), {"seed": seed, "view": view, "seconds": round(time.perf_counter() - t0, 3)})
    _save_state(path, state)
    return state


# --------------------------------------------------------------------------- #
# training
# --------------------------------------------------------------------------- #


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def prepare_run_dir(cfg: ExperimentConfig) -> Path:
    run = resolve(cfg.out)
    run.mkdir(parents=True, exist_ok=True)
    _write_json(run / "config.json", cfg.to_dict())
    (run / "config.sha256").write_text(cfg.digest() + "\n")
    return run


def check_run_config(run: Path) -> ExperimentConfig:
    """Load a run's config copy and verify it against the recorded hash."""
    cfg = ExperimentConfig.load(run / "config.json")
    recorded = (run / "config.sha256").read_text().strip()
    if recorded != cfg.digest():
        raise ConfigError(f"{run}: config.json does not match config.sha256 (edited after the run?)")
    return cfg


def train_seed(cfg: ExperimentConfig, data_root: Path, seed: int, run: Path) -> None:
    tc = cfg.train_config()
    man = load_manifest(data_root)
    tr = SplitData(data_root, "train", manifest=man)
    va = SplitData(data_root, "val", stride=tc.val_stride, manifest=man)
    sdir = run / f"seed{seed}"
    if cfg.variant == LATE_FUSION:
        _train_late_fusion(cfg, tr, va, seed, sdir)
        return
    model = assemble_model(cfg.model_spec(seed))
    if tc.pretrain:
        loaded = load_pretrained(model, pretrained_backbones(cfg, data_root, seed))
        log.info("loaded %d pretrained tensors", len(loaded))
    res = train(model, tr, va, tc, seed=seed, curves_path=sdir / "curves.csv")
    meta = {"seed": seed, "best_epoch": res.best_epoch, "best_val_cm": res.best_val_cm,
            "manifest_sha256": manifest_hash(man)}
    save_checkpoint(sdir / "model.ckpt", res.model, meta)
    # wall-clock time lives outside the checkpoint so reruns stay byte-identical
    _write_json(sdir / "timing.json", {"train_seconds": round(res.seconds, 3)})


def _train_late_fusion(cfg, tr, va, seed, sdir) -> None:
    tc = cfg.train_config()
    spec = cfg.model_spec(seed)
    steps = tc.max_epochs * tc.steps_per_epoch
    predictors = {}
    for m in spec.modalities:
        log.info("training local %s regressor (%d steps)", m, steps)
        predictors[m] = train_local_regressor(spec, m, tr, steps, batch_size=tc.batch_size * 2, lr=tc.lr, seed=seed)
        _save_state(sdir / f"local_{m}.npz", predictors[m].state_dict())
    local, conf = predict_local_all(predictors, va)
    noise = fit_noise_model(va, local, conf)
    _write_json(sdir / "noise.json", {"q": noise.q, "r": {m: noise.r[m].tolist() for m in noise.r},
                                       "min_conf": noise.min_conf})
    est = run_late_fusion(va, noise=noise, cached=(local, conf))
    val_cm = float(frame_errors_cm(est, va.targets()).mean())
    # local regressors log no fused training loss
    write_curves(sdir / "curves.csv", [(steps, float("nan"), val_cm)])


def _load_late_fusion(cfg, sdir, seed):
    spec = cfg.model_spec(seed)
    predictors = {}
    for m in spec.modalities:
        net = LocalRegressor(spec, m)
        net.load_state_dict(_load_state(sdir / f"local_{m}.npz"))
        net.eval()
        predictors[m] = net
    nz = json.loads((sdir / "noise.json").read_text())
    return predictors, NoiseModel(nz["q"], {m: np.array(v) for m, v in nz["r"].items()}, nz["min_conf"])


# --------------------------------------------------------------------------- #
# evaluation report
# --------------------------------------------------------------------------- #


def subset_name(subset) -> str:
    return "+".join(subset)


def all_subsets(modalities=MODALITIES):
    return [c for k in range(len(modalities), 0, -1) for c in combinations(modalities, k)]


def _view_means(data: SplitData, errors_cm: np.ndarray) -> dict:
    return {v: float(errors_cm[data.view_of == i].mean()) for i, v in enumerate(data.view_ids)}


def evaluate_run(run, data_root: Path | None = None, write: bool = True) -> dict:
    """Evaluate every seed checkpoint of ``run`` on the test split and build
    the report. Deterministic given the checkpoints."""
    run = Path(run)
    cfg = check_run_config(run)
    ec = cfg.eval_config()
    data_root = data_root or resolve(cfg.dataset_dir)
    if not (data_root / "manifest.json").exists():
        raise DatasetMissing(f"no dataset at {data_root}")
    man = load_manifest(data_root)
    te = SplitData(data_root, "test", stride=ec.test_stride, manifest=man)
    gt = te.targets()
    seeds = cfg.train_config().seeds
    subsets = all_subsets(cfg.model_spec().modalities) if ec.subsets else [tuple(cfg.model_spec().modalities)]
    per_seed, subset_means, pooled_errors, meta = {}, {subset_name(s): {} for s in subsets}, [], {}
    for seed in seeds:
        sdir = run / f"seed{seed}"
        if cfg.variant == LATE_FUSION:
            predictors, noise = _load_late_fusion(cfg, sdir, seed)
            local, conf = predict_local_all(predictors, te)
            results = {}
            for s in subsets:
                c = conf.copy()
                for j, m in enumerate(MODALITIES):
                    if m not in s:
                        c[:, :, j] = np.nan
                results[subset_name(s)] = run_late_fusion(te, noise=noise, cached=(local, c))
            meta[seed] = {"q": noise.q}
        else:
            model, meta[seed] = load_checkpoint(sdir / "model.ckpt", cfg.model_spec(seed))
            if meta[seed].get("manifest_sha256") != manifest_hash(man):
                raise ManifestMismatch(f"{sdir} was trained on a different dataset")
            mods = model.spec.modalities
            results = {subset_name(s): predict(model, te, [m in s for m in mods], ec.batch_size)[0] for s in subsets}
        full = results[subset_name(subsets[0])]
        err = frame_errors_cm(full, gt)
        pooled_errors.append(err)
        if write:
            write_estimates_csv(sdir / "test_estimates.csv", te.timestamps(), full, gt)
        per_seed[seed] = _view_means(te, err)
        for name, pred in results.items():
            subset_means[name][seed] = _view_means(te, frame_errors_cm(pred, gt))
    table = per_view_table(per_seed)
    cdf = error_cdf(np.concatenate(pooled_errors))
    report = {
        "name": cfg.name,
        "variant": cfg.variant,
        "config_sha256": cfg.digest(),
        "manifest_sha256": manifest_hash(man),
        "test_views": te.view_ids,
        "seeds": seeds,
        "per_seed_view_mean_cm": {str(s): v for s, v in per_seed.items()},
        "per_view_cm": {v: {"mean": m, "std": sd} for v, (m, sd) in table.items()},
        "cdf_p90_cm": cdf.p90,
        "n_frames": int(sum(len(e) for e in pooled_errors)),
        "subsets_cm": {name: {v: {"mean": m, "std": sd} for v, (m, sd) in per_view_table(d).items()}
                       for name, d in subset_means.items()},
        "subsets_per_seed_cm": {name: {str(s): v for s, v in d.items()} for name, d in subset_means.items()},
        "split_validation": man.get("split_validation"),
        "training": {str(s): m for s, m in meta.items()},
    }
    if cfg.variant != LATE_FUSION:
        spec = cfg.model_spec()
        ref = dataclasses.replace(spec, variant="unconditional")
        ov = overhead_table({"unconditional": count_params_and_macs(assemble_model(ref)),
                             cfg.variant: count_params_and_macs(assemble_model(spec))})
        report["overhead"] = ov[cfg.variant]
    if write:
        write_report(run, report, cdf)
    return report


def write_report(run: Path, report: dict, cdf) -> None:
    _write_json(run / "eval_report.json", report)
    views = report["test_views"] + ["average"]
    with open(run / "per_view.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["view", "mean_cm", "std_cm"])
        for v in views:
            r = report["per_view_cm"][v]
            w.writerow([v, f"{r['mean']:.6f}", f"{r['std']:.6f}"])
    with open(run / "cdf.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["error_cm", "fraction"])
        for e, f in cdf.rows():
            w.writerow([f"{e:.6f}", f"{f:.8f}"])
    with open(run / "cdf_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n_frames", "p90_cm"])
        w.writerow([report["n_frames"], f"{report['cdf_p90_cm']:.6f}"])
    with open(run / "subsets.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subset", "view", "mean_cm", "std_cm"])
        for name, rows in report["subsets_cm"].items():
            for v in views:
                w.writerow([name, v, f"{rows[v]['mean']:.6f}", f"{rows[v]['std']:.6f}"])
    if "overhead" in report:
        with open(run / "overhead.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(report["overhead"]))
            w.writerow([report["overhead"][k] for k in report["overhead"]])


# --------------------------------------------------------------------------- #
# top-level drivers
# --------------------------------------------------------------------------- #


def _seed_done(cfg: ExperimentConfig, run: Path, seed: int) -> bool:
    marker = run / f"seed{seed}" / ("noise.json" if cfg.variant == LATE_FUSION else "model.ckpt")
    digest = run / "config.sha256"
    return marker.exists() and digest.exists() and digest.read_text().strip() == cfg.digest()


def run_experiment(cfg: ExperimentConfig | str | Path, resume: bool = False) -> Path:
    """generate (if needed) -> pretrain (if enabled) -> train per seed -> evaluate.

    With ``resume``, seeds already trained under an identical config are kept.
    """
    if not isinstance(cfg, ExperimentConfig):
        cfg = ExperimentConfig.load(cfg)
    data_root = ensure_dataset(cfg)
    run = resolve(cfg.out)
    done = {s for s in cfg.train_config().seeds if resume and _seed_done(cfg, run, s)}
    run = prepare_run_dir(cfg)
    for seed in cfg.train_config().seeds:
        if seed in done:
            log.info("seed %d already trained in %s", seed, run)
            continue
        train_seed(cfg, data_root, seed, run)
    evaluate_run(run, data_root)
    return run


def compare_models(runs, out=None) -> list[dict]:
    """Per-view comparison of evaluated runs: one row per run, one
    column per test view plus the average. Refuses runs evaluated on
    different test manifests."""
    reports = [json.loads((Path(r) / "eval_report.json").read_text()) for r in runs]
    if not reports:
        raise ValueError("nothing to compare")
    hashes = {r["manifest_sha256"] for r in reports}
    if len(hashes) != 1:
        raise ManifestMismatch("runs were evaluated on different test manifests")
    views = reports[0]["test_views"] + ["average"]
    rows = []
    for run, rep in zip(runs, reports):
        row = {"run": rep["name"], "variant": rep["variant"]}
        for v in views:
            row[v] = (rep["per_view_cm"][v]["mean"], rep["per_view_cm"][v]["std"])
        row["p90"] = rep["cdf_p90_cm"]
        rows.append(row)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "comparison.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "variant"] + [f"{v}_{k}" for v in views for k in ("mean_cm", "std_cm")] + ["p90_cm"])
            for r in rows:
                w.writerow([r["run"], r["variant"]] + [f"{x:.6f}" for v in views for x in r[v]] + [f"{r['p90']:.6f}"])
        with open(out / "cdf_overlay.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "error_cm", "fraction"])
            for run, rep in zip(runs, reports):
                with open(Path(run) / "cdf.csv") as src:
                    for e, f in list(csv.reader(src))[1:]:
                        w.writerow([rep["name"], e, f])
        (out / "comparison.txt").write_text(render_table(rows, views))
    return rows


def render_table(rows, views) -> str:
    head = ["model"] + views
    body = [[r["run"]] + [f"{r[v][0]:.2f} ± {r[v][1]:.2f}" for v in views] for r in rows]
    widths = [max(len(x[i]) for x in [head] + body) for i in range(len(head))]
    fmt = lambda cells: "  ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    lines = [fmt(head), fmt(["-" * w for w in widths])] + [fmt(b) for b in body]
    return "\n".join(lines) + "\n"


__all__ = [
    "ConfigError",
    "DatasetMissing",
    "ExperimentConfig",
    "GenerationError",
    "ManifestMismatch",
    "compare_models",
    "ensure_dataset",
    "evaluate_run",
    "pretrained_backbones",
    "run_experiment",
]

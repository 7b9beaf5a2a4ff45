"""Command-line driver.

    poseloc generate-data --config exp.json
    poseloc pretrain      --config exp.json [--seed N]
    poseloc train         --config exp.json [--seed N] [--variant V] [--out DIR]
    poseloc evaluate      --run DIR | --config exp.json
    poseloc compare       RUN_DIR ... --out DIR
    poseloc plot          RUN_DIR ... --out DIR

Relative paths in a config resolve against $POSELOC_OUTPUT_ROOT (default:
the working directory).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .synthworld import GenerationError

log = logging.getLogger("poseloc")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_SPLIT = 4
EXIT_MISMATCH = 5


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config)
    return cfg.with_overrides(seed=getattr(args, "seed", None), variant=getattr(args, "variant", None),
                              out=getattr(args, "out", None))


def cmd_generate(args) -> int:
    cfg = _config(args)
    root = ex.ensure_dataset(cfg)
    print(root)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    root = ex.ensure_dataset(cfg)
    for seed in cfg.train_config().seeds:
        ex.pretrained_backbones(cfg, root, seed)
    return 0


def cmd_train(args) -> int:
    run = ex.run_experiment(_config(args))
    report = json.loads((run / "eval_report.json").read_text())
    avg = report["per_view_cm"]["average"]
    print(f"{run}: average {avg['mean']:.2f} ± {avg['std']:.2f} cm, p90 {report['cdf_p90_cm']:.2f} cm")
    return 0


def cmd_evaluate(args) -> int:
    if args.run:
        run = Path(args.run)
    elif args.config:
        run = ex.resolve(_config(args).out)
    else:
        raise ex.ConfigError("evaluate needs --run or --config")
    report = ex.evaluate_run(run)
    print(json.dumps(report["per_view_cm"], indent=1, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    rows = ex.compare_models(args.runs, args.out)
    views = [k for k in rows[0] if k not in ("run", "variant", "p90")]
    print(ex.render_table(rows, views), end="")
    return 0


def cmd_plot(args) -> int:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed; skipping plots", file=sys.stderr)
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    reports = []
    for run in args.runs:
        rep = json.loads((Path(run) / "eval_report.json").read_text())
        reports.append(rep)
        with open(Path(run) / "cdf.csv") as fh:
            rows = list(csv.reader(fh))[1:]
        ax.step([float(r[0]) for r in rows], [float(r[1]) for r in rows], where="post", label=rep["name"])
    ax.set_xlabel("error (cm)")
    ax.set_ylabel("fraction of frames")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "cdf.png", dpi=120)
    plt.close(fig)

    views = reports[0]["test_views"] + ["average"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    width = 0.8 / len(reports)
    for i, rep in enumerate(reports):
        xs = [j + i * width for j in range(len(views))]
        ax.bar(xs, [rep["per_view_cm"][v]["mean"] for v in views], width,
               yerr=[rep["per_view_cm"][v]["std"] for v in views], label=rep["name"])
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(views))], views, rotation=30)
    ax.set_ylabel("mean error (cm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "per_view.png", dpi=120)
    plt.close(fig)
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poseloc", description="Pose-conditioned multi-view localization experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, seed=True, variant=False, out=False):
        sp.add_argument("--config", required=True, type=Path)
        if seed:
            sp.add_argument("--seed", type=int, help="train only this seed")
        if variant:
            sp.add_argument("--variant", help="override the model variant")
        if out:
            sp.add_argument("--out", type=Path, help="run directory (overrides the config)")
        return sp

    with_config(sub.add_parser("generate-data", help="build the synthetic dataset"), seed=False).set_defaults(
        fn=cmd_generate)
    with_config(sub.add_parser("pretrain", help="pretrain backbones on one training view")).set_defaults(
        fn=cmd_pretrain)
    with_config(sub.add_parser("train", help="pretrain, train every seed, evaluate"), variant=True,
                out=True).set_defaults(fn=cmd_train)

    ev = sub.add_parser("evaluate", help="(re)build a run's evaluation report from its checkpoints")
    ev.add_argument("--run", type=Path)
    ev.add_argument("--config", type=Path)
    ev.add_argument("--out", type=Path)
    ev.add_argument("--variant")
    ev.set_defaults(fn=cmd_evaluate)

    for name, fn, helptext in (("compare", cmd_compare, "per-view comparison table"),
                               ("plot", cmd_plot, "CDF and per-view plots (needs matplotlib)")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("runs", nargs="+", type=Path)
        sp.add_argument("--out", type=Path, required=True)
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.DatasetMissing as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except GenerationError as exc:
        print(f"dataset generation failed: {exc}", file=sys.stderr)
        return EXIT_SPLIT
    except ex.ManifestMismatch as exc:
        print(f"refusing: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())

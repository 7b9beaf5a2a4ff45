"""End-to-end experiment at toy scale: generate a small dataset, train a
pose-conditioned model and the unconditional baseline, then print the
per-view comparison table and the 90th-percentile error.

Three training arrangements are far too few for the pose-conditioned model
to pull ahead; this script shows the workflow, not the effect.

Everything lands under $POSELOC_OUTPUT_ROOT (default: the working
directory). Expect a few minutes on one CPU core. The full-size configs in
demos/configs/ follow the same path through the ``poseloc`` command:

    poseloc train --config demos/configs/condconv.json
    poseloc compare runs/condconv runs/unconditional --out runs/table
"""

# %%
import dataclasses
import json
from pathlib import Path

from poseloc.experiment import ExperimentConfig, compare_models, render_table, run_experiment

base = ExperimentConfig.load(Path(__file__).parent / "configs" / "quick.json")
runs = []
for variant in ("condconv", "unconditional"):
    cfg = dataclasses.replace(base.with_overrides(variant=variant, out=f"runs/quick_{variant}"), name=variant)
    run = run_experiment(cfg, resume=True)
    report = json.loads((run / "eval_report.json").read_text())
    print(f"{variant}: average {report['per_view_cm']['average']['mean']:.1f} cm, "
          f"p90 {report['cdf_p90_cm']:.1f} cm")
    runs.append(run)

# %% Per-view comparison across the unseen test views.
rows = compare_models(runs, "runs/quick_table")
views = [k for k in rows[0] if k not in ("run", "variant", "p90")]
print(render_table(rows, views))

# %% Which sensors matter: error with modality subsets removed at test time.
report = json.loads((runs[0] / "eval_report.json").read_text())
for subset, cells in report["subsets_cm"].items():
    print(f"{subset:35s} {cells['average']['mean']:7.1f} cm")

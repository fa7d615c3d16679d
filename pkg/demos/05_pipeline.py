"""
The whole pipeline, resumable
=============================

gen-data -> train-bias -> extract-topk -> train-diffusion -> inject ->
train-vanilla / train-debiased -> evaluate. Each stage writes into a
directory named by a hash of its settings and of its inputs, so a second
run reuses everything and changing one section only reruns what depends on
it. The same stages are available as ``diffinject <stage>`` subcommands.

This uses a miniature configuration so it finishes in a minute or two; the
numbers are not meaningful at this size.
"""

import json
import sys
from pathlib import Path

from diffinject.config import loads_config
from diffinject.pipeline import run_experiment
from diffinject.report import report_run

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo-out/05")
cfg = loads_config("""
seed: 0
data: {num_classes: 3, image_size: 16, samples_per_class: 100, conflict_ratio: 0.05, test_samples_per_class: 30}
bias_classifier: {epochs: 5}
classifier: {epochs: 10}
diffusion: {T: 50, steps: 100, base_width: 16, pretrain_per_class: 50}
injection: {num_steps: 10}
pipeline: {K: 5}
""")
print(cfg.dumps())

record = run_experiment(cfg, out=out / "run")
print(json.dumps({k: record["metrics"][k] for k in ("vanilla", "diffinject", "t_edit", "syn_count")}, indent=1))
print("stage seconds:", {s: v["seconds"] for s, v in record["stages"].items()})

again = run_experiment(cfg, out=out / "run")
print("second run skipped:", [s for s, v in again["stages"].items() if v["skipped"]])

print(report_run(out / "run", out / "report"))
print((out / "report" / "table.txt").read_text())

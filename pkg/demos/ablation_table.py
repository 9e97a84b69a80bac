"""Compare the full method against its ablations on a handful of toy images.

    python demos/ablation_table.py [n_seeds]

Prints the per-variant table that ``zerocon report`` would write.
"""

import sys

from zerocon.eval import ExperimentSpec, render_table, run_experiment
from zerocon.toy import load_or_train

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
ctx = load_or_train()
spec = ExperimentSpec(seeds=tuple(range(n_seeds)))
rows, reports = run_experiment(spec, ctx, progress=lambda r: print(f"  {r.variant:12s} {r.task:14s} seed {r.seed}", flush=True))
print()
print(render_table(reports))

"""Run a small sweep through the library API, then build the report tables.

Equivalent CLI:
    python3 -m dplab sweep demos/demo_config.yaml --output.dir demo_results
    python3 -m dplab report demo_results
"""

import csv
import sys
from pathlib import Path

from dplab.runner import ExperimentConfig, report, sweep

here = Path(__file__).parent
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_results")
cfg = ExperimentConfig.load(here / "demo_config.yaml", {"output.dir": str(out)})
res = sweep(cfg)
print(f"{len(res.completed)} cells trained, {len(res.skipped)} reused from an earlier run, ok={res.ok}")

for path in report(out):
    print("wrote", path)

with open(out / "report" / "leakage_vs_epsilon.csv") as fh:
    for row in csv.DictReader(fh):
        if row["attack_name"] == "yeom_membership":
            print(f"{row['variant']:>4} eps={float(row['epsilon']):>7g} "
                  f"adv {float(row['advantage_mean']):+.4f} +/- {float(row['advantage_se']):.4f} "
                  f"bound {row['bound_clamped']}")

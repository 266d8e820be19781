"""
Sweeping the DPO learning rate
==============================

Full-size models use much smaller learning rates than the toy model can
learn with, so the usable range is re-swept here. One pretraining run is
shared; each learning rate gets its own run directory, and ``compare``
tabulates the results.

    python demos/lr_sweep.py [output-dir]
"""

import shutil
import sys
from pathlib import Path

from retmask.cli import main as retmask
from retmask.pipeline import compare
from retmask.train import LARGE_LR_SWEEP

root = Path(sys.argv[1] if len(sys.argv) > 1 else "runs/lr-sweep")
rates = [2e-3, 2e-4, 2e-5, *LARGE_LR_SWEEP[:1]]

# the base run builds pretraining, detection and the mask once
base = root / "base"
assert retmask(["run-all", "--seed", "42", "--out", str(base)]) == 0

dirs = []
for lr in rates:
    d = root / f"lr{lr:g}"
    for stage in ("pretrain", "detect", "ablate", "synth"):
        if not (d / stage).exists():
            shutil.copytree(base / stage, d / stage)
    code = retmask(["run-all", "--seed", "42", "--out", str(d),
                    "--set", f"train.peak_lr={lr}", "--set", f"train.min_lr={lr / 10}"])
    assert code == 0, code
    dirs.append(d)

# one row per learning rate
for row in compare(dirs):
    print(f"{row['run']:>12}  niah {row['niah_base']:.3f} -> {row['niah_trained']:.3f}  "
          f"masked delta {row['delta_masked_mean']:+.4f}  rest {row['delta_unmasked_mean']:+.4f}")

"""Run all four predictors on the same stream and print the comparison table.

``python demos/compare_predictors.py [frames]``.  The default of 120 frames
takes about a minute; 400 frames on the desk preset is what the acceptance
suite uses.
"""

import sys
import tempfile
import warnings
from pathlib import Path

from dyneit.harness import AlgoConfig, report, run_experiment, simulate_dataset
from dyneit.scenarios import builtin_configs

frames = int(sys.argv[1]) if len(sys.argv) > 1 else 120
data = simulate_dataset(builtin_configs()["desk-Baseline"], n_frames=frames)

with tempfile.TemporaryDirectory() as tmp:
    dirs = []
    for kind in ("none", "primal", "greedy", "affine"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            run_experiment(data, AlgoConfig(summary_window=(1, frames - 1)), kind, Path(tmp) / kind)
        dirs.append(Path(tmp) / kind)
    print(report(dirs))

"""Simulate a short Baseline stream on small meshes and reconstruct it online.

Run with ``python demos/quickstart.py [out_dir]``; writes the dataset and
a run directory (metrics, diagnostics, PGM rasters) under ``out_dir``.
"""

import sys
from pathlib import Path

from dyneit.harness import AlgoConfig, run_experiment, save_dataset, simulate_dataset
from dyneit.scenarios import ScenarioConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart_out")
scenario = ScenarioConfig(kind="Baseline", frames=60, sim_nodes=600, recon_nodes=300, name="quickstart")

data = simulate_dataset(scenario)
save_dataset(data, out / "data")
print(f"simulated {len(data.frames)} frames: {data.sim_mesh.n_nodes}-node truth, "
      f"{data.recon_mesh.n_nodes}-node reconstruction mesh")

algo = AlgoConfig(diagnostics=True, raster_every=20, summary_window=(1, 59))
res = run_experiment(data, algo, "affine", out / "affine")
s = res.summary
print(f"Affine: mean relative error {s.mean:.4f} (95% CI {s.ci_low:.4f}-{s.ci_high:.4f}), "
      f"median step {s.median_step_ms:.1f} ms")
for m in res.metrics[::10]:
    print(f"  frame {m.frame:3d}  e_rel {m.rel_error:.4f}  J_rel {m.J_rel:.4f}")
print(f"outputs in {out.resolve()}")

"""Numerical self-checks, the same ones ``dyneit verify`` runs.

``python demos/self_checks.py``: Jacobian vs finite differences, prox
operators vs their KKT conditions, the cumulative gap bound on a convex
instance, sampled smoothness constants and flow recovery.
"""

from dyneit.cli import verify_flow, verify_gap_bound, verify_gradients, verify_prox, verify_smoothness
from dyneit.mesh import build_disk_mesh

small = build_disk_mesh(target_nodes=300)
checks = {
    "gradients": lambda: verify_gradients(small),
    "prox": verify_prox,
    "gap-bound": verify_gap_bound,
    "smoothness": lambda: verify_smoothness(small),
    "flow": lambda: verify_flow(build_disk_mesh(target_nodes=2917)),
}
for name, run in checks.items():
    ok, rep = run()
    print(f"{name:<11} {'ok' if ok else 'FAILED':<7} " + ", ".join(f"{k}={v}" for k, v in rep.items()))

"""Command-line interface: ``dyneit simulate | reconstruct | verify | report``.

Exit codes: 0 success, 1 validation failure (bad input, failed check),
2 numeric failure during a run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import DynEITError, NumericError, SolverError

logger = logging.getLogger("dyneit")

MESH_PRESETS = {"small": 300, "desk": 800, "full": 2917}


def _mesh_arg(spec: str | None, default: str = "small"):
    from .mesh import build_disk_mesh, load_mesh

    spec = spec or default
    if spec in MESH_PRESETS:
        return build_disk_mesh(target_nodes=MESH_PRESETS[spec])
    return load_mesh(spec)


def _scenario_arg(spec: str):
    from .scenarios import builtin_configs, load_config

    configs = builtin_configs()
    if spec in configs:
        return configs[spec]
    if Path(spec).exists():
        return load_config(spec)
    raise DynEITError(f"unknown scenario {spec!r}; builtin: {', '.join(sorted(configs))}")


# ---------------------------------------------------------------------------
# verification routines; each returns (passed, report)


def verify_gradients(mesh, seed: int = 0):
    from .cem_derivative import jacobian, jacobian_fd
    from .cem_forward import forward_map

    rng = np.random.default_rng(seed)
    x = 1.0 + 0.5 * rng.random(mesh.n_nodes)
    J = jacobian(mesh, x).matrix
    Jfd = jacobian_fd(mesh, x)
    fd_err = float(np.max(np.abs(J - Jfd)) / np.max(np.abs(Jfd)))
    h = rng.standard_normal(mesh.n_nodes)
    S0 = forward_map(mesh, x).values
    eps = np.logspace(-1, -3, 5)
    rem = [np.linalg.norm(forward_map(mesh, x + e * h).values - S0 - e * (J @ h)) for e in eps]
    slope = float(np.polyfit(np.log(eps), np.log(rem), 1)[0])
    ok = fd_err <= 1e-5 and 1.9 <= slope <= 2.1
    return ok, {"fd_rel_error": fd_err, "taylor_slope": slope}


def verify_prox(n: int = 1000, seed: int = 0):
    from scipy.optimize import brentq

    from .tv_reg import prox_F, prox_Gstar

    rng = np.random.default_rng(seed)
    alpha = 0.5
    worst = 0.0
    for _ in range(n):
        y = rng.standard_normal(2) * rng.choice([0.1, 1.0, 10.0])
        # KKT: z = y / (1 + mu), mu >= 0 the multiplier of |z| <= alpha
        ny = np.linalg.norm(y)
        mu = 0.0 if ny <= alpha else brentq(lambda m: ny / (1 + m) - alpha, 0.0, ny / alpha, xtol=1e-15)
        worst = max(worst, float(np.linalg.norm(prox_Gstar(y[None, :], alpha)[0] - y / (1 + mu))))
    x = rng.standard_normal(n) * 1e5
    box_err = float(np.max(np.abs(prox_F(x) - np.minimum(np.maximum(x, 1e-5), 1e5))))
    return worst <= 1e-8 and box_err == 0.0, {"dual_max_error": worst, "box_max_error": box_err}


def verify_gap_bound(frames: int = 200, seed: int = 0):
    from .harness import linear_gap_problem, run_gap_bound

    res, _ = run_gap_bound(linear_gap_problem(frames, seed))
    return res.passed, {"lhs": res.lhs, "rhs": res.rhs, "violating_frame": res.violating_frame}


def verify_smoothness(mesh, samples: int = 20, seed: int = 0):
    from .analysis import estimate_smoothness

    est = estimate_smoothness(mesh, np.ones(mesh.n_nodes), 0.5, samples, np.random.default_rng(seed))
    ok = np.isfinite(est.s1_max) and np.isfinite(est.s2_max) and est.s1_max > 0
    return bool(ok), {"s1_max": est.s1_max, "s2_max": est.s2_max, "n_samples": est.n_samples}


def verify_flow(mesh, shifts: float = 3.0):
    from .analysis import flow_recovery

    d = shifts * mesh.edge_length()
    res = flow_recovery(mesh, (d, 0.0))
    return abs(res["ratio"] - 1.0) <= 0.2, {"ratio": res["ratio"], "shift": d}


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    from .harness import build_meshes, save_dataset, simulate_dataset

    scenario = _scenario_arg(args.scenario)
    if args.seed is not None:
        scenario = scenario.replace(seed=args.seed)
    if args.frames is not None:
        scenario = scenario.replace(frames=args.frames)
    recon = None
    if args.mesh is not None:
        recon = _mesh_arg(args.mesh)
        scenario = scenario.replace(recon_nodes=recon.n_nodes)
    sim, default_recon = build_meshes(scenario)
    ds = simulate_dataset(scenario, sim, recon or default_recon)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.frames)} frames to {args.out}")
    return 0


def cmd_reconstruct(args) -> int:
    from .harness import AlgoConfig, load_algo_config, load_dataset, run_experiment

    algo = load_algo_config(args.config) if args.config else AlgoConfig()
    ds = load_dataset(args.data)
    res = run_experiment(ds, algo, args.predictor, args.out, n_frames=args.frames)
    s = res.summary
    print(f"{s.predictor}: mean relative error {s.mean:.4f} "
          f"(95% CI {s.ci_low:.4f}-{s.ci_high:.4f}) over frames {s.window[0]}..{s.window[1]}")
    return 0


def cmd_verify(args) -> int:
    what = args.what
    if what == "gradients":
        ok, rep = verify_gradients(_mesh_arg(args.mesh, "small"), args.seed)
    elif what == "prox":
        ok, rep = verify_prox(seed=args.seed)
    elif what == "gap-bound":
        ok, rep = verify_gap_bound(seed=args.seed)
    elif what == "smoothness":
        ok, rep = verify_smoothness(_mesh_arg(args.mesh, "small"), seed=args.seed)
    else:
        ok, rep = verify_flow(_mesh_arg(args.mesh, "full"))
    print(json.dumps({"check": what, "passed": bool(ok), **rep}, default=float))
    return 0 if ok else 1


def cmd_report(args) -> int:
    from .harness import report

    print(report(args.runs, args.csv))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyneit", description="Online dynamic EIT reconstruction")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a measurement stream")
    s.add_argument("--scenario", required=True, help="builtin scenario name or JSON file")
    s.add_argument("--mesh", help="reconstruction mesh: preset (small, desk, full) or mesh file")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="run the online reconstruction on simulated data")
    r.add_argument("--data", required=True)
    r.add_argument("--predictor", choices=["none", "primal", "greedy", "affine"], default="affine")
    r.add_argument("--config", help="algorithm settings (JSON)")
    r.add_argument("--frames", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("verify", help="run a numerical self-check")
    v.add_argument("what", choices=["gradients", "prox", "gap-bound", "smoothness", "flow"])
    v.add_argument("--mesh")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    rp = sub.add_parser("report", help="compare finished runs")
    rp.add_argument("runs", nargs="+")
    rp.add_argument("--csv")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (NumericError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DynEITError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

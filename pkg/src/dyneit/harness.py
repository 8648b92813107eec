"""Experiment orchestration, metrics and persistence.

:func:`run_experiment` simulates (or loads) a measurement stream, runs the
online reconstruction with one predictor and writes per-frame metrics,
optional rasters and flow dumps plus a JSON summary.  :func:`report`
collects summaries of several runs into one comparison table.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .cem_derivative import jacobian
from .cem_forward import PRECISION_SCALE, X_MAX, X_MIN, forward_map, read_frames_csv, write_frames_csv
from .errors import DynEITError, ParameterError, ValidationError
from .lagged_gradient import EitEngine, LaggedGradient
from .mesh import Mesh, build_disk_mesh, interpolate, load_mesh, save_mesh
from .popdn_core import (
    Coupling,
    GapRecord,
    StepParams,
    check_step_condition,
    compute_tau,
    gap_record,
    gram_norm,
    initial_state,
    popdn_step,
)
from .predictors import Predictor, PredictorConfig, PredictorKind, write_flow_csv
from .scenarios import ScenarioConfig, phantom_values, save_config, simulate_frame
from .tv_reg import ALPHA, apply_K, estimate_K_norm, tv_value

logger = logging.getLogger(__name__)

#: command-line names of the predictor kinds
PREDICTOR_ALIASES = {
    "none": PredictorKind.NO_PREDICTION,
    "primal": PredictorKind.PRIMAL_ONLY,
    "greedy": PredictorKind.GREEDY,
    "affine": PredictorKind.AFFINE,
}


def relative_error(x, x_true) -> float:
    """``||x - x_true|| / ||x_true||`` over nodal coefficients."""
    x_true = np.asarray(x_true, dtype=float)
    den = np.linalg.norm(x_true)
    if den == 0:
        raise ValidationError("ground truth has zero norm")
    return float(np.linalg.norm(np.asarray(x, dtype=float) - x_true) / den)


def relative_objective(J_k_value: float, J_0_value: float) -> float:
    if J_0_value == 0:
        raise ValidationError("reference objective is zero")
    return float(J_k_value / J_0_value)


@dataclass
class FrameMetrics:
    frame: int
    J_value: float
    J_rel: float
    rel_error: float
    wall_time_ms: float
    predictor: str = ""
    eps_dagger: float = float("nan")
    gap: float = float("nan")
    lag: float = 0.0
    tau: float = float("nan")


@dataclass
class RunSummary:
    """Window statistics of ``rel_error``; ``*_percent`` fields are the same values times 100."""

    predictor: str
    mean: float
    ci_low: float
    ci_high: float
    n: int
    window: tuple[int, int]
    first: float = float("nan")
    runtime_s: float = 0.0
    median_step_ms: float = float("nan")
    scenario: str = ""

    @property
    def mean_percent(self) -> float:
        return 100.0 * self.mean

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["window"] = list(self.window)
        d["mean_percent"] = self.mean_percent
        d["ci_low_percent"] = 100.0 * self.ci_low
        d["ci_high_percent"] = 100.0 * self.ci_high
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunSummary":
        names = {f.name for f in dataclasses.fields(cls)}
        kw = {k: v for k, v in d.items() if k in names}
        kw["window"] = tuple(kw.get("window", (1, 500)))
        return cls(**kw)


def t_interval(samples, confidence: float = 0.95):
    """Mean and two-sided Student-t confidence interval."""
    s = np.asarray(samples, dtype=float)
    n = len(s)
    if n < 2:
        raise ValidationError("need at least two samples for a confidence interval")
    mean = float(s.mean())
    half = float(stats.t.ppf(0.5 + confidence / 2, n - 1) * s.std(ddof=1) / np.sqrt(n))
    return mean, mean - half, mean + half


def summarize(metrics, window=(1, 500), predictor: str = "", confidence: float = 0.95) -> RunSummary:
    """Mean relative error and its confidence interval over frames ``window`` (inclusive).

    A window reaching past the run is clipped with a warning.
    """
    metrics = list(metrics)
    frames = np.array([m.frame for m in metrics])
    lo, hi = window
    if len(frames) and hi > frames.max():
        warnings.warn(f"summary window {lo}..{hi} clipped to {lo}..{frames.max()}", stacklevel=2)
        hi = int(frames.max())
    sel = [m.rel_error for m in metrics if lo <= m.frame <= hi]
    mean, low, high = t_interval(sel, confidence)
    first = next((m.rel_error for m in metrics if m.frame == lo), float("nan"))
    steps = [m.wall_time_ms for m in metrics if m.frame >= 1]
    pred = predictor or (metrics[0].predictor if metrics else "")
    return RunSummary(pred, mean, low, high, len(sel), (lo, hi), first,
                      median_step_ms=float(np.median(steps)) if steps else float("nan"))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AlgoConfig:
    """Reconstruction settings; defaults are the documented experiment parameters.

    ``tau=None`` derives the step length from the Jacobian of each
    linearization (``tau_factor / ||J J^T||``).
    """

    alpha: float = ALPHA
    sigma: float = 1.0
    kappa: float = 0.15
    tau: float | None = None
    tau_factor: float = 0.85
    x_min: float = X_MIN
    x_max: float = X_MAX
    scale: float = PRECISION_SCALE
    beta1: float = 1e-3
    beta2: float = 1e-5
    cadence: int = 4
    affine_gain: float = 10.0
    affine_threshold: float = 1e-12
    affine_gradient: str = "raw"
    lag_mode: str = "sync"
    lag: int = 0
    gradient_variant: str = "taylor"
    x0: float = 1.0
    diagnostics: bool = False
    raster_every: int = 0
    raster_size: int = 64
    flow_every: int = 0
    summary_window: tuple[int, int] = (1, 500)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["summary_window"] = list(self.summary_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AlgoConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown algorithm keys: {sorted(unknown)}")
        d = dict(d)
        if "summary_window" in d:
            d["summary_window"] = tuple(d["summary_window"])
        return cls(**d)

    def predictor_config(self, kind) -> PredictorConfig:
        return PredictorConfig(kind=kind, beta1=self.beta1, beta2=self.beta2, cadence=self.cadence,
                               affine_gain=self.affine_gain, affine_threshold=self.affine_threshold,
                               affine_gradient=self.affine_gradient)

    def step_params(self, tau: float) -> StepParams:
        return StepParams(tau=tau, sigma=self.sigma, kappa=self.kappa, alpha=self.alpha,
                          x_min=self.x_min, x_max=self.x_max)


def load_algo_config(path) -> AlgoConfig:
    with open(path, encoding="utf-8") as fh:
        return AlgoConfig.from_dict(json.load(fh))


def _json_dump(obj, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    """Measurement stream together with the meshes it refers to."""

    scenario: ScenarioConfig
    sim_mesh: Mesh
    recon_mesh: Mesh
    frames: list = field(default_factory=list)


def build_meshes(scenario: ScenarioConfig) -> tuple[Mesh, Mesh]:
    """Simulation and reconstruction meshes of a scenario (distinct resolutions)."""
    R = scenario.domain_radius
    sim = build_disk_mesh(radius=R, target_nodes=scenario.sim_nodes)
    recon = build_disk_mesh(radius=R, target_nodes=scenario.recon_nodes)
    return sim, recon


def simulate_dataset(scenario: ScenarioConfig, sim_mesh: Mesh | None = None, recon_mesh: Mesh | None = None,
                     n_frames: int | None = None, scale: float = PRECISION_SCALE) -> Dataset:
    if sim_mesh is None or recon_mesh is None:
        s, r = build_meshes(scenario)
        sim_mesh = sim_mesh or s
        recon_mesh = recon_mesh or r
    n = scenario.frames if n_frames is None else min(n_frames, scenario.frames)
    frames = [simulate_frame(scenario, k, sim_mesh, recon_mesh=recon_mesh, scale=scale) for k in range(n)]
    return Dataset(scenario, sim_mesh, recon_mesh, frames)


def save_dataset(ds: Dataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(ds.scenario, out / "scenario.json")
    save_mesh(ds.sim_mesh, out / "sim_mesh.txt")
    save_mesh(ds.recon_mesh, out / "recon_mesh.txt")
    write_frames_csv(ds.frames, out / "frames.csv")


def load_dataset(data_dir) -> Dataset:
    from .scenarios import load_config

    d = Path(data_dir)
    missing = [f for f in ("scenario.json", "recon_mesh.txt", "frames.csv") if not (d / f).exists()]
    if missing:
        raise ValidationError(f"{d}: missing {', '.join(missing)}")
    scenario = load_config(d / "scenario.json")
    recon = load_mesh(d / "recon_mesh.txt")
    sim = load_mesh(d / "sim_mesh.txt") if (d / "sim_mesh.txt").exists() else recon
    return Dataset(scenario, sim, recon, read_frames_csv(d / "frames.csv"))


# ---------------------------------------------------------------------------
# rasters


def write_pgm(values, path, lo: float, hi: float) -> None:
    """8-bit binary PGM; ``values`` (2-D) mapped linearly from ``[lo, hi]`` to 0..255.

    NaN pixels (outside the domain) are written black.
    """
    v = np.asarray(values, dtype=float)
    scaled = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    img = np.where(np.isfinite(v), np.round(255 * scaled), 0).astype(np.uint8)
    h, w = img.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    os.replace(tmp, path)


def rasterize(mesh: Mesh, values, size: int = 64) -> np.ndarray:
    """Sample a nodal field on a ``size x size`` grid over the mesh bounding box (row 0 on top)."""
    lo = mesh.nodes.min(axis=0)
    hi = mesh.nodes.max(axis=0)
    xs = np.linspace(lo[0], hi[0], size)
    ys = np.linspace(hi[1], lo[1], size)
    X, Y = np.meshgrid(xs, ys)
    return interpolate(mesh, values, np.column_stack([X.ravel(), Y.ravel()])).reshape(size, size)


# ---------------------------------------------------------------------------
# the online loop


@dataclass
class RunResult:
    summary: RunSummary
    metrics: list
    gap_records: list = field(default_factory=list)
    final_x: np.ndarray | None = None
    completed_frames: int = 0


def comparison_point(mesh: Mesh, scenario: ScenarioConfig, k: int, alpha: float):
    """Truth-based comparison pair: ``x`` at the nodes and the aligned dual ``alpha K x / |K x|``."""
    xb = phantom_values(scenario, k, mesh.nodes)
    g = apply_K(mesh, xb)
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    yb = np.where(nrm > 0, alpha * g / np.where(nrm > 0, nrm, 1.0), 0.0)
    return xb, yb


def run_experiment(scenario: ScenarioConfig | Dataset, algo: AlgoConfig, predictor_kind, output_dir=None,
                   n_frames: int | None = None, provider=None) -> RunResult:
    """Run the online reconstruction over a measurement stream.

    Frame 0 records the initial iterate (so ``J_rel = 1`` there); the step
    for frame ``k >= 1`` uses the data of frame ``k``.  The step condition
    is checked once on the initial linearization and a failing condition
    refuses the run before frame 0.
    """
    t_start = time.perf_counter()
    kind = PREDICTOR_ALIASES.get(predictor_kind, predictor_kind)
    kind = PredictorKind(kind)
    ds = scenario if isinstance(scenario, Dataset) else simulate_dataset(scenario, n_frames=n_frames, scale=algo.scale)
    mesh, sc = ds.recon_mesh, ds.scenario
    frames = ds.frames if n_frames is None else ds.frames[:n_frames]
    if len(frames) < 1:
        raise ValidationError("no frames to reconstruct")
    out = Path(output_dir) if output_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    coupling = Coupling.from_mesh(mesh)
    x0 = np.full(mesh.n_nodes, float(algo.x0))
    J0 = jacobian(mesh, x0, scale=algo.scale)
    tau0 = algo.tau if algo.tau is not None else compute_tau(J0, algo.tau_factor)
    params = algo.step_params(tau0)
    K_norm = estimate_K_norm(mesh)
    check = check_step_condition(params, gram_norm(J0.matrix), K_norm)
    if not check.passed:
        raise ParameterError(
            f"step condition fails before frame 0 (tau={tau0:.4g}, L tau={check.smooth_term:.4g}, "
            f"tau sigma |K|^2={check.coupling_term:.4g})"
        )

    if provider is None:
        provider = LaggedGradient(EitEngine(mesh, algo.scale), mode=algo.lag_mode, lag=algo.lag,
                                  variant=algo.gradient_variant, tau_factor=algo.tau_factor)
    fixed_tau = algo.tau is not None

    class _FixedTau:
        # wraps the provider so a user-fixed tau is never overridden
        def evaluate(self, x, b, k):
            ev = provider.evaluate(x, b, k)
            return dataclasses.replace(ev, tau=None) if fixed_tau else ev

    grad_provider = _FixedTau()
    predictor = Predictor(mesh, algo.predictor_config(kind), algo.alpha, algo.x_min, algo.x_max)
    state = initial_state(x0, coupling.zeros_dual(), tau0)

    S0 = forward_map(mesh, x0, scale=algo.scale).values
    tv0 = tv_value(mesh, x0, algo.alpha)

    def objective(x, b, S=None):
        S = forward_map(mesh, x, scale=algo.scale).values if S is None else S
        r = S - b.values
        return 0.5 * float(r @ r) + tv_value(mesh, x, algo.alpha)

    metrics: list[FrameMetrics] = []
    gaps: list[GapRecord] = []
    prev_bar = comparison_point(mesh, sc, frames[0].frame, algo.alpha)
    J_init = objective(x0, frames[0], S0)
    metrics.append(FrameMetrics(0, J_init, 1.0, relative_error(x0, prev_bar[0]), 0.0, kind.value, tau=tau0))
    diag_rows = [(0, J_init, metrics[0].rel_error, float("nan"), float("nan"), 0.0)]
    completed = 0
    cur_params = params
    try:
        for b in frames[1:]:
            k = b.frame
            prev_state, prev_params = state, cur_params
            state = popdn_step(state, b, predictor, grad_provider, coupling, cur_params.with_tau(state.tau))
            cur_params = cur_params.with_tau(state.tau)
            xb, yb = comparison_point(mesh, sc, k, algo.alpha)
            J_k0 = 0.5 * float((S0 - b.values) @ (S0 - b.values)) + tv0
            eps = gap = float("nan")
            if algo.diagnostics:
                Jk = objective(state.x, b)

                def E(x, b=b):
                    r = forward_map(mesh, x, scale=algo.scale).values - b.values
                    return 0.5 * float(r @ r)

                rec = gap_record(k, (state.x, state.y), (state.x_pred, state.y_pred), (prev_state.x, prev_state.y),
                                 (xb, yb), prev_bar, E, coupling, cur_params, prev_params)
                gaps.append(rec)
                eps, gap = rec.eps_dagger, rec.gap
            else:
                Jk = float("nan")
            m = FrameMetrics(k, Jk, Jk / J_k0 if np.isfinite(Jk) else float("nan"), relative_error(state.x, xb),
                             state.step_ms, kind.value, eps, gap, state.lag, state.tau)
            metrics.append(m)
            diag_rows.append((k, Jk, m.rel_error, eps, gap, state.step_ms))
            prev_bar = (xb, yb)
            completed = k
            if out is not None and algo.raster_every and k % algo.raster_every == 0:
                write_pgm(rasterize(mesh, state.x, algo.raster_size), out / f"frame_{k:05d}.pgm",
                          min(sc.x_incl, sc.x_bg), max(sc.x_incl, sc.x_bg))
            if out is not None and algo.flow_every and k % algo.flow_every == 0 and state.flow is not None:
                write_flow_csv(state.flow, out / f"flow_{k:05d}.csv")
    except DynEITError as exc:
        logger.error("run aborted after frame %d: %s", completed, exc)
        if out is not None:
            _write_diagnostics(diag_rows, out / "diagnostics.csv")
            _json_dump({"aborted": True, "last_completed_frame": completed, "error": str(exc)}, out / "summary.json")
        raise
    finally:
        close = getattr(provider, "close", None)
        if close is not None:
            close()

    window = algo.summary_window
    if len(metrics) > 2:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            summary = summarize(metrics, window, kind.value)
    else:
        summary = RunSummary(kind.value, metrics[-1].rel_error, metrics[-1].rel_error, metrics[-1].rel_error,
                             len(metrics), window)
    summary.runtime_s = time.perf_counter() - t_start
    summary.scenario = sc.name or sc.kind
    if out is not None:
        _write_diagnostics(diag_rows, out / "diagnostics.csv")
        _write_metrics(metrics, out / "metrics.csv")
        _json_dump(summary.to_dict(), out / "summary.json")
        _json_dump(algo.to_dict(), out / "algo.json")
        save_config(sc, out / "scenario.json")
        write_pgm(rasterize(mesh, state.x, algo.raster_size), out / "final.pgm",
                  min(sc.x_incl, sc.x_bg), max(sc.x_incl, sc.x_bg))
    return RunResult(summary, metrics, gaps, state.x, completed)


def _write_diagnostics(rows, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "J_value", "rel_error", "eps_dagger", "gap", "wall_time_ms"])
        for r in rows:
            w.writerow([r[0]] + [repr(float(v)) for v in r[1:]])
    os.replace(tmp, path)


def _write_metrics(metrics, path) -> None:
    tmp = f"{path}.tmp"
    names = [f.name for f in dataclasses.fields(FrameMetrics)]
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(names)
        for m in metrics:
            w.writerow([getattr(m, n) for n in names])
    os.replace(tmp, path)


def read_metrics(path) -> list[FrameMetrics]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for f in dataclasses.fields(FrameMetrics):
                v = row[f.name]
                kw[f.name] = int(v) if f.name == "frame" else (v if f.name == "predictor" else float(v))
            out.append(FrameMetrics(**kw))
    return out


# ---------------------------------------------------------------------------
# comparison table


def report(run_dirs, out_csv=None) -> str:
    """Comparison table of several runs, sorted by window mean.

    Missing runs are listed in the raised :class:`ValidationError`.
    """
    rows, missing = [], []
    for d in run_dirs:
        p = Path(d) / "summary.json"
        if not p.exists():
            missing.append(str(d))
            continue
        with open(p, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("aborted"):
            missing.append(f"{d} (aborted)")
            continue
        rows.append(RunSummary.from_dict(data))
    if missing:
        raise ValidationError("missing runs: " + ", ".join(missing))
    rows.sort(key=lambda s: s.mean)
    header = ["scenario", "predictor", "re_first", "re_mean", "ci_low", "ci_high", "re_mean_percent"]
    table = [[s.scenario, s.predictor, s.first, s.mean, s.ci_low, s.ci_high, s.mean_percent] for s in rows]
    if out_csv is not None:
        tmp = f"{out_csv}.tmp"
        with open(tmp, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in table:
                w.writerow(r[:2] + [repr(float(v)) for v in r[2:]])
        os.replace(tmp, out_csv)
    lines = [f"{'scenario':<28}{'predictor':<14}{'RE first':>10}{'RE mean':>10}{'95% CI':>22}"]
    for s in rows:
        ci = f"{s.ci_low:.4f} - {s.ci_high:.4f}"
        lines.append(f"{s.scenario:<28}{s.predictor:<14}{s.first:>10.4f}{s.mean:>10.4f}{ci:>22}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# convex test instance for the cumulative gap bound


@dataclass
class LinearGapProblem:
    """Time-varying ``E_k(x) = 0.5 ||A x + c - b_k||^2`` with TV coupling on a small mesh.

    ``b[k]`` is the data of frame ``k`` (``b[0]`` is only used for
    comparison points).  ``A`` is scaled so that ``||A||^2 = L``.
    """

    mesh: Mesh
    A: np.ndarray
    c: np.ndarray
    b: np.ndarray
    coupling: Coupling
    params: StepParams
    L: float

    def E(self, k: int):
        def E_k(x):
            r = self.A @ x + self.c - self.b[k]
            return 0.5 * float(r @ r)

        return E_k


def linear_gap_problem(n_frames: int = 200, seed: int = 0, target_nodes: int = 60, L: float = 0.5,
                       tau: float = 1.0, coupling_factor: float = 0.1, alpha: float = ALPHA,
                       noise: float = 1e-2) -> LinearGapProblem:
    """Build a moving-bump linear inverse problem with step lengths satisfying the metric condition.

    ``sigma = coupling_factor / (tau ||K||^2)``; ``ek_loss = L`` so the
    step term carries the smoothness remainder of ``E``.
    """
    rng = np.random.default_rng(seed)
    mesh = build_disk_mesh(target_nodes=target_nodes)
    n = mesh.n_nodes
    A = rng.standard_normal((n + 20, n))
    A *= np.sqrt(L) / np.linalg.norm(A, 2)
    c = 0.1 * rng.standard_normal(A.shape[0])
    b = np.empty((n_frames + 1, A.shape[0]))
    for k in range(n_frames + 1):
        th = 2 * np.pi * k / max(n_frames, 1)
        centre = 0.5 * np.array([np.cos(th), np.sin(th)])
        truth = 1.0 - 0.8 * np.exp(-np.sum((mesh.nodes - centre) ** 2, axis=1) / 0.05)
        b[k] = A @ truth + c + noise * rng.standard_normal(A.shape[0])
    coupling = Coupling.from_mesh(mesh)
    K_norm = estimate_K_norm(mesh)
    sigma = coupling_factor / (tau * K_norm**2)
    params = StepParams(tau=tau, sigma=sigma, alpha=alpha, ek_loss=L)
    return LinearGapProblem(mesh, A, c, b, coupling, params, L)


def default_comparison(problem: LinearGapProblem, k: int):
    """Feasible (not optimal) comparison pair: clipped least squares and zero dual."""
    x = np.linalg.lstsq(problem.A, problem.b[k] - problem.c, rcond=None)[0]
    p = problem.params
    return np.clip(x, p.x_min, p.x_max), problem.coupling.zeros_dual()


def run_gap_bound(problem: LinearGapProblem, comparisons=None, predictor=None, tol: float = 1e-8):
    """Run the online method on ``problem`` and check the cumulative gap bound.

    ``comparisons[k]`` is the pair ``(xbar_k, ybar_k)`` for ``k = 0..F``
    (defaults to :func:`default_comparison`).  Returns the
    :class:`GapBoundResult` and the per-frame records.
    """
    from .popdn_core import LinearGradient, identity_predictor, verify_gap_bound

    F = problem.b.shape[0] - 1
    if comparisons is None:
        comparisons = [default_comparison(problem, k) for k in range(F + 1)]
    params = problem.params
    grad = LinearGradient(problem.A, problem.c)
    predictor = identity_predictor if predictor is None else predictor
    state = initial_state(np.ones(problem.mesh.n_nodes), problem.coupling.zeros_dual(), params.tau)
    u0 = (state.x, state.y)
    records = []
    for k in range(1, F + 1):
        prev = state
        state = popdn_step(state, problem.b[k], predictor, grad, problem.coupling, params)
        ub = tuple(np.asarray(v, dtype=float) for v in comparisons[k])
        ub_prev = tuple(np.asarray(v, dtype=float) for v in comparisons[k - 1])
        records.append(gap_record(k, (state.x, state.y), (state.x_pred, state.y_pred), (prev.x, prev.y),
                                  ub, ub_prev, problem.E(k), problem.coupling, params))
    result = verify_gap_bound(records, u0, tuple(comparisons[0]), problem.coupling, params, tol=tol)
    return result, records

"""Dynamic phantoms and simulated measurement streams.

Each scenario moves one or two circular inclusions of low conductivity
through a homogeneous disk.  Frames are simulated on a finer mesh than
the one used for reconstruction, with multiplicative Gaussian noise.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import warnings
from dataclasses import dataclass

import numpy as np

from .cem_forward import (
    PRECISION_SCALE,
    X_MAX,
    X_MIN,
    MeasurementFrame,
    extract_measurements,
    forward_currents,
)
from .errors import ParameterError, ValidationError
from .mesh import Mesh

logger = logging.getLogger(__name__)

KINDS = ("Baseline", "CircularMotion", "HaltingMotion", "DisappearingInclusions")


class InverseCrimeWarning(UserWarning):
    """Data simulated on the reconstruction mesh itself."""


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario description; lengths are fractions of the domain radius.

    ``start`` and ``end`` are the Baseline endpoints; ``path_radius`` is the
    radius of the circular paths.  ``recon_nodes`` and ``sim_nodes`` size
    the two meshes.
    """

    kind: str = "Baseline"
    frames: int = 400
    x_bg: float = 1.0
    x_incl: float = 1e-4
    inclusion_radius: float = 0.2
    start: tuple[float, float] = (-0.6, 0.0)
    end: tuple[float, float] = (0.6, 0.0)
    path_radius: float = 0.5
    period: int = 2000
    vanish: tuple[int, int] = (500, 1000)
    reappear: int = 1500
    noise_rel: float = 1e-4
    seed: int = 0
    domain_radius: float = 1.0
    recon_nodes: int = 800
    sim_nodes: int = 1500
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown scenario kind {self.kind!r}; expected one of {KINDS}")
        if self.frames < 1:
            raise ParameterError("frames must be at least 1")
        for v in (self.x_bg, self.x_incl):
            if not X_MIN <= v <= X_MAX:
                raise ParameterError(f"conductivity {v} outside [{X_MIN}, {X_MAX}]")
        if self.noise_rel < 0:
            raise ParameterError("noise_rel must be nonnegative")
        object.__setattr__(self, "start", tuple(float(s) for s in self.start))
        object.__setattr__(self, "end", tuple(float(s) for s in self.end))
        object.__setattr__(self, "vanish", tuple(int(s) for s in self.vanish))

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("start", "end", "vanish"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def save_config(config: ScenarioConfig, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)
    os.replace(tmp, path)


def load_config(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return ScenarioConfig.from_dict(json.load(fh))


def _halting_progress(k: int, period: int) -> float:
    # speed proportional to |sin(2 pi k / period)|: stops every half period
    half = period / 2.0
    return np.floor(k / half) + 0.5 * (1.0 - np.cos(np.pi * (k % half) / half))


def inclusions_at(config: ScenarioConfig, k: int) -> list[tuple[np.ndarray, float]]:
    """Centres and radii (domain units) of the inclusions present at frame ``k``."""
    if not 0 <= k < config.frames:
        raise ParameterError(f"frame {k} outside [0, {config.frames})")
    R = config.domain_radius
    r = config.inclusion_radius * R
    kind = config.kind
    if kind == "Baseline":
        s = k / max(config.frames - 1, 1)
        c = (1 - s) * np.array(config.start) + s * np.array(config.end)
        return [(R * c, r)]
    if kind == "CircularMotion":
        th = 2 * np.pi * k / config.period
        return [(R * config.path_radius * np.array([np.cos(th), np.sin(th)]), r)]
    if kind == "HaltingMotion":
        th = np.pi * _halting_progress(k, config.period)
        return [(R * config.path_radius * np.array([np.cos(th), np.sin(th)]), r)]
    th = 2 * np.pi * k / config.period
    out = []
    for i, phase in enumerate((0.0, np.pi)):
        gone = config.vanish[i] <= k < config.reappear
        if not gone:
            c = R * config.path_radius * np.array([np.cos(th + phase), np.sin(th + phase)])
            out.append((c, r))
    return out


def phantom_values(config: ScenarioConfig, k: int, points) -> np.ndarray:
    """Conductivity at arbitrary points: ``x_incl`` within an inclusion disk, else ``x_bg``."""
    pts = np.asarray(points, dtype=float)
    out = np.full(len(pts), config.x_bg)
    for c, r in inclusions_at(config, k):
        out[np.hypot(pts[:, 0] - c[0], pts[:, 1] - c[1]) <= r] = config.x_incl
    return out


def phantom_at(config: ScenarioConfig, k: int, mesh: Mesh) -> np.ndarray:
    """Nodal phantom on ``mesh`` (no anti-aliasing, two distinct values)."""
    return phantom_values(config, k, mesh.nodes)


def frame_rng(seed: int, k: int) -> np.random.Generator:
    """Counter-based generator for frame ``k`` (Philox keyed by ``(seed, k)``)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(k)])))


def simulate_frame(
    config: ScenarioConfig,
    k: int,
    sim_mesh: Mesh,
    patterns=None,
    rng: np.random.Generator | None = None,
    recon_mesh: Mesh | None = None,
    scale: float = PRECISION_SCALE,
) -> MeasurementFrame:
    """Noisy scaled measurements of frame ``k``.

    Every current gets independent noise with standard deviation
    ``noise_rel * |I|``.  Passing the reconstruction mesh enables the
    inverse-crime check.
    """
    if recon_mesh is not None and recon_mesh == sim_mesh:
        warnings.warn("inverse crime: data simulated on the reconstruction mesh", InverseCrimeWarning, stacklevel=2)
    x = phantom_at(config, k, sim_mesh)
    I, mask = forward_currents(sim_mesh, x, patterns)
    if config.noise_rel > 0:
        rng = frame_rng(config.seed, k) if rng is None else rng
        I = I + config.noise_rel * np.abs(I) * rng.standard_normal(I.shape)
    return MeasurementFrame(extract_measurements(I, mask, scale), frame=k, scale=scale)


def builtin_configs() -> dict[str, ScenarioConfig]:
    """Full-scale scenarios and their desk-sized counterparts (``desk-`` prefix)."""
    base = {
        "Baseline": ScenarioConfig(kind="Baseline", frames=400),
        "CircularMotion": ScenarioConfig(kind="CircularMotion", frames=2000),
        "HaltingMotion": ScenarioConfig(kind="HaltingMotion", frames=2000),
        "DisappearingInclusions": ScenarioConfig(kind="DisappearingInclusions", frames=2000, inclusion_radius=0.15),
    }
    out = {}
    for name, cfg in base.items():
        out[name] = cfg.replace(recon_nodes=2917, sim_nodes=5039, name=name)
        out[f"desk-{name}"] = cfg.replace(recon_nodes=800, sim_nodes=1500, name=f"desk-{name}")
    return out


def write_truth_csv(config: ScenarioConfig, mesh: Mesh, frames, path) -> None:
    """Ground-truth nodal values, one row per frame (frame index first)."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("frame," + ",".join(f"x_{i}" for i in range(mesh.n_nodes)) + "\n")
        for k in frames:
            vals = phantom_at(config, k, mesh)
            fh.write(f"{k}," + ",".join(repr(float(v)) for v in vals) + "\n")
    os.replace(tmp, path)

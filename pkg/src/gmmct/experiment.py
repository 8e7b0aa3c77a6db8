"""Experiment harness: configuration, synthetic scenes, persistence, metrics.

A run is a pure function of its configuration and seed. Every file it
writes is plain text (JSON, TSV, or the sinogram grid format below) with
round-trip-exact floats and no timestamps, so two runs with the same
inputs produce byte-identical directories.

Sinogram files hold a header of ``# key = value`` lines (every geometry
field) followed by ``M_t`` rows of ``M_r`` values in ``%.16e``.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from .geometry import AcquisitionGeometry, Projectile, rotation_dim
from .model import ParticleParams, Scene, Sinogram, render_particle, simulate_sinogram
from .modes import ModeFrame, ModeSet, PeakConfig, detect_modes
from .optim import RNG_NAME, check_gradient, rectangular_assignment, spawn_rngs
from .stage1 import (UNMATCHED, Stage1Config, Stage1Error, TrajectoryEstimate, assignment_loss,
                     optimize_trajectories)
from .stage2 import (MorphologyEstimate, Stage2Config, _positive_mask, optimize_morphology,
                     pack_scene, stage2_objective, unpack_scene)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
RENDER_GRID = 256
RENDER_HALF_WIDTH = 0.5


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class GenerationError(RuntimeError):
    """Rejection sampling ran out of budget."""


class OutputExistsError(OSError):
    """Refusing to overwrite an existing output file."""


# ---------------------------------------------------------------------------
# configuration


def _load_json_resource(name: str) -> dict:
    return json.loads(resources.files("gmmct").joinpath("data", name).read_text())


def config_schema() -> dict:
    return _load_json_resource("config.schema.json")


def default_config_dict() -> dict:
    """The packaged benchmark configuration (five particles, explicit truth)."""
    return _load_json_resource("default_config.json")


@dataclass
class GenerationConfig:
    """Distributions for synthetic particles.

    Attenuation of particle ``n`` (0-based) is drawn from
    ``N(alpha_mean + n alpha_step, alpha_std^2)`` and redrawn until positive.
    Shape diagonals are uniform on ``[u_diag_low, u_diag_high]``, strictly
    upper entries ``N(u_offdiag_mean, u_offdiag_std^2)``; a shape is redrawn
    while ``max(diag) / min(diag) < anisotropy_min``. Angular velocities are
    uniform on ``[omega_min, omega_max]`` per rotation coordinate and are
    redrawn while :func:`guard_band_violation` holds.
    """

    alpha_mean: float = 15.0
    alpha_step: float = 5.0
    alpha_std: float = 1.0
    u_diag_low: float = 7.5
    u_diag_high: float = 25.5
    u_offdiag_mean: float = 10.0
    u_offdiag_std: float = 1.0
    anisotropy_min: float = 1.5
    omega_min: float = 2.0
    omega_max: float = 6.0
    guard_band: float = 0.1
    mu: tuple = (1.0, 1.0)
    a: tuple = (0.0, -9.81)
    velocities: list | None = None
    velocity_low: tuple | None = None
    velocity_high: tuple | None = None
    max_rejections: int = 10_000


@dataclass
class ExperimentConfig:
    geometry: AcquisitionGeometry
    n_particles: int
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    truth: Scene | None = None
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, data: dict, seed: int | None = None) -> "ExperimentConfig":
        try:
            jsonschema.validate(data, config_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from exc
        data = copy.deepcopy(data)
        if seed is not None:
            data["seed"] = int(seed)
        try:
            geom = AcquisitionGeometry.from_dict(data["geometry"])
            d = geom.dim
            n = int(data["n_particles"])
            gen = GenerationConfig(**data.get("generation", {}))
            for name in ("mu", "a"):
                if len(getattr(gen, name)) != d:
                    raise ConfigError(f"generation.{name} must have {d} entries")
            truth = None
            if data.get("truth") is not None:
                truth = Scene(ParticleParams.from_dict(p) for p in data["truth"])
                if len(truth) != n or truth.dim != d:
                    raise ConfigError("truth must list n_particles particles of the geometry's dimension")
            if truth is None and gen.velocities is None and gen.velocity_low is None:
                raise ConfigError("need generation.velocities, a velocity box, or explicit truth")
            if gen.velocities is not None:
                vs = np.asarray(gen.velocities, dtype=float)
                if vs.shape != (n, d):
                    raise ConfigError(f"generation.velocities must be {n} x {d}")
                if np.any(vs[:, 0] <= 0):
                    raise ConfigError("velocities must have a positive first component")
            s1 = dict(data.get("stage1", {}))
            s1.setdefault("mu", list(gen.mu))
            s1.setdefault("a", list(gen.a))
            s1.setdefault("init_mean", [1.0] * d)
            s1.setdefault("init_cov", (2.25 * np.eye(d)).tolist())
            if "peaks" in s1:
                s1["peaks"] = PeakConfig(**s1["peaks"])
            for key in ("init_mean", "mu", "a"):
                if key in s1:
                    s1[key] = tuple(s1[key])
            if "init_cov" in s1:
                s1["init_cov"] = tuple(tuple(r) for r in s1["init_cov"])
            master = int(data.get("seed", 0))
            stage1 = Stage1Config(**{**s1, "seed": master})
            s2 = dict(data.get("stage2", {}))
            if "init_diag" in s2 and s2["init_diag"] is not None:
                s2["init_diag"] = tuple(s2["init_diag"])
            stage2 = Stage2Config(**{**s2, "seed": master})
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(geom, n, gen, truth, stage1, stage2, master, data)

    @classmethod
    def load(cls, path, seed: int | None = None) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data, seed)

    def to_dict(self) -> dict:
        out = copy.deepcopy(self.raw)
        out["seed"] = self.seed
        return out


# ---------------------------------------------------------------------------
# scene generation


def guard_band_violation(theta, dt: float, frac: float = 0.1) -> bool:
    """True when a rotation coordinate turns by nearly a half-turn multiple per frame.

    A Gaussian is symmetric under a half-turn, so a per-frame angle
    ``|theta| * dt`` within ``frac * pi`` of ``k * pi`` with ``k >= 1`` looks
    (nearly) frozen at the sampling rate. ``k = 0`` is not banned: slow
    rotation is the normal regime, not an alias.
    """
    for w in np.atleast_1d(theta):
        x = abs(float(w)) * dt
        k = round(x / math.pi)
        if k >= 1 and abs(x - k * math.pi) < frac * math.pi:
            return True
    return False


def generate_scene(cfg: ExperimentConfig, seed: int | None = None) -> Scene:
    """Random particles following the configured distributions.

    Uses stream 0 of the seeded generator family (stages 1 and 2 use
    streams 1 and 2). Raises :class:`GenerationError` once a rejection loop
    exceeds ``max_rejections`` draws.
    """
    seed = cfg.seed if seed is None else seed
    gen = cfg.generation
    d = cfg.geometry.dim
    dt = cfg.geometry.time_step
    rng = spawn_rngs(seed, 1, stream=0)[0]
    budget = gen.max_rejections

    def draw(sample, ok, what):
        for _ in range(budget + 1):
            x = sample()
            if ok(x):
                return x
        raise GenerationError(f"{what}: no admissible draw in {budget} rejections")

    iu = np.triu_indices(d, 1)
    particles = []
    for n in range(cfg.n_particles):
        alpha = draw(lambda: rng.normal(gen.alpha_mean + n * gen.alpha_step, gen.alpha_std),
                     lambda a: a > 0, "attenuation")

        def sample_U():
            U = np.diag(rng.uniform(gen.u_diag_low, gen.u_diag_high, d))
            U[iu] = rng.normal(gen.u_offdiag_mean, gen.u_offdiag_std, len(iu[0]))
            return U

        def ok_U(U):
            dg = np.diag(U)
            return bool(np.all(dg > 0) and dg.max() / dg.min() >= gen.anisotropy_min)

        U = draw(sample_U, ok_U, "shape")
        theta = draw(lambda: rng.uniform(gen.omega_min, gen.omega_max, rotation_dim(d)),
                     lambda th: not guard_band_violation(th, dt, gen.guard_band),
                     "angular velocity")
        if gen.velocities is not None:
            v = np.asarray(gen.velocities[n], dtype=float)
        else:
            v = draw(lambda: rng.uniform(gen.velocity_low, gen.velocity_high),
                     lambda v: v[0] > 0, "velocity")
        particles.append(ParticleParams(float(alpha), U, theta, gen.mu, v, gen.a))
    return Scene(particles)


def experiment_truth(cfg: ExperimentConfig) -> Scene:
    return cfg.truth if cfg.truth is not None else generate_scene(cfg)


# ---------------------------------------------------------------------------
# file formats


def _fmt(x: float) -> str:
    return "%.16e" % x


def _fmt_vec(xs) -> str:
    return " ".join(repr(float(x)) for x in xs)


def sinogram_text(sino: Sinogram) -> str:
    g = sino.geometry
    lines = [f"# format_version = {FORMAT_VERSION}"]
    for key, val in g.to_dict().items():
        if isinstance(val, list):
            val = _fmt_vec(val)
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"# {key} = {val}")
    for m in range(g.num_times):
        lines.append(" ".join(_fmt(x) for x in sino.values[:, m]))
    return "\n".join(lines) + "\n"


def parse_sinogram(text: str) -> Sinogram:
    header: dict[str, str] = {}
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, sep, val = line[1:].partition("=")
            if not sep:
                raise ValueError(f"malformed header line: {raw!r}")
            header[key.strip()] = val.strip()
        else:
            rows.append([float(x) for x in line.split()])
    try:
        geom = AcquisitionGeometry(
            source=tuple(float(x) for x in header["source"].split()),
            detector_start=tuple(float(x) for x in header["detector_start"].split()),
            detector_end=tuple(float(x) for x in header["detector_end"].split()),
            num_detectors=int(header["num_detectors"]),
            t_min=float(header["t_min"]),
            t_max=float(header["t_max"]),
            num_times=int(header["num_times"]),
            fixed_component_index=int(header.get("fixed_component_index", 0)),
        )
    except KeyError as exc:
        raise ValueError(f"sinogram header lacks {exc.args[0]!r}") from exc
    values = np.array(rows, dtype=float)
    if values.shape != (geom.num_times, geom.num_detectors):
        raise ValueError(f"sinogram body is {values.shape}, header says "
                         f"{(geom.num_times, geom.num_detectors)}")
    return Sinogram(values.T.copy(), geom)


def read_sinogram(path) -> Sinogram:
    return parse_sinogram(Path(path).read_text())


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def modes_tsv(modes: ModeSet) -> str:
    d = next((f.position.shape[1] for f in modes.frames if len(f)), 0)
    head = ["time_index", "time", "detector_index"] + [f"r{j}" for j in range(d)] + ["value"]
    lines = ["\t".join(head)]
    for m, fr in enumerate(modes.frames):
        for k in range(len(fr)):
            cells = [str(m), repr(float(modes.times[m])), str(int(fr.detector_index[k]))]
            cells += [repr(float(x)) for x in fr.position[k]] + [repr(float(fr.value[k]))]
            lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def parse_modes(text: str, geom: AcquisitionGeometry) -> ModeSet:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split("\t")
    d = sum(1 for h in head if h.startswith("r"))
    per = [[] for _ in range(geom.num_times)]
    for ln in lines[1:]:
        cells = ln.split("\t")
        per[int(cells[0])].append((int(cells[2]), [float(x) for x in cells[3:3 + d]],
                                   float(cells[3 + d])))
    frames = []
    for rows in per:
        idx = np.array([r[0] for r in rows], dtype=int)
        pos = np.array([r[1] for r in rows], dtype=float).reshape(len(rows), geom.dim)
        val = np.array([r[2] for r in rows], dtype=float)
        frames.append(ModeFrame(idx, pos, val))
    return ModeSet(geom.times.copy(), tuple(frames))


def trace_tsv(header, rows) -> str:
    out = ["\t".join(header)]
    for row in rows:
        out.append("\t".join(repr(x) if isinstance(x, float) else str(x) for x in row))
    return "\n".join(out) + "\n"


def _eta_dict(e: Projectile) -> dict:
    return {"mu": e.mu.tolist(), "v": e.v.tolist(), "a": e.a.tolist()}


def trajectory_dict(est: TrajectoryEstimate) -> dict:
    return {
        "etas": [_eta_dict(e) for e in est.etas],
        "loss": est.loss,
        "assignment": est.assignment.tolist(),
        "trial_index": est.trial_index,
        "converged": est.converged,
        "trial_losses": [float(x) for x in est.trial_losses],
        "refine": None if est.refine is None else [
            {"converged": bool(r.converged), "warning": bool(r.warning),
             "residual_norm": float(r.residual_norm),
             "initial_residual_norm": float(r.initial_residual_norm),
             "iterations": int(r.iterations)} for r in est.refine],
    }


def trajectory_from_dict(data: dict) -> TrajectoryEstimate:
    etas = [Projectile(e["mu"], e["v"], e["a"]) for e in data["etas"]]
    return TrajectoryEstimate(etas, float(data["loss"]), np.array(data["assignment"], dtype=int),
                              int(data["trial_index"]), bool(data["converged"]),
                              trial_losses=list(data.get("trial_losses", [])))


def morphology_dict(est: MorphologyEstimate) -> dict:
    return {
        "particles": [p.to_dict() for p in est.scene()],
        "loss": est.loss,
        "initial_loss": est.initial_loss,
        "trial_index": est.trial_index,
        "converged": est.converged,
        "status": est.status,
        "trial_losses": [float(x) for x in est.trial_losses],
    }


def morphology_from_dict(data: dict) -> MorphologyEstimate:
    scene = Scene(ParticleParams.from_dict(p) for p in data["particles"])
    est = MorphologyEstimate.from_scene(scene, data["loss"], data["trial_index"], data["converged"],
                                        data.get("status", ""), data.get("initial_loss", np.nan))
    est.trial_losses = list(data.get("trial_losses", []))
    return est


# ---------------------------------------------------------------------------
# metrics


def match_particles(truth: Scene, est_etas, geom: AcquisitionGeometry,
                    modes: ModeSet | None = None) -> np.ndarray:
    """Index of the estimated particle matched to each true particle (-1 if none).

    True and estimated trajectories are each assigned to the observed modes
    and paired by how often they claim the same mode. Without modes, or if
    no mode is shared, pairing falls back to the closest velocities.
    """
    n = len(truth)
    out = np.full(n, -1, dtype=int)
    if modes is not None and modes.total > 0:
        _, true_assign = assignment_loss([p.eta for p in truth], modes, geom)
        _, est_assign = assignment_loss(list(est_etas), modes, geom)
        hit = true_assign != UNMATCHED
        counts = np.array([[np.sum(hit[:, i] & (true_assign[:, i] == est_assign[:, j]))
                            for j in range(len(est_etas))] for i in range(n)], dtype=float)
        if counts.max() > 0:
            rows, cols = rectangular_assignment(-counts)
            out[rows] = cols
            return out
    cost = np.array([[float(np.sum((p.v - e.v) ** 2)) for e in est_etas] for p in truth])
    rows, cols = rectangular_assignment(cost)
    out[rows] = cols
    return out


def render_window(center, half_width: float = RENDER_HALF_WIDTH, n: int = RENDER_GRID):
    cx, cy = float(center[0]), float(center[1])
    xs = np.linspace(cx - half_width, cx + half_width, n)
    ys = np.linspace(cy - half_width, cy + half_width, n)
    return np.meshgrid(xs, ys)


def rendered_error(truth: ParticleParams, est: ParticleParams, t: float = 0.0) -> float:
    """Max absolute density difference on a 256 x 256 grid around the true centre."""
    gx, gy = render_window(truth.eta.at(t))
    return float(np.abs(render_particle(est, gx, gy, t) - render_particle(truth, gx, gy, t)).max())


def particle_errors(truth: ParticleParams, est: ParticleParams) -> dict:
    G_t = truth.U.T @ truth.U
    G_e = est.U.T @ est.U
    out = {
        "velocity_error": float(np.abs(est.v - truth.v).max()),
        "theta_error": float(np.abs(est.theta - truth.theta).max()) if truth.theta.size else 0.0,
        "alpha_rel_error": float(abs(est.alpha - truth.alpha) / truth.alpha),
        "gram_rel_error": float(np.linalg.norm(G_e - G_t) / np.linalg.norm(G_t)),
    }
    out["rendered_error"] = rendered_error(truth, est) if truth.dim == 2 else None
    return out


def metrics_report(truth: Scene, trajectories: TrajectoryEstimate | None,
                   morphology: MorphologyEstimate | None, geom: AcquisitionGeometry,
                   modes: ModeSet | None = None) -> dict:
    """Per-particle errors against the truth plus a side-by-side parameter table.

    Particles are paired through their mode assignments using the final
    trajectories (the morphology's, which a trajectory polish may have
    moved, else stage 1's). Stage-1 velocity errors use the same pairing.
    """
    if trajectories is None and morphology is None:
        raise ValueError("nothing to evaluate")
    etas = morphology.etas if morphology is not None else trajectories.etas
    if len(etas) and etas[0].dim != truth.dim:
        raise ValueError("estimate and truth dimensions differ")
    match = match_particles(truth, etas, geom, modes)
    rows = []
    for i, p in enumerate(truth):
        j = int(match[i])
        row: dict[str, Any] = {"truth_index": i, "estimate_index": j}
        if j < 0:
            rows.append(row)
            continue
        if trajectories is not None:
            row["stage1_velocity_error"] = float(np.abs(trajectories.etas[j].v - p.v).max())
        if morphology is not None:
            est = morphology.scene()[j]
            row.update(particle_errors(p, est))
            row["table"] = {"alpha": [p.alpha, est.alpha], "U": [p.U.tolist(), est.U.tolist()],
                            "theta": [p.theta.tolist(), est.theta.tolist()],
                            "v": [p.v.tolist(), est.v.tolist()]}
        else:
            row["velocity_error"] = row["stage1_velocity_error"]
            row["table"] = {"v": [p.v.tolist(), trajectories.etas[j].v.tolist()]}
        rows.append(row)
    summary = {}
    for key in ("velocity_error", "theta_error", "alpha_rel_error", "gram_rel_error",
                "rendered_error"):
        vals = [r[key] for r in rows if r.get(key) is not None]
        if vals:
            summary["max_" + key] = float(max(vals))
    return {"particles": rows, "summary": summary}


ACCEPTANCE_LIMITS = {
    "max_velocity_error": 0.03,
    "max_theta_error": 0.05,
    "max_alpha_rel_error": 0.03,
    "max_rendered_error": 0.1,
}


def meets_acceptance(report: dict) -> bool:
    s = report["summary"]
    return all(key in s and s[key] <= lim for key, lim in ACCEPTANCE_LIMITS.items())


def format_table(report: dict) -> str:
    """Plain-text side-by-side table of truth and estimate."""
    full = any("alpha" in r.get("table", {}) for r in report["particles"])
    head = "n  v (true / est)"
    if full:
        head += "                alpha (true / est)    theta (true / est)"
    lines = [head]
    for r in report["particles"]:
        tab = r.get("table")
        if not tab:
            lines.append(f"{r['truth_index'] + 1}  unmatched")
            continue
        v = tab["v"]
        line = (f"{r['truth_index'] + 1}  ({_fmt_vec(np.round(v[0], 4))}) / "
                f"({_fmt_vec(np.round(v[1], 4))})")
        if full:
            a, th = tab["alpha"], tab["theta"]
            line = (f"{line:<32}{a[0]:9.4f} / {a[1]:9.4f}   "
                    f"{_fmt_vec(np.round(th[0], 4))} / {_fmt_vec(np.round(th[1], 4))}")
        lines.append(line)
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PipelineResult:
    sinogram: Sinogram
    modes: ModeSet
    truth: Scene | None
    trajectories: TrajectoryEstimate | None = None
    morphology: MorphologyEstimate | None = None
    metrics: dict | None = None
    files: list[str] = field(default_factory=list)


class _Writer:
    """Single writer for a run directory; never replaces a file unless forced."""

    def __init__(self, out: Path | None, force: bool):
        self.out = out
        self.force = force
        self.files: list[str] = []
        if out is not None:
            if out.exists() and not out.is_dir():
                raise OutputExistsError(f"{out} exists and is not a directory")
            out.mkdir(parents=True, exist_ok=True)

    def check(self, names) -> None:
        if self.out is None or self.force:
            return
        clash = [n for n in names if (self.out / n).exists()]
        if clash:
            raise OutputExistsError(
                f"{self.out} already holds {', '.join(clash)}; pass --force to overwrite")

    def write(self, name: str, text: str) -> None:
        if self.out is None:
            return
        path = self.out / name
        if path.exists() and not self.force:
            raise OutputExistsError(f"{path} exists; pass --force to overwrite")
        path.write_text(text)
        self.files.append(name)


STAGE1_FILES = ["config.json", "sinogram.txt", "modes.tsv", "trajectories.json", "stage1_trace.tsv"]
STAGE2_FILES = ["morphology.json", "stage2_trace.tsv"]


def metrics_name(stage: str) -> str:
    """Stage-1-only runs keep their metrics apart so a stage-2 resume can add its own."""
    return "stage1_metrics.json" if stage == "1" else "metrics.json"


def run_pipeline(cfg: ExperimentConfig, out_dir=None, stage: str = "all", force: bool = False,
                 sinogram: Sinogram | None = None, truth: Scene | None = None) -> PipelineResult:
    """Simulate (unless a sinogram is given), then run stage 1 and/or stage 2.

    ``stage`` is ``"1"``, ``"2"`` or ``"all"``. Stage 2 on its own resumes
    from the stage-1 files already present in ``out_dir``. Stage errors
    propagate after the artifacts produced so far have been written.
    """
    if stage not in ("1", "2", "all"):
        raise ConfigError(f"unknown stage {stage!r}")
    out = Path(out_dir) if out_dir is not None else None
    writer = _Writer(out, force)
    meta = {"rng": RNG_NAME, "seed": cfg.seed, "format_version": FORMAT_VERSION}

    if stage == "2":
        if out is None:
            raise ConfigError("stage 2 alone needs the output directory of a stage-1 run")
        writer.check(STAGE2_FILES + [metrics_name(stage)])
        sinogram = read_sinogram(out / "sinogram.txt")
        modes = parse_modes((out / "modes.tsv").read_text(), sinogram.geometry)
        traj = trajectory_from_dict(json.loads((out / "trajectories.json").read_text()))
        truth_path = out / "truth.json"
        if truth is None and truth_path.exists():
            truth = Scene.from_dict(json.loads(truth_path.read_text()))
        result = PipelineResult(sinogram, modes, truth, traj)
    else:
        names = list(STAGE1_FILES)
        if sinogram is None:
            names.append("truth.json")
        if stage == "all":
            names += STAGE2_FILES
        writer.check(names + [metrics_name(stage)])
        if sinogram is None:
            truth = experiment_truth(cfg) if truth is None else truth
            if truth.dim != cfg.geometry.dim:
                raise ConfigError("truth and geometry dimensions differ")
            sinogram = simulate_sinogram(truth, cfg.geometry)
        writer.write("config.json", dumps_json({**cfg.to_dict(), "meta": meta}))
        writer.write("sinogram.txt", sinogram_text(sinogram))
        if truth is not None:
            writer.write("truth.json", dumps_json(truth.to_dict()))
        modes = detect_modes(sinogram, cfg.stage1.peaks)
        writer.write("modes.tsv", modes_tsv(modes))
        result = PipelineResult(sinogram, modes, truth)
        try:
            traj = optimize_trajectories(sinogram, cfg.stage1, cfg.n_particles, modes=modes)
        except Stage1Error as exc:
            if exc.best is not None:
                writer.write("stage1_trace.tsv", trace_tsv(
                    ["trial", "round", "iteration", "loss", "grad_norm", "hausdorff"], exc.best.trace))
            raise
        result.trajectories = traj
        writer.write("trajectories.json", dumps_json(trajectory_dict(traj)))
        writer.write("stage1_trace.tsv", trace_tsv(
            ["trial", "round", "iteration", "loss", "grad_norm", "hausdorff"], traj.trace))

    if stage in ("2", "all"):
        morph = optimize_morphology(result.trajectories.etas, result.sinogram, cfg.stage2)
        result.morphology = morph
        writer.write("morphology.json", dumps_json(morphology_dict(morph)))
        writer.write("stage2_trace.tsv", trace_tsv(
            ["phase", "trial", "iteration", "loss", "grad_norm"], morph.trace))

    if result.truth is not None:
        result.metrics = metrics_report(result.truth, result.trajectories, result.morphology,
                                        result.sinogram.geometry, result.modes)
        writer.write(metrics_name(stage), dumps_json(result.metrics))
    result.files = writer.files
    return result


# ---------------------------------------------------------------------------
# gradient audit


def stage2_gradient_errors(scene: Scene, geom: AcquisitionGeometry, n_points: int = 20,
                           rel_scale: float = 0.05, seed: int = 0,
                           cfg: Stage2Config | None = None) -> list[float]:
    """Finite-difference audit of the stage-2 gradient around ``scene``.

    The data are the noiseless projections of ``scene``; each audit point
    multiplies every morphology parameter by ``1 + rel_scale * N(0, 1)``
    (attenuations kept positive). Returns one worst relative error per point.
    """
    cfg = cfg or Stage2Config()
    data = simulate_sinogram(scene, geom)
    delta = cfg.delta_for(data)
    etas = [p.eta for p in scene]
    x0 = pack_scene(scene)
    rng = spawn_rngs(seed, 1, stream=3)[0]
    mask = _positive_mask(len(scene), scene.dim)

    def fun(x):
        sc = unpack_scene(x, scene)
        return stage2_objective([p.theta for p in sc], [p.alpha for p in sc], [p.U for p in sc],
                                etas, data, cfg, delta)

    errs = []
    for _ in range(n_points):
        x = x0 * (1.0 + rel_scale * rng.standard_normal(x0.size))
        x[mask] = np.abs(x[mask])
        errs.append(check_gradient(fun, x))
    return errs

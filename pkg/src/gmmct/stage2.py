"""Rotation and morphology recovery with the trajectories held fixed.

The projections of all particles are fitted to the full sinogram under a
mean Huber loss. Each trial starts from a placeholder morphology, picks an
angular velocity per particle by grid search on the residual sinogram,
solves a non-negative least-squares problem for the attenuations and then
runs L-BFGS on every morphological parameter jointly. Attenuations and the
diagonal of each shape matrix are optimised through a softplus so that
they stay positive.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import AcquisitionGeometry, Projectile, rotation_dim
from .model import (ETA_BLOCKS, ParticleParams, Scene, Sinogram, _particle_values,
                    pack_particle, particle_block_size, scene_projections, scene_residual_vjp,
                    unpack_particle, upper_indices)
from .optim import (LINE_SEARCH_FAILURE, DegeneracyWarning, MinimizeSettings, minimize, nnls,
                    spawn_rngs)

logger = logging.getLogger(__name__)

MIN_ANISOTROPY = 1.01
ALPHA_FLOOR = 1e-6


class Stage2Error(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class IsotropicShapeError(ValueError):
    """A placeholder shape carries no rotation signature."""


@dataclass
class Stage2Config:
    huber_delta: float | None = None  # None: 0.1 x max of the data
    huber_delta_rel: float = 0.1
    n_rot_grid: int = 200
    omega_min: float = 2.0
    omega_max: float = 6.0
    n_morph_trials: int = 3
    init_diag: tuple | None = None  # None: evenly spaced from 30 down to 15
    init_offdiag_std: float = 1.0
    init_alpha: float = 12.5
    max_iter: int = 500
    gtol: float = 1e-8
    precondition: bool = True
    restart_every: int = 100
    sweep_starts: int = 5  # coarse angular-velocity restarts per particle; 0 disables
    sweep_rounds: int = 2
    sweep_max_iter: int = 100
    polish_eta_block: str = "v"  # trajectory fields freed in a last joint fit; "none" skips it
    seed: int = 0

    def __post_init__(self):
        if not self.omega_min < self.omega_max:
            raise ValueError("omega_min must be below omega_max")
        if self.n_rot_grid < 2:
            raise ValueError("n_rot_grid must be at least 2")
        if self.n_morph_trials < 1:
            raise ValueError("n_morph_trials must be at least 1")
        if self.huber_delta is not None and not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if not self.huber_delta_rel > 0:
            raise ValueError("huber_delta_rel must be positive")
        if not self.init_alpha > 0:
            raise ValueError("init_alpha must be positive")
        if self.polish_eta_block not in ETA_BLOCKS:
            raise ValueError(f"unknown polish_eta_block {self.polish_eta_block!r}")
        if self.sweep_starts < 0 or self.sweep_rounds < 0:
            raise ValueError("sweep_starts and sweep_rounds must be non-negative")

    def delta_for(self, data: Sinogram) -> float:
        if self.huber_delta is not None:
            return float(self.huber_delta)
        top = float(np.abs(data.values).max())
        if not top > 0:
            raise ValueError("sinogram is identically zero")
        return self.huber_delta_rel * top

    def rotation_grid(self) -> np.ndarray:
        return np.linspace(self.omega_min, self.omega_max, self.n_rot_grid)

    def placeholder_diag(self, d: int) -> np.ndarray:
        if self.init_diag is not None:
            diag = np.asarray(self.init_diag, dtype=float)
            if diag.shape != (d,) or np.any(diag <= 0):
                raise ValueError(f"init_diag must hold {d} positive entries")
            return diag
        return np.linspace(30.0, 15.0, d)


@dataclass
class MorphologyEstimate:
    """Best stage-2 fit.

    ``etas`` holds the trajectories the morphology belongs to: the stage-1
    input, or their polished values when ``polish_eta_block`` frees them.
    """

    thetas: list[np.ndarray]
    alphas: np.ndarray
    Us: list[np.ndarray]
    loss: float
    trial_index: int
    converged: bool
    status: str = ""
    initial_loss: float = np.nan
    etas: list[Projectile] = field(default_factory=list)
    trial_losses: list[float] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)

    @classmethod
    def from_scene(cls, scene: Scene, loss, trial_index, converged, status="",
                   initial_loss=np.nan, trace=None) -> "MorphologyEstimate":
        return cls([p.theta.copy() for p in scene], np.array([p.alpha for p in scene]),
                   [p.U.copy() for p in scene], float(loss), trial_index, bool(converged),
                   status, float(initial_loss), [p.eta for p in scene], trace=list(trace or []))

    def scene(self, etas=None) -> Scene:
        etas = self.etas if etas is None else etas
        return Scene(ParticleParams(a, U, th, e.mu, e.v, e.a)
                     for a, U, th, e in zip(self.alphas, self.Us, self.thetas, etas))


# ---------------------------------------------------------------------------
# loss


def huber(u, delta: float):
    """Huber function: ``u^2/2`` for ``|u| <= delta``, ``delta (|u| - delta/2)`` beyond."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    a = np.abs(u)
    out = np.where(a <= delta, 0.5 * a * a, delta * (a - 0.5 * delta))
    return out if np.ndim(out) else float(out)


def huber_derivative(u, delta: float):
    return np.clip(u, -delta, delta)


def _scene_from(thetas, alphas, Us, etas) -> Scene:
    return Scene(ParticleParams(float(a), np.asarray(U, dtype=float), np.atleast_1d(th),
                                e.mu, e.v, e.a)
                 for a, U, th, e in zip(alphas, Us, thetas, etas))


def _loss_and_grad(scene: Scene, data: Sinogram, delta: float, need_grad=True,
                   eta_block: str = "none"):
    geom = data.geometry
    evals = _particle_values(scene, geom.source_array, geom.detectors, geom.times, need_grad)
    model = None
    for p, ev in zip(scene, evals):
        part = p.alpha * ev.X
        model = part if model is None else model + part
    res = data.values - model.T
    m = res.size
    loss = float(huber(res, delta).sum() / m)
    if not need_grad:
        return loss, None
    weights = -huber_derivative(res, delta) / m
    return loss, scene_residual_vjp(scene, geom, weights, eta_block, evals)


def stage2_objective(thetas, alphas, Us, etas, data: Sinogram, cfg: Stage2Config | None = None,
                     delta: float | None = None) -> tuple[float, np.ndarray]:
    """Mean Huber misfit over the sinogram and its gradient.

    The gradient is ordered per particle as ``alpha``, the upper triangle of
    ``U`` row by row, then ``Theta``.
    """
    cfg = cfg or Stage2Config()
    delta = cfg.delta_for(data) if delta is None else delta
    return _loss_and_grad(_scene_from(thetas, alphas, Us, etas), data, delta)[0:2]


def pack_scene(scene: Scene, eta_block: str = "none") -> np.ndarray:
    return np.concatenate([pack_particle(p, eta_block) for p in scene])


def unpack_scene(x, template: Scene, eta_block: str = "none") -> Scene:
    """Inverse of :func:`pack_scene`; fields outside the block come from ``template``."""
    x = np.asarray(x, dtype=float)
    blk = particle_block_size(template.dim, eta_block)
    return Scene(unpack_particle(x[k * blk:(k + 1) * blk], p, eta_block)
                 for k, p in enumerate(template))


# ---------------------------------------------------------------------------
# positivity through softplus


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _positive_mask(n: int, d: int, eta_block: str = "none") -> np.ndarray:
    iu = upper_indices(d)
    rest = rotation_dim(d) + d * len(ETA_BLOCKS[eta_block])
    blk = np.concatenate([[True], iu[0] == iu[1], np.zeros(rest, dtype=bool)])
    return np.tile(blk, n)


# ---------------------------------------------------------------------------
# initialisation


def _check_anisotropic(U: np.ndarray) -> None:
    sv = np.linalg.svd(U, compute_uv=False)
    if not sv[-1] > 0 or sv[0] / sv[-1] < MIN_ANISOTROPY:
        raise IsotropicShapeError(
            "placeholder shape is (nearly) isotropic, so rotation leaves no trace "
            f"in the projections (singular value ratio {sv[0] / max(sv[-1], 1e-300):.4g})"
        )


def _sinogram_l2(scene: Scene, target: np.ndarray, geom: AcquisitionGeometry) -> float:
    proj = scene_projections(scene, geom)
    r = target - sum(p.alpha * x for p, x in zip(scene, proj))
    return float((r * r).sum())


def grid_search_rotation(n: int, scene: Scene, data: Sinogram, cfg: Stage2Config | None = None,
                         grid: np.ndarray | None = None) -> np.ndarray:
    """Angular velocity of particle ``n`` that best explains the residual sinogram.

    The other particles' current projections are subtracted from the data
    and each rotation coordinate is scanned over the grid in turn, the rest
    held at their current values. Ties go to the smaller angular velocity.
    """
    cfg = cfg or Stage2Config()
    grid = cfg.rotation_grid() if grid is None else np.sort(np.asarray(grid, dtype=float))
    p = scene[n]
    _check_anisotropic(p.U)
    geom = data.geometry
    others = [q for i, q in enumerate(scene) if i != n]
    target = data.values.copy()
    if others:
        for q, x in zip(others, scene_projections(Scene(others), geom)):
            target -= q.alpha * x
    theta = p.theta.copy()
    for c in range(theta.size):
        best, best_val = np.inf, theta[c]
        for w in grid:
            trial = theta.copy()
            trial[c] = w
            r = _sinogram_l2(Scene([p.replace(theta=trial)]), target, geom)
            if r < best:
                best, best_val = r, w
        theta[c] = best_val
    return theta


def nnls_attenuation(scene: Scene, data: Sinogram) -> np.ndarray:
    """Non-negative attenuations fitting the data with every other parameter fixed.

    Column ``n`` of the design matrix is particle ``n``'s sinogram at unit
    attenuation; the alphas stored in ``scene`` are ignored.
    """
    phi = np.stack([x.ravel() for x in scene_projections(scene, data.geometry)], axis=1)
    if not np.all(np.isfinite(phi)):
        raise ValueError("non-finite projection column")
    b = data.values.ravel()
    if not np.any(b):
        raise ValueError("sinogram is identically zero")
    return nnls(phi, b)


def _placeholder_U(cfg: Stage2Config, d: int, rng: np.random.Generator) -> np.ndarray:
    U = np.diag(cfg.placeholder_diag(d))
    iu = np.triu_indices(d, 1)
    U[iu] = cfg.init_offdiag_std * rng.standard_normal(len(iu[0]))
    return U


def initial_morphology(etas, data: Sinogram, cfg: Stage2Config, rng: np.random.Generator,
                       warm: bool = True) -> Scene:
    """Starting scene of one trial.

    Every particle gets a placeholder shape (``init_diag`` plus Gaussian
    strictly-upper entries). ``warm`` runs the rotation grid search over the
    particles once, in index order, starting from zero angular velocity;
    otherwise each angular velocity is drawn uniformly from the search
    interval. Attenuations always come from :func:`nnls_attenuation`.
    """
    d = data.geometry.dim
    dr = rotation_dim(d)
    scene = Scene(ParticleParams(cfg.init_alpha, _placeholder_U(cfg, d, rng),
                                 np.zeros(dr) if warm else rng.uniform(cfg.omega_min, cfg.omega_max, dr),
                                 e.mu, e.v, e.a) for e in etas)
    if warm:
        for k in range(len(scene)):
            th = grid_search_rotation(k, scene, data, cfg)
            scene = scene.replace_particle(k, scene[k].replace(theta=th))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneracyWarning)
        alphas = nnls_attenuation(scene, data)
    top = float(alphas.max(initial=0.0))
    # a zero attenuation has no softplus preimage; start it just above zero
    floor = max(ALPHA_FLOOR, 1e-3 * top) if top > 0 else cfg.init_alpha
    alphas = np.where(alphas > 0, alphas, floor)
    return Scene(p.replace(alpha=float(a)) for p, a in zip(scene, alphas))


# ---------------------------------------------------------------------------
# optimisation


def _to_natural(z, mask):
    x = z.copy()
    x[mask] = softplus(z[mask])
    return x


def block_preconditioner(z, mask, template: Scene, geom: AcquisitionGeometry,
                         eta_block: str = "none", rel_step: float = 1e-6) -> list[np.ndarray]:
    """Per-particle Cholesky factors of the Gauss-Newton matrix ``J^T J / M``.

    ``J`` is the Jacobian of one particle's projections w.r.t. its own
    (softplus-mapped) parameters, taken by central differences. Particles
    do not interact in the model, so the blocks are exact up to the loss
    curvature. A small ridge keeps invisible particles well posed.
    """
    n = len(template)
    blk = z.size // n
    factors = []
    for k in range(n):
        zk = z[k * blk:(k + 1) * blk]
        mk = mask[k * blk:(k + 1) * blk]

        def model(v, k=k, mk=mk):
            p = unpack_particle(_to_natural(v, mk), template[k], eta_block)
            return (p.alpha * scene_projections(Scene([p]), geom)[0]).ravel()

        cols = []
        for i in range(blk):
            h = rel_step * max(1.0, abs(zk[i]))
            e = np.zeros(blk)
            e[i] = h
            cols.append((model(zk + e) - model(zk - e)) / (2.0 * h))
        J = np.stack(cols, axis=1)
        H = J.T @ J / J.shape[0]
        ridge = 1e-10 * max(np.trace(H), 1e-300) / blk + 1e-14
        factors.append(np.linalg.cholesky(H + ridge * np.eye(blk)))
    return factors


@dataclass
class _FitResult:
    scene: Scene
    loss: float
    initial_loss: float
    converged: bool
    status: str
    iterations: int


def fit_scene(start: Scene, data: Sinogram, delta: float, cfg: Stage2Config,
              eta_block: str = "none", max_iter: int | None = None,
              trace: list | None = None, label=0) -> _FitResult:
    """Preconditioned L-BFGS on the Huber misfit from ``start``.

    The variables are each particle's attenuation, shape and angular
    velocity (plus the ``eta_block`` trajectory fields). The preconditioner
    is rebuilt every ``cfg.restart_every`` iterations, which also restarts
    the quasi-Newton memory.
    """
    n, d = len(start), start.dim
    max_iter = cfg.max_iter if max_iter is None else max_iter
    mask = _positive_mask(n, d, eta_block)
    x_nat = pack_scene(start, eta_block)
    z = x_nat.copy()
    z[mask] = softplus_inverse(x_nat[mask])
    blk = z.size // n
    used = 0
    f0 = None
    while True:
        z0 = z
        if cfg.precondition:
            factors = block_preconditioner(z0, mask, start, data.geometry, eta_block)
        else:
            factors = [np.eye(blk)] * n

        def to_z(y, z0=z0, factors=factors):
            # z = z0 + L^-T y, blockwise
            return z0 + np.concatenate([np.linalg.solve(L.T, y[k * blk:(k + 1) * blk])
                                        for k, L in enumerate(factors)])

        def fun(y, to_z=to_z, factors=factors):
            zz = to_z(y)
            x = _to_natural(zz, mask)
            if not (np.all(np.isfinite(x)) and np.all(x[mask] > 0)):
                # softplus under/overflow: reject the point, the line search backs off
                return np.inf, np.full_like(y, np.nan)
            try:
                with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                    f, g = _loss_and_grad(unpack_scene(x, start, eta_block), data, delta,
                                          eta_block=eta_block)
            except ValueError:
                return np.inf, np.full_like(y, np.nan)
            if not np.isfinite(f):
                return np.inf, np.full_like(y, np.nan)
            g = g.copy()
            g[mask] *= _sigmoid(zz[mask])
            gy = np.concatenate([np.linalg.solve(L, g[k * blk:(k + 1) * blk])
                                 for k, L in enumerate(factors)])
            return f, gy

        def record(it, x, f, gnorm, base=used):
            if trace is not None:
                trace.append((label, base + it, f, gnorm))

        y0 = np.zeros_like(z0)
        if f0 is None:
            f0 = fun(y0)[0]
            if not np.isfinite(f0):
                raise ValueError("objective is not finite at the starting point")
        budget = min(cfg.restart_every, max_iter - used) if cfg.restart_every else max_iter
        res = minimize(fun, y0, MinimizeSettings(gtol=cfg.gtol, max_iter=budget), callback=record)
        used += max(res.iterations, 1)
        z = to_z(res.x)
        if res.converged or used >= max_iter or res.iterations == 0:
            break
    scene = unpack_scene(_to_natural(z, mask), start, eta_block)
    return _FitResult(scene, float(res.f), float(f0), res.converged, res.status, used)


def _single_particle_target(data: Sinogram, proj: list[np.ndarray], k: int) -> Sinogram:
    others = sum(proj[:k] + proj[k + 1:], np.zeros_like(data.values))
    return Sinogram(data.values - others, data.geometry)


def particle_sweep(scene: Scene, data: Sinogram, delta: float,
                   cfg: Stage2Config) -> tuple[Scene, list[int]]:
    """Re-seat particles stuck in a wrong rotation basin.

    For each particle in index order the other particles' fitted
    projections are subtracted from the data and the particle alone is
    refitted from ``sweep_starts`` angular velocities spread over the
    search interval (placeholder shape, least-squares attenuation). Its
    current fit competes as one more start, so a particle only moves when
    a restart explains the residual clearly better. Returns the updated
    scene (not re-optimised jointly) and the moved indices.
    """
    geom = data.geometry
    d = geom.dim
    proj = [p.alpha * x for p, x in zip(scene, scene_projections(scene, geom))]
    base_U = np.diag(cfg.placeholder_diag(d))
    moved = []
    for k in range(len(scene)):
        target = _single_particle_target(data, proj, k)
        current = fit_scene(Scene([scene[k]]), target, delta, cfg, max_iter=cfg.sweep_max_iter)
        best = current
        for w in np.linspace(cfg.omega_min, cfg.omega_max, cfg.sweep_starts):
            q = scene[k].replace(alpha=1.0, U=base_U, theta=np.full(rotation_dim(d), w))
            x = scene_projections(Scene([q]), geom)[0]
            xx = float((x * x).sum())
            al0 = max(float((x * target.values).sum()) / xx, ALPHA_FLOOR) if xx > 0 else cfg.init_alpha
            try:
                cand = fit_scene(Scene([q.replace(alpha=al0)]), target, delta, cfg,
                                 max_iter=cfg.sweep_max_iter)
            except (ValueError, np.linalg.LinAlgError) as exc:
                logger.debug("sweep start %.3g for particle %d failed: %s", w, k, exc)
                continue
            if cand.loss < best.loss:
                best = cand
        # ignore gains at round-off level
        if best is not current and best.loss < current.loss - (1e-3 * current.loss + 1e-12 * delta ** 2):
            moved.append(k)
            scene = scene.replace_particle(k, best.scene[0])
            q = scene[k]
            proj[k] = q.alpha * scene_projections(Scene([q]), geom)[0]
    return scene, moved


def _run_trial(start: Scene, data, delta, cfg, trial_index) -> MorphologyEstimate:
    trace: list[tuple] = []
    fit = fit_scene(start, data, delta, cfg, trace=trace, label=trial_index)
    return MorphologyEstimate.from_scene(fit.scene, fit.loss, trial_index, fit.converged,
                                         fit.status, fit.initial_loss, trace)


def optimize_morphology(etas, data: Sinogram, cfg: Stage2Config | None = None) -> MorphologyEstimate:
    """Best of ``n_morph_trials`` L-BFGS fits of rotation and morphology.

    Trial 0 is warm-started by the rotation grid search; the others draw
    angular velocities uniformly. Every trial draws its own placeholder
    shapes and solves for its attenuations. The winner then goes through
    the particle sweep and, if ``polish_eta_block`` is not ``"none"``, a
    last joint fit with those trajectory fields free.
    """
    cfg = cfg or Stage2Config()
    etas = [e if isinstance(e, Projectile) else e.eta for e in etas]
    delta = cfg.delta_for(data)
    rngs = spawn_rngs(cfg.seed, cfg.n_morph_trials, stream=2)
    results: list[MorphologyEstimate | None] = []
    for k, rng in enumerate(rngs):
        start = initial_morphology(etas, data, cfg, rng, warm=(k == 0))
        try:
            results.append(_run_trial(start, data, delta, cfg, k))
        except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.warning("morphology trial %d failed: %s", k, exc)
            results.append(None)
    ok = [r for r in results if r is not None and np.isfinite(r.loss)]
    losses = [r.loss if r is not None else np.inf for r in results]
    if not ok:
        raise Stage2Error("every morphology trial failed")
    best = min(ok, key=lambda r: (r.loss, r.trial_index))
    if len(ok) == len(results) and all(r.status == LINE_SEARCH_FAILURE for r in ok):
        raise Stage2Error("line search failed in every morphology trial", best)
    trace = [("trial",) + row for r in ok for row in r.trace]
    scene, loss, status, converged = best.scene(), best.loss, best.status, best.converged
    if cfg.sweep_starts > 0:
        for rnd in range(cfg.sweep_rounds):
            swept, moved = particle_sweep(scene, data, delta, cfg)
            if not moved:
                break
            logger.info("stage 2 sweep %d re-seated particles %s", rnd, moved)
            rows: list[tuple] = []
            fit = fit_scene(swept, data, delta, cfg, trace=rows, label=rnd)
            trace += [("sweep",) + row for row in rows]
            if not fit.loss < loss:
                break
            scene, loss, status, converged = fit.scene, fit.loss, fit.status, fit.converged
    if cfg.polish_eta_block != "none":
        rows = []
        fit = fit_scene(scene, data, delta, cfg, eta_block=cfg.polish_eta_block, trace=rows)
        trace += [("polish",) + row for row in rows]
        if fit.loss <= loss:
            scene, loss, status, converged = fit.scene, fit.loss, fit.status, fit.converged
    out = MorphologyEstimate.from_scene(scene, loss, best.trial_index, converged, status,
                                        best.initial_loss, trace)
    out.trial_losses = losses
    logger.info("stage 2: best trial %d, loss %.6g", out.trial_index, out.loss)
    return out

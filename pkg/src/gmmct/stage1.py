"""Trajectory recovery from sinogram modes.

Predicted modes of N trajectories are matched to the observed modes at
every time by a rectangular min-cost assignment on squared distances; the
sum of matched costs is minimised over the free trajectory block with the
assignment frozen, re-solved, and so on until the assignment stops moving.
Several random starts are run and the lowest terminal loss wins.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import AcquisitionGeometry, Projectile
from .model import ETA_BLOCKS, Sinogram
from .modes import (LAMBDA_GUARD, ModeSet, PeakConfig, RefineResult, detect_modes, eta_from_vector,
                    eta_vector, mode_jacobian, newton_refine, predict_modes)
from .optim import MinimizeSettings, minimize, rectangular_assignment, spawn_rngs

logger = logging.getLogger(__name__)

UNMATCHED = -1


class Stage1Error(RuntimeError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


@dataclass
class Stage1Config:
    n_trials: int = 20
    init_mean: tuple = (1.0, 1.0)
    init_cov: tuple = ((2.25, 0.0), (0.0, 2.25))
    mu: tuple = (1.0, 1.0)
    a: tuple = (0.0, -9.81)
    eta_block: str = "v"
    max_iter: int = 500
    gtol: float = 1e-8
    max_rounds: int = 30
    refine: bool = True
    refine_isolation: float = 12.0  # detector pitches; 0 keeps every mode
    refine_min_modes: int = 6
    seed: int = 0
    peaks: PeakConfig = field(default_factory=PeakConfig)

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if self.eta_block not in ETA_BLOCKS or not ETA_BLOCKS[self.eta_block]:
            raise ValueError(f"unknown eta_block {self.eta_block!r}")
        cov = np.asarray(self.init_cov, dtype=float)
        if cov.shape != (len(self.init_mean),) * 2 or not np.allclose(cov, cov.T):
            raise ValueError("init_cov must be a symmetric d x d matrix")
        try:
            np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("init_cov must be positive definite") from exc


@dataclass
class TrajectoryEstimate:
    etas: list[Projectile]
    loss: float
    assignment: np.ndarray  # (M_t, N): observed-mode index per particle or -1
    trial_index: int
    converged: bool
    refine: list[RefineResult] | None = None
    trial_losses: list[float] = field(default_factory=list)
    trace: list[tuple] = field(default_factory=list)

    def velocities(self) -> np.ndarray:
        return np.array([e.v for e in self.etas])


def sample_initial_trajectories(cfg: Stage1Config, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. Gaussian velocity draws, shape (n, d)."""
    mean = np.asarray(cfg.init_mean, dtype=float)
    chol = np.linalg.cholesky(np.asarray(cfg.init_cov, dtype=float))
    z = rng.standard_normal((n, mean.size))
    return mean[None, :] + z @ chol.T


def _predictions(etas, times, geom):
    preds, jacs, bads = zip(*(predict_modes(e, times, geom) for e in etas))
    return np.stack(preds, axis=1), np.stack(jacs, axis=1), np.stack(bads, axis=1)


def assignment_loss(etas, observed: ModeSet, geom: AcquisitionGeometry,
                    lexicographic: bool = False) -> tuple[float, np.ndarray]:
    """Sum over times of the min-cost matching between predicted and observed modes.

    Returns the loss and an (M_t, N) array holding, for each particle, the
    index of the observed mode it was matched to, or -1. Predictions left
    over when fewer modes are observed than particles cost nothing.
    """
    if observed.total == 0:
        raise ValueError("no observed modes to fit")
    times = observed.times
    pred, _, bad = _predictions(etas, times, geom)
    n = len(etas)
    assign = np.full((times.size, n), UNMATCHED, dtype=int)
    loss = 0.0
    for m, frame in enumerate(observed.frames):
        if len(frame) == 0:
            continue
        if np.any(bad[m]):
            return np.inf, assign
        diff = pred[m][:, None, :] - frame.position[None, :, :]
        cost = (diff * diff).sum(axis=-1)
        if not np.all(np.isfinite(cost)):
            return np.inf, assign
        rows, cols = rectangular_assignment(cost, lexicographic=lexicographic)
        assign[m, rows] = cols
        loss += float(cost[rows, cols].sum())
    return loss, assign


def hausdorff_sum(etas, observed: ModeSet, geom: AcquisitionGeometry) -> float:
    """Sum over times of the exact Hausdorff distance between mode sets."""
    pred, _, bad = _predictions(etas, observed.times, geom)
    total = 0.0
    for m, frame in enumerate(observed.frames):
        if len(frame) == 0:
            continue
        if np.any(bad[m]):
            return np.inf
        dist = np.linalg.norm(pred[m][:, None, :] - frame.position[None, :, :], axis=-1)
        total += max(dist.min(axis=0).max(), dist.min(axis=1).max())
    return float(total)


def _matched_pairs(assign: np.ndarray, observed: ModeSet, n: int):
    """Per particle: (time indices, target points) of its matched modes."""
    out = []
    dim = next((f.position.shape[1] for f in observed.frames if len(f)), 1)
    for k in range(n):
        ms = np.flatnonzero(assign[:, k] >= 0)
        tgt = np.zeros((ms.size, dim))
        for i, m in enumerate(ms):
            tgt[i] = observed.frames[m].position[assign[m, k]]
        out.append((ms, tgt))
    return out


def _fixed_assignment_objective(templates, pairs, times, geom, block):
    """Sum of squared mode residuals over all matched pairs, vectorised.

    Parameters are laid out per particle as in :func:`eta_vector`.
    """
    names = ETA_BLOCKS[block]
    d = geom.dim
    n = len(templates)
    nb = len(names)
    kidx = np.concatenate([np.full(ms.size, k, dtype=int) for k, (ms, _) in enumerate(pairs)])
    tt = np.concatenate([times[ms] for ms, _ in pairs])[:, None]
    tgt = np.concatenate([t.reshape(-1, d) for _, t in pairs])
    base = {name: np.array([getattr(e, name) for e in templates]) for name in ("mu", "v", "a")}
    factor = {"mu": np.ones_like(tt), "v": tt, "a": 0.5 * tt * tt}
    s = geom.source_array
    fixed = geom.fixed_component_index
    span = geom.detector_plane - s[fixed]

    def fun(x):
        xs = x.reshape(n, nb, d)
        fields = dict(base)
        for i, name in enumerate(names):
            fields[name] = xs[:, i, :]
        C = (fields["mu"][kidx] + factor["v"] * fields["v"][kidx]
             + factor["a"] * fields["a"][kidx])
        w = s[None, :] - C
        denom = w[:, fixed]
        if np.any(np.abs(denom) < LAMBDA_GUARD):
            return np.inf, np.full_like(x, np.nan)
        lam = span / denom
        res = s[None, :] + lam[:, None] * w - tgt
        f = float((res * res).sum())
        # gradient w.r.t. the centre: 2 J^T res with J = -lam I + (lam/denom) w e_fixed^T
        gC = -2.0 * lam[:, None] * res
        gC[:, fixed] += 2.0 * (lam / denom) * (w * res).sum(axis=1)
        grad = np.zeros((n, nb, d))
        for i, name in enumerate(names):
            np.add.at(grad[:, i, :], kidx, factor[name] * gC)
        return f, grad.ravel()

    return fun


def _run_trial(init_etas: list[Projectile], observed: ModeSet, geom: AcquisitionGeometry,
               cfg: Stage1Config, trial_index: int = 0) -> TrajectoryEstimate:
    block = cfg.eta_block
    n = len(init_etas)
    p = len(ETA_BLOCKS[block]) * geom.dim
    etas = list(init_etas)
    settings = MinimizeSettings(gtol=cfg.gtol, max_iter=cfg.max_iter)
    trace: list[tuple] = []
    prev_assign = None
    converged = False
    loss, assign = assignment_loss(etas, observed, geom)
    for rnd in range(cfg.max_rounds):
        if not np.isfinite(loss):
            break
        if prev_assign is not None and np.array_equal(assign, prev_assign) and converged:
            break
        hd = hausdorff_sum(etas, observed, geom)
        x0 = np.concatenate([eta_vector(e, block) for e in etas])
        fun = _fixed_assignment_objective(etas, _matched_pairs(assign, observed, n),
                                          observed.times, geom, block)

        def record(it, x, f, gnorm, _rnd=rnd, _hd=hd):
            trace.append((trial_index, _rnd, it, f, gnorm, _hd))

        res = minimize(fun, x0, settings, callback=record)
        etas = [eta_from_vector(res.x[k * p:(k + 1) * p], etas[k], block) for k in range(n)]
        converged = res.converged
        prev_assign = assign
        loss, assign = assignment_loss(etas, observed, geom)
    stable = prev_assign is not None and np.array_equal(assign, prev_assign)
    return TrajectoryEstimate(etas, float(loss), assign, trial_index,
                              bool(converged and stable), trace=trace)


def _initial_etas(cfg: Stage1Config, n: int, rng, observed, geom) -> list[Projectile]:
    mu = np.asarray(cfg.mu, dtype=float)
    a = np.asarray(cfg.a, dtype=float)
    # resample draws whose predicted modes are undefined at an observed time
    for _ in range(100):
        vs = sample_initial_trajectories(cfg, n, rng)
        etas = [Projectile(mu, v, a) for v in vs]
        if np.isfinite(assignment_loss(etas, observed, geom)[0]):
            return etas
    return etas


def _worker_count() -> int:
    raw = os.environ.get("GMMCT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    return n if n > 0 else (os.cpu_count() or 1)


def isolated_mask(etas, k: int, ms: np.ndarray, times: np.ndarray,
                  geom: AcquisitionGeometry, isolation: float) -> np.ndarray:
    """Which of particle ``k``'s matched times are free of nearby predicted modes.

    Peaks of overlapping projections pull on each other, so a detected mode
    is only trusted when no other trajectory predicts a mode within
    ``isolation`` detector pitches of it.
    """
    if isolation <= 0 or len(etas) < 2 or ms.size == 0:
        return np.ones(ms.size, dtype=bool)
    pred, _, _ = _predictions(etas, times[ms], geom)
    others = np.delete(pred, k, axis=1)
    gap = np.linalg.norm(others - pred[:, k][:, None, :], axis=-1)
    gap = np.where(np.isfinite(gap), gap, np.inf).min(axis=1)
    return gap >= isolation * geom.detector_pitch


def refine_estimate(est: TrajectoryEstimate, observed: ModeSet, geom: AcquisitionGeometry,
                    eta_block: str = "v", isolation: float = 0.0,
                    min_modes: int = 6) -> TrajectoryEstimate:
    """Gauss-Newton polish of each trajectory against its assigned modes.

    With ``isolation > 0`` only modes away from other particles' predicted
    modes are used, unless fewer than ``min_modes`` of them survive.
    """
    pairs = _matched_pairs(est.assignment, observed, len(est.etas))
    results = []
    for k, (e, (ms, tgt)) in enumerate(zip(est.etas, pairs)):
        keep = isolated_mask(est.etas, k, ms, observed.times, geom, isolation)
        if keep.sum() < max(min_modes, 1):
            keep[:] = True
        results.append(newton_refine(e, observed.times[ms[keep]], tgt[keep], geom,
                                     eta_block=eta_block))
    etas = [r.eta for r in results]
    loss, assign = assignment_loss(etas, observed, geom)
    if not np.isfinite(loss):
        return TrajectoryEstimate(est.etas, est.loss, est.assignment, est.trial_index,
                                  est.converged, results, est.trial_losses, est.trace)
    return TrajectoryEstimate(etas, loss, assign, est.trial_index, est.converged,
                              results, est.trial_losses, est.trace)


def optimize_trajectories(data: Sinogram | None, cfg: Stage1Config, n_particles: int,
                          modes: ModeSet | None = None,
                          geom: AcquisitionGeometry | None = None) -> TrajectoryEstimate:
    """Multi-start trajectory fit.

    Either a sinogram (modes are detected with ``cfg.peaks``) or a ready
    :class:`ModeSet` plus geometry can be supplied.
    """
    if modes is None:
        if data is None:
            raise ValueError("need a sinogram or a mode set")
        modes = detect_modes(data, cfg.peaks)
    geom = geom or data.geometry
    if modes.total == 0:
        raise Stage1Error("no modes detected in the sinogram")
    rngs = spawn_rngs(cfg.seed, cfg.n_trials, stream=1)
    inits = [_initial_etas(cfg, n_particles, rng, modes, geom) for rng in rngs]

    def job(k):
        try:
            return _run_trial(inits[k], modes, geom, cfg, k)
        except (FloatingPointError, ValueError, np.linalg.LinAlgError) as exc:
            logger.warning("trajectory trial %d failed: %s", k, exc)
            return None

    workers = min(_worker_count(), cfg.n_trials)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(job, range(cfg.n_trials)))
    else:
        results = [job(k) for k in range(cfg.n_trials)]
    finite = [r for r in results if r is not None and np.isfinite(r.loss)]
    losses = [r.loss if r is not None else np.inf for r in results]
    if not finite:
        partial = next((r for r in results if r is not None), None)
        raise Stage1Error("every trajectory trial diverged", partial)
    best = min(finite, key=lambda r: (r.loss, r.trial_index))
    trace = [row for r in results if r is not None for row in r.trace]
    best = TrajectoryEstimate(best.etas, best.loss, best.assignment, best.trial_index,
                              best.converged, None, losses, trace)
    logger.info("stage 1: best trial %d, loss %.6g", best.trial_index, best.loss)
    if cfg.refine:
        best = refine_estimate(best, modes, geom, cfg.eta_block, cfg.refine_isolation,
                               cfg.refine_min_modes)
    return best

"""Sinogram modes: detection in data, prediction from trajectories, refinement."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import peak_prominences

from .geometry import AcquisitionGeometry, Projectile
from .model import ETA_BLOCKS, Sinogram

logger = logging.getLogger(__name__)

LAMBDA_GUARD = 1e-12


class DegenerateGeometryError(ValueError):
    """The particle sits level with the source in the fixed coordinate."""


@dataclass(frozen=True)
class PeakConfig:
    """Peak picking: strict interior maxima, prominence and spacing filters.

    ``rel_prominence`` is a fraction of the column maximum.
    """

    rel_prominence: float = 0.01
    min_separation: int = 3
    max_peaks: int | None = None
    subpixel: bool = True


@dataclass(frozen=True)
class ModeFrame:
    """Modes detected in a single time column."""

    detector_index: np.ndarray  # (k,) integer bins
    position: np.ndarray  # (k, d) refined points on the detector
    value: np.ndarray  # (k,) sinogram value at the bin

    def __len__(self) -> int:
        return int(self.detector_index.size)


@dataclass(frozen=True)
class ModeSet:
    times: np.ndarray
    frames: tuple[ModeFrame, ...]

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, m: int) -> ModeFrame:
        return self.frames[m]

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(f) for f in self.frames], dtype=int)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_rows(self) -> list[tuple]:
        rows = []
        for m, fr in enumerate(self.frames):
            for k in range(len(fr)):
                rows.append((m, int(fr.detector_index[k]), *map(float, fr.position[k]),
                             float(fr.value[k])))
        return rows

    @classmethod
    def from_positions(cls, times, positions: Sequence[np.ndarray], geom: AcquisitionGeometry) -> "ModeSet":
        """Build a mode set from explicit detector points (one array per time)."""
        frames = []
        start = np.array(geom.detector_start)
        seg = np.array(geom.detector_end) - start
        for pos in positions:
            pos = np.asarray(pos, dtype=float).reshape(-1, geom.dim)
            frac = ((pos - start) @ seg) / (seg @ seg) if pos.size else np.zeros(0)
            idx = np.rint(frac * (geom.num_detectors - 1)).astype(int)
            order = np.argsort(frac, kind="stable")
            frames.append(ModeFrame(idx[order], pos[order], np.zeros(len(idx))))
        return cls(np.asarray(times, dtype=float), tuple(frames))


def _strict_maxima(col: np.ndarray) -> np.ndarray:
    return np.flatnonzero((col[1:-1] > col[:-2]) & (col[1:-1] > col[2:])) + 1


def _parabolic_offset(y0: float, y1: float, y2: float) -> float:
    if min(y0, y1, y2) <= 0:
        return 0.0
    l0, l1, l2 = np.log(y0), np.log(y1), np.log(y2)
    curv = l0 - 2.0 * l1 + l2
    if not curv < 0:
        return 0.0
    return float(np.clip(0.5 * (l0 - l2) / curv, -0.5, 0.5))


def detect_column(col: np.ndarray, cfg: PeakConfig) -> tuple[np.ndarray, np.ndarray]:
    """Peak bins and sub-bin offsets for one detector column."""
    col = np.asarray(col, dtype=float)
    top = col.max(initial=0.0)
    if col.size < 3 or not top > 0:
        return np.zeros(0, dtype=int), np.zeros(0)
    peaks = _strict_maxima(col)
    if peaks.size == 0:
        return peaks, np.zeros(0)
    prom = peak_prominences(col, peaks)[0]
    keep = prom >= cfg.rel_prominence * top
    peaks, prom = peaks[keep], prom[keep]
    # spacing: greedily keep the tallest peaks
    order = np.argsort(-col[peaks], kind="stable")
    chosen: list[int] = []
    for i in order:
        if all(abs(peaks[i] - peaks[j]) >= cfg.min_separation for j in chosen):
            chosen.append(i)
    if cfg.max_peaks is not None and len(chosen) > cfg.max_peaks:
        chosen = sorted(chosen, key=lambda i: -prom[i])[: cfg.max_peaks]
    peaks = np.sort(peaks[chosen])
    if cfg.subpixel:
        offs = np.array([_parabolic_offset(col[i - 1], col[i], col[i + 1]) for i in peaks])
    else:
        offs = np.zeros(peaks.size)
    return peaks, offs


def detect_modes(g: Sinogram, cfg: PeakConfig | None = None) -> ModeSet:
    """Local maxima of every time column of ``g``, refined below bin size."""
    cfg = cfg or PeakConfig()
    geom = g.geometry
    start = np.array(geom.detector_start)
    step = (np.array(geom.detector_end) - start) / max(geom.num_detectors - 1, 1)
    frames = []
    for m in range(geom.num_times):
        col = g.values[:, m]
        peaks, offs = detect_column(col, cfg)
        pos = start[None, :] + (peaks + offs)[:, None] * step[None, :]
        frames.append(ModeFrame(peaks, pos, col[peaks].copy()))
    return ModeSet(geom.times.copy(), tuple(frames))


# ---------------------------------------------------------------------------
# predicted modes


def predict_modes(eta: Projectile, times, geom: AcquisitionGeometry):
    """Mode positions and their Jacobian w.r.t. the particle center.

    Returns ``(r_hat, J, bad)`` with shapes (T, d), (T, d, d), (T,); ``bad``
    flags times where the collinearity factor is undefined (those rows hold
    NaN).
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    s = geom.source_array
    k = geom.fixed_component_index
    C = eta.at(times)
    w = s[None, :] - C
    denom = w[:, k]
    bad = np.abs(denom) < LAMBDA_GUARD
    safe = np.where(bad, 1.0, denom)
    lam = (geom.detector_plane - s[k]) / safe
    r_hat = s[None, :] + lam[:, None] * w
    d = geom.dim
    J = -lam[:, None, None] * np.eye(d)[None]
    J[:, :, k] += w * (lam / safe)[:, None]
    r_hat[bad] = np.nan
    J[bad] = np.nan
    return r_hat, J, bad


def mode_map(eta: Projectile, t, geom: AcquisitionGeometry) -> np.ndarray:
    """Detector point collinear with the source and the particle center at ``t``.

    Depends on the trajectory only. ``t`` scalar gives shape ``(d,)``; an
    array of times gives ``(T, d)``.
    """
    r_hat, _, bad = predict_modes(eta, t, geom)
    if np.any(bad):
        raise DegenerateGeometryError(
            "particle is level with the source in the fixed coordinate at "
            f"t={np.atleast_1d(t)[bad][0]!r}"
        )
    return r_hat[0] if np.ndim(t) == 0 else r_hat


def eta_vector(eta: Projectile, eta_block: str = "v") -> np.ndarray:
    return np.concatenate([getattr(eta, n) for n in ETA_BLOCKS[eta_block]])


def eta_from_vector(vec, template: Projectile, eta_block: str = "v") -> Projectile:
    d = template.dim
    fields = {n: np.asarray(vec[i * d:(i + 1) * d], dtype=float)
              for i, n in enumerate(ETA_BLOCKS[eta_block])}
    return template.replace(**fields)


def mode_jacobian(J: np.ndarray, times: np.ndarray, eta_block: str = "v") -> np.ndarray:
    """Chain the center Jacobian into the free trajectory block: (T, d, p)."""
    blocks = []
    for name in ETA_BLOCKS[eta_block]:
        if name == "mu":
            blocks.append(J)
        elif name == "v":
            blocks.append(J * times[:, None, None])
        else:
            blocks.append(J * (0.5 * times ** 2)[:, None, None])
    return np.concatenate(blocks, axis=2)


@dataclass(frozen=True)
class RefineResult:
    eta: Projectile
    converged: bool
    warning: bool
    residual_norm: float
    initial_residual_norm: float
    iterations: int


def newton_refine(eta_init: Projectile, times, targets, geom: AcquisitionGeometry,
                  eta_block: str = "v", max_iter: int = 50, xtol: float = 1e-10,
                  ftol: float = 1e-12,
                  residual_tol: float | None = None) -> RefineResult:
    """Gauss-Newton fit of predicted modes to observed, already-assigned modes.

    ``times`` and ``targets`` list the times at which this particle was
    matched and the detector points it was matched to. The residual never
    increases: every step is halved until it decreases or is abandoned.
    ``warning`` is raised on non-convergence (the initial trajectory is then
    returned) or when the final RMS residual exceeds ``residual_tol``
    (half a detector pitch by default).
    """
    times = np.asarray(times, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(times.size, geom.dim)
    if residual_tol is None:
        residual_tol = 0.5 * geom.detector_pitch

    def resid(e: Projectile):
        r_hat, J, bad = predict_modes(e, times, geom)
        if np.any(bad):
            return None, None
        return (r_hat - targets).ravel(), mode_jacobian(J, times, eta_block).reshape(-1, len(x))

    x = eta_vector(eta_init, eta_block)
    eta = eta_init
    r, Jx = resid(eta)
    if r is None:
        raise DegenerateGeometryError("initial trajectory is degenerate at an assigned time")
    norm0 = float(np.linalg.norm(r))
    norm = norm0
    converged = norm == 0.0 or times.size == 0
    it = 0
    while not converged and it < max_iter:
        it += 1
        step, *_ = np.linalg.lstsq(Jx, -r, rcond=None)
        accepted = False
        h = 1.0
        for _ in range(40):
            cand = eta_from_vector(x + h * step, eta_init, eta_block)
            rc, Jc = resid(cand)
            if rc is not None and np.linalg.norm(rc) < norm:
                accepted = True
                break
            h *= 0.5
        small = np.linalg.norm(step) <= xtol * (1.0 + np.linalg.norm(x))
        if not accepted:
            # no decrease possible along the Gauss-Newton direction
            converged = small or np.linalg.norm(Jx.T @ r) <= 1e-12 * max(1.0, norm)
            break
        x = x + h * step
        eta, r, Jx = cand, rc, Jc
        new_norm = float(np.linalg.norm(r))
        stalled = norm - new_norm <= ftol * norm
        norm = new_norm
        if small or stalled or norm == 0.0:
            converged = True
    if not converged and it >= max_iter:
        # one more check: a tiny final step also counts as convergence
        converged = np.linalg.norm(Jx.T @ r) <= 1e-10 * max(1.0, norm)
    rms = norm / np.sqrt(max(times.size, 1))
    warn = (not converged) or rms > residual_tol
    if not converged:
        logger.warning("mode refinement did not converge in %d iterations", max_iter)
        return RefineResult(eta_init, False, True, norm0, norm0, it)
    if warn:
        logger.warning("mode refinement left RMS residual %.3g (> %.3g)", rms, residual_tol)
    return RefineResult(eta, True, warn, norm, norm0, it)

"""Generative forward model for Gaussian particles in rigid motion.

Each particle is ``alpha * rho0(U R(t Theta)^T (x - C(t)))`` with the fixed
template ``rho0(x) = exp(-x.x)``. Its line integral between a source ``s``
and detector point ``r`` has the closed form

    sqrt(pi) / ||W r_hat|| * exp(-||W (w - beta (r - s))||^2)

with ``W = U R^T``, ``w = s - C`` and ``beta`` the minimiser of that norm.
This is algebraically the usual ``<Wd, Ww>^2/||Wd||^2 - ||Ww||^2`` exponent,
written so the large terms never cancel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import AcquisitionGeometry, Projectile, rotation_dim, rotation_jacobian, rotation_matrix, trajectory

SQRT_PI = float(np.sqrt(np.pi))

# Free-parameter blocks that gradients and optimizers can address.
ETA_BLOCKS = {"none": (), "v": ("v",), "v+mu": ("mu", "v"), "full": ("mu", "v", "a")}


class SingularShapeError(ValueError):
    """Raised when a shape matrix (or its image of a ray) is singular."""


def upper_indices(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major indices of the upper triangle (diagonal included)."""
    return np.triu_indices(d)


def canonical_shape(U) -> np.ndarray:
    """Upper-triangular, positive-diagonal ``V`` with ``V^T V = U^T U``."""
    U = np.asarray(U, dtype=float)
    _, r = np.linalg.qr(U)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return signs[:, None] * r


@dataclass(frozen=True)
class ParticleParams:
    """Attenuation, shape, angular velocity and projectile parameters."""

    alpha: float
    U: np.ndarray
    theta: np.ndarray
    mu: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        U = np.array(self.U, dtype=float)
        d = U.shape[0]
        if U.shape != (d, d) or d < 2:
            raise ValueError(f"U must be square with d >= 2, got shape {U.shape}")
        theta = np.atleast_1d(np.array(self.theta, dtype=float))
        mu, v, a = (np.array(x, dtype=float).reshape(-1) for x in (self.mu, self.v, self.a))
        if theta.shape != (rotation_dim(d),):
            raise ValueError(f"theta must have {rotation_dim(d)} entries for d={d}")
        if not (mu.shape == v.shape == a.shape == (d,)):
            raise ValueError("mu, v, a must all have length d")
        if np.any(np.tril(U, -1) != 0):
            raise ValueError("U must be upper triangular")
        if np.any(np.diag(U) <= 0):
            raise ValueError("U must have a positive diagonal")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        for arr in (U, theta, mu, v, a):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "a", a)

    @property
    def dim(self) -> int:
        return self.U.shape[0]

    @property
    def eta(self) -> Projectile:
        return Projectile(self.mu, self.v, self.a)

    def replace(self, **changes) -> "ParticleParams":
        fields = dict(alpha=self.alpha, U=self.U, theta=self.theta, mu=self.mu, v=self.v, a=self.a)
        fields.update(changes)
        return ParticleParams(**fields)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "U": self.U.tolist(),
            "theta": self.theta.tolist(),
            "mu": self.mu.tolist(),
            "v": self.v.tolist(),
            "a": self.a.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParticleParams":
        return cls(alpha=data["alpha"], U=data["U"], theta=data["theta"],
                   mu=data["mu"], v=data["v"], a=data["a"])


@dataclass(frozen=True)
class Scene:
    particles: tuple[ParticleParams, ...]

    def __init__(self, particles: Iterable[ParticleParams]):
        particles = tuple(particles)
        if not particles:
            raise ValueError("a scene needs at least one particle")
        d = particles[0].dim
        if any(p.dim != d for p in particles):
            raise ValueError("all particles must share the ambient dimension")
        object.__setattr__(self, "particles", particles)

    def __len__(self) -> int:
        return len(self.particles)

    def __iter__(self):
        return iter(self.particles)

    def __getitem__(self, i) -> ParticleParams:
        return self.particles[i]

    @property
    def dim(self) -> int:
        return self.particles[0].dim

    def replace_particle(self, n: int, particle: ParticleParams) -> "Scene":
        parts = list(self.particles)
        parts[n] = particle
        return Scene(parts)

    def to_dict(self) -> dict:
        return {"particles": [p.to_dict() for p in self.particles]}

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        return cls(ParticleParams.from_dict(p) for p in data["particles"])


@dataclass(frozen=True)
class Sinogram:
    """Projection values ``values[m_r, m_t]`` on an acquisition geometry."""

    values: np.ndarray
    geometry: AcquisitionGeometry = field(compare=False)

    def __post_init__(self):
        # fixed C layout keeps reductions bitwise reproducible across file round trips
        vals = np.array(self.values, dtype=float, order="C")
        expected = (self.geometry.num_detectors, self.geometry.num_times)
        if vals.shape != expected:
            raise ValueError(f"sinogram shape {vals.shape} does not match geometry {expected}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("sinogram contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


def effective_gaussian(p: ParticleParams, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Shape matrix and center at time ``t``: ``(U R(t Theta)^T, C(t))``."""
    R = rotation_matrix(t * p.theta, p.dim)
    return p.U @ R.T, trajectory(p.mu, p.v, p.a, t)


def xray_gaussian(U, center, s, r) -> float:
    """Line integral of ``rho0(U (x - center))`` along the line from ``s`` through ``r``."""
    U = np.asarray(U, dtype=float)
    s = np.asarray(s, dtype=float)
    r = np.asarray(r, dtype=float)
    center = np.asarray(center, dtype=float)
    delta = r - s
    if not np.any(delta):
        raise ValueError("source and detector point coincide")
    if abs(np.linalg.det(U)) <= 1e-300 or np.linalg.cond(U) > 1e14:
        raise SingularShapeError("shape matrix is singular")
    x, _ = _ray_terms(U[None], (s - center)[None], delta[None], np.linalg.norm(delta)[None])
    return float(x[0, 0])


# ---------------------------------------------------------------------------
# batched kernels shared by every evaluation path


def _rotation_stack(theta: np.ndarray, times: np.ndarray, d: int) -> np.ndarray:
    if d == 2:
        ang = times * theta[0]
        c, s = np.cos(ang), np.sin(ang)
        out = np.empty((times.size, 2, 2))
        out[:, 0, 0] = c
        out[:, 0, 1] = -s
        out[:, 1, 0] = s
        out[:, 1, 1] = c
        return out
    return np.stack([rotation_matrix(t * theta, d) for t in times])


def _rotation_jac_stack(theta: np.ndarray, times: np.ndarray, d: int) -> np.ndarray:
    """d R(t theta) / d theta_k, shape (M_t, d_R, d, d)."""
    if d == 2:
        ang = times * theta[0]
        c, s = np.cos(ang), np.sin(ang)
        out = np.empty((times.size, 1, 2, 2))
        out[:, 0, 0, 0] = -s * times
        out[:, 0, 0, 1] = -c * times
        out[:, 0, 1, 0] = c * times
        out[:, 0, 1, 1] = -s * times
        return out
    return np.stack([t * rotation_jacobian(t * theta, d) for t in times])


def _shape_stack(U: np.ndarray, R: np.ndarray) -> np.ndarray:
    # W[t] = U @ R[t]^T written elementwise so every batch size rounds alike
    return (U[None, :, None, :] * R[:, None, :, :]).sum(axis=-1)


def _ray_terms(W, w, delta, delta_norm, need_grad=False):
    """Closed-form projections for every (time, detector) pair.

    W: (T, d, d) shape matrices; w: (T, d) source minus center;
    delta: (M, d) detector minus source; delta_norm: (M,).
    Returns X with shape (T, M) and, if requested, intermediates.
    Vector quantities are kept as lists of (T, M) components; every sum is
    elementwise, so each entry rounds the same whatever the batch size.
    """
    d = W.shape[-1]
    dcol = [np.ascontiguousarray(delta[None, :, j]) for j in range(d)]
    p = []
    for i in range(d):
        acc = W[:, i, 0, None] * dcol[0]
        for j in range(1, d):
            acc = acc + W[:, i, j, None] * dcol[j]
        p.append(acc)
    q = (W * w[:, None, :]).sum(axis=-1)  # (T, d)
    A = p[0] * p[0]
    B = p[0] * q[:, 0, None]
    for i in range(1, d):
        A = A + p[i] * p[i]
        B = B + p[i] * q[:, i, None]
    if np.any(A <= 0):
        raise SingularShapeError("shape matrix annihilates a ray direction")
    beta = B / A
    e = [q[:, i, None] - beta * p[i] for i in range(d)]  # W (w - beta delta)
    E = e[0] * e[0]
    for i in range(1, d):
        E = E + e[i] * e[i]
    X = SQRT_PI * delta_norm[None, :] / np.sqrt(A) * np.exp(-E)
    if not need_grad:
        return X, None
    return X, (p, e, A, beta)


@dataclass
class _ParticleEval:
    X: np.ndarray  # (M_t, M_r) projections at unit attenuation
    W: np.ndarray
    R: np.ndarray
    aux: tuple | None
    times: np.ndarray
    delta: np.ndarray
    w: np.ndarray  # (M_t, d) source minus center


def _eval_particle(p: ParticleParams, s, detectors, times, need_grad=False) -> _ParticleEval:
    s = np.asarray(s, dtype=float)
    detectors = np.atleast_2d(np.asarray(detectors, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    d = p.dim
    R = _rotation_stack(p.theta, times, d)
    W = _shape_stack(p.U, R)
    centers = trajectory(p.mu, p.v, p.a, times)
    w = s[None, :] - centers
    delta = detectors - s[None, :]
    dn = np.sqrt((delta * delta).sum(axis=-1))
    if np.any(dn == 0):
        raise ValueError("source and detector point coincide")
    X, aux = _ray_terms(W, w, delta, dn, need_grad)
    return _ParticleEval(X, W, R, aux, times, delta, w)


def particle_block_size(d: int, eta_block: str = "v") -> int:
    return 1 + d * (d + 1) // 2 + rotation_dim(d) + d * len(ETA_BLOCKS[eta_block])


def _particle_vjp(p: ParticleParams, ev: _ParticleEval, weights: np.ndarray,
                  eta_block: str = "v") -> np.ndarray:
    """Sum over entries of ``weights * dF/dparam`` for one particle.

    ``weights`` has shape (M_t, M_r). Output follows the canonical order
    (alpha, upper(U) row-major, Theta, then the eta block).
    """
    d = p.dim
    pvec, e, A, beta = ev.aux
    X = ev.X
    wx = weights * X  # d/d alpha
    k = p.alpha * wx
    # d log X / dW = -(1/A) p delta^T - 2 e (w - beta delta)^T
    kA = k / A
    kb2 = 2.0 * k * beta
    w = ev.w
    gW = np.empty((X.shape[0], d, d))
    ke_sum = np.empty((X.shape[0], d))
    for i in range(d):
        ke_sum[:, i] = (k * e[i]).sum(axis=1)
        a_i = kb2 * e[i] - kA * pvec[i]
        gW[:, i, :] = a_i @ ev.delta - 2.0 * ke_sum[:, i, None] * w
    # dlogX/dc = 2 W^T e
    gc = 2.0 * np.einsum("tji,tj->ti", ev.W, ke_sum)
    gU = np.einsum("tij,tjk->ik", gW, ev.R)
    if p.theta.size:
        Rj = _rotation_jac_stack(p.theta, ev.times, d)
        # dW/dtheta_k = U dR^T; contract with gW
        gtheta = np.einsum("tij,il,tkjl->k", gW, p.U, Rj)
    else:
        gtheta = np.zeros(0)
    iu = upper_indices(d)
    parts = [np.array([wx.sum()]), gU[iu], gtheta]
    t = ev.times
    for name in ETA_BLOCKS[eta_block]:
        if name == "mu":
            parts.append(gc.sum(axis=0))
        elif name == "v":
            parts.append((t[:, None] * gc).sum(axis=0))
        else:
            parts.append((0.5 * t[:, None] ** 2 * gc).sum(axis=0))
    return np.concatenate(parts)


def _particle_values(scene: Scene, s, detectors, times, need_grad=False):
    return [_eval_particle(p, s, detectors, times, need_grad) for p in scene]


def forward_operator(scene: Scene, s, r, t: float) -> float:
    """Projection value of the whole scene on one ray at one time."""
    r = np.asarray(r, dtype=float)
    if not np.any(r - np.asarray(s, dtype=float)):
        raise ValueError("source and detector point coincide")
    total = 0.0
    for p in scene:
        ev = _eval_particle(p, s, r[None], np.array([t]))
        total = total + p.alpha * ev.X[0, 0]
    return float(total)


def scene_projections(scene: Scene, geom: AcquisitionGeometry) -> list[np.ndarray]:
    """Per-particle projections at unit attenuation, each shaped (M_r, M_t)."""
    return [ev.X.T for ev in _particle_values(scene, geom.source_array, geom.detectors, geom.times)]


def simulate_sinogram(scene: Scene, geom: AcquisitionGeometry) -> Sinogram:
    """Noiseless sinogram sampled pointwise at every detector and time."""
    if scene.dim != geom.dim:
        raise ValueError("scene and geometry dimensions differ")
    total = None
    for p, ev in zip(scene, _particle_values(scene, geom.source_array, geom.detectors, geom.times)):
        contrib = p.alpha * ev.X
        total = contrib if total is None else total + contrib
    return Sinogram(total.T, geom)


def forward_gradients(scene: Scene, s, r, t: float, eta_block: str = "v") -> np.ndarray:
    """Gradient of :func:`forward_operator` w.r.t. every particle's parameters.

    Per particle the order is ``alpha``, the upper-triangular entries of
    ``U`` row by row, ``Theta``, then the trajectory block (``v`` by
    default; ``mu, v`` or ``mu, v, a`` for the wider blocks).
    """
    r = np.asarray(r, dtype=float)
    grads = []
    for p in scene:
        ev = _eval_particle(p, s, r[None], np.array([t]), need_grad=True)
        grads.append(_particle_vjp(p, ev, np.ones((1, 1)), eta_block))
    return np.concatenate(grads)


def scene_residual_vjp(scene: Scene, geom: AcquisitionGeometry, weights: np.ndarray,
                       eta_block: str = "v", evals=None) -> np.ndarray:
    """``sum_m weights[m] * dF_m/dparams`` for ``weights`` shaped (M_r, M_t)."""
    if evals is None:
        evals = _particle_values(scene, geom.source_array, geom.detectors, geom.times, need_grad=True)
    wt = np.asarray(weights, dtype=float).T
    return np.concatenate([_particle_vjp(p, ev, wt, eta_block) for p, ev in zip(scene, evals)])


def render_particle(p: ParticleParams, grid_x: np.ndarray, grid_y: np.ndarray, t: float = 0.0) -> np.ndarray:
    """Density ``alpha rho0(W (x - C(t)))`` of a planar particle on a mesh."""
    if p.dim != 2:
        raise ValueError("rendering is implemented for d = 2")
    W, c = effective_gaussian(p, t)
    pts = np.stack([grid_x - c[0], grid_y - c[1]], axis=-1)
    z = pts @ W.T
    return p.alpha * np.exp(-(z * z).sum(axis=-1))


def pack_particle(p: ParticleParams, eta_block: str = "v") -> np.ndarray:
    iu = upper_indices(p.dim)
    parts = [np.array([p.alpha]), p.U[iu], p.theta]
    for name in ETA_BLOCKS[eta_block]:
        parts.append(getattr(p, name))
    return np.concatenate(parts)


def unpack_particle(vec: Sequence[float], template: ParticleParams, eta_block: str = "v") -> ParticleParams:
    """Inverse of :func:`pack_particle`; fields outside the block come from ``template``."""
    vec = np.asarray(vec, dtype=float)
    d = template.dim
    iu = upper_indices(d)
    nu = len(iu[0])
    dr = rotation_dim(d)
    U = np.zeros((d, d))
    U[iu] = vec[1:1 + nu]
    pos = 1 + nu + dr
    fields = {}
    for name in ETA_BLOCKS[eta_block]:
        fields[name] = vec[pos:pos + d]
        pos += d
    return template.replace(alpha=vec[0], U=U, theta=vec[1 + nu:1 + nu + dr], **fields)

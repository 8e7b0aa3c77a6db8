"""Acquisition geometry, time sampling and rigid-motion parameterization.

Rotations in R^d are built from d(d-1)/2 planar rotation factors, one per
coordinate plane (i, j) with i < j, taken in lexicographic order of the
plane and multiplied left to right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def rotation_dim(d: int) -> int:
    """Number of rotation parameters in ambient dimension ``d``."""
    return d * (d - 1) // 2


def rotation_planes(d: int) -> list[tuple[int, int]]:
    """Coordinate planes (0-based) in factor order."""
    return [(i, j) for i in range(d) for j in range(i + 1, d)]


def _planar(d: int, i: int, j: int, angle: float) -> np.ndarray:
    g = np.eye(d)
    c, s = math.cos(angle), math.sin(angle)
    g[i, i] = c
    g[j, j] = c
    g[i, j] = -s
    g[j, i] = s
    return g


def _planar_derivative(d: int, i: int, j: int, angle: float) -> np.ndarray:
    g = np.zeros((d, d))
    c, s = math.cos(angle), math.sin(angle)
    g[i, i] = -s
    g[j, j] = -s
    g[i, j] = -c
    g[j, i] = c
    return g


def _check_omega(omega, d: int) -> np.ndarray:
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if omega.ndim != 1 or omega.size != rotation_dim(d):
        raise ValueError(
            f"rotation parameter has {omega.size} entries, expected "
            f"{rotation_dim(d)} for d={d}"
        )
    return omega


def rotation_matrix(omega, d: int) -> np.ndarray:
    """Rotation ``R_omega`` as the ordered product of planar rotations.

    Parameters
    ----------
    omega : array_like, shape (d*(d-1)/2,)
        Angle of each planar factor, in radians.
    d : int
        Ambient dimension, ``d >= 2``.

    Returns
    -------
    ndarray, shape (d, d)
        Orthogonal matrix with determinant +1.
    """
    if d < 2:
        raise ValueError("ambient dimension must be at least 2")
    omega = _check_omega(omega, d)
    if d == 2:
        c, s = math.cos(omega[0]), math.sin(omega[0])
        return np.array([[c, -s], [s, c]])
    out = np.eye(d)
    for (i, j), w in zip(rotation_planes(d), omega):
        out = out @ _planar(d, i, j, w)
    return out


def rotation_jacobian(omega, d: int) -> np.ndarray:
    """Partial derivatives of :func:`rotation_matrix` w.r.t. each angle.

    Returns an array of shape ``(d_R, d, d)``.
    """
    omega = _check_omega(omega, d)
    planes = rotation_planes(d)
    factors = [_planar(d, i, j, w) for (i, j), w in zip(planes, omega)]
    jac = np.empty((len(planes), d, d))
    for k, ((i, j), w) in enumerate(zip(planes, omega)):
        m = np.eye(d)
        for q, f in enumerate(factors):
            m = m @ (_planar_derivative(d, i, j, w) if q == k else f)
        jac[k] = m
    return jac


def trajectory(mu, v, a, t):
    """Projectile curve ``mu + t v + t^2/2 a``.

    ``t`` may be a scalar (returns shape ``(d,)``) or a 1-D array of times
    (returns shape ``(len(t), d)``).
    """
    mu = np.asarray(mu, dtype=float)
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return mu + t * v + 0.5 * t * t * a
    tt = t[:, None]
    return mu[None, :] + tt * v[None, :] + 0.5 * tt * tt * a[None, :]


@dataclass(frozen=True)
class Projectile:
    """Trajectory parameters: initial position, velocity, acceleration."""

    mu: np.ndarray
    v: np.ndarray
    a: np.ndarray

    def __post_init__(self):
        for name in ("mu", "v", "a"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.mu.shape == self.v.shape == self.a.shape):
            raise ValueError("mu, v, a must share a dimension")

    @property
    def dim(self) -> int:
        return self.mu.size

    def at(self, t):
        return trajectory(self.mu, self.v, self.a, t)

    def replace(self, **changes) -> "Projectile":
        fields = dict(mu=self.mu, v=self.v, a=self.a)
        fields.update(changes)
        return Projectile(**fields)


@dataclass(frozen=True)
class DimensionCheck:
    satisfied: bool
    min_num_times: int


def dimension_criterion(d: int, n_particles: int, n_sources: int,
                        n_detectors: int, n_times: int | None = None) -> DimensionCheck:
    """Parameter-count test ``(2d+1) M_s M_r M_t >= (d^2+3d+1) N``.

    This is a necessary condition only: a single view (``M_t = 1``) can
    pass it and still be far from invertible.
    """
    for name, val in (("d", d), ("N", n_particles), ("M_s", n_sources),
                      ("M_r", n_detectors)):
        if int(val) != val or val < 1:
            raise ValueError(f"{name} must be a positive integer, got {val!r}")
    data_dim = 2 * d + 1
    unknowns = (d * d + 3 * d + 1) * n_particles
    per_time = data_dim * n_sources * n_detectors
    min_mt = max(1, -(-unknowns // per_time))
    if n_times is None:
        return DimensionCheck(True, min_mt)
    return DimensionCheck(per_time * n_times >= unknowns, min_mt)


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Single fixed source, a straight detector segment and uniform times.

    ``fixed_component_index`` names the coordinate in which the detector is
    flat; that coordinate pins the collinearity factor used by the mode map.
    """

    source: tuple[float, ...]
    detector_start: tuple[float, ...]
    detector_end: tuple[float, ...]
    num_detectors: int
    t_min: float
    t_max: float
    num_times: int
    fixed_component_index: int = 0
    _detectors: np.ndarray = field(init=False, repr=False, compare=False)
    _times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        src = tuple(float(x) for x in self.source)
        start = tuple(float(x) for x in self.detector_start)
        end = tuple(float(x) for x in self.detector_end)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "detector_start", start)
        object.__setattr__(self, "detector_end", end)
        d = len(src)
        if d < 2 or len(start) != d or len(end) != d:
            raise ValueError("source and detector endpoints must share dimension d >= 2")
        if int(self.num_detectors) < 1 or int(self.num_times) < 1:
            raise ValueError("num_detectors and num_times must be positive")
        if self.num_times > 1 and not self.t_max > self.t_min:
            raise ValueError("t_max must exceed t_min")
        k = self.fixed_component_index
        if not 0 <= k < d:
            raise ValueError(f"fixed_component_index {k} out of range for d={d}")
        if self.num_detectors > 1 and start == end:
            raise ValueError("degenerate detector segment")
        if abs(start[k] - end[k]) > 1e-12 * max(1.0, abs(start[k])):
            raise ValueError(
                f"detector must be flat in coordinate {k} for the mode map "
                "(detector_start and detector_end differ there)"
            )
        if abs(src[k] - start[k]) <= 1e-12:
            raise ValueError("source shares the detector plane in the fixed coordinate")

        s = np.array(src)
        dets = np.linspace(np.array(start), np.array(end), int(self.num_detectors))
        # source on the detector segment
        seg = np.array(end) - np.array(start)
        if np.any(seg):
            u = np.dot(s - np.array(start), seg) / np.dot(seg, seg)
            foot = np.array(start) + np.clip(u, 0.0, 1.0) * seg
            if np.linalg.norm(foot - s) <= 1e-12:
                raise ValueError("source lies on the detector segment")
        dets.setflags(write=False)
        times = np.linspace(self.t_min, self.t_max, int(self.num_times))
        times.setflags(write=False)
        object.__setattr__(self, "_detectors", dets)
        object.__setattr__(self, "_times", times)

    @property
    def dim(self) -> int:
        return len(self.source)

    @property
    def source_array(self) -> np.ndarray:
        return np.array(self.source)

    @property
    def detectors(self) -> np.ndarray:
        """Detector positions, shape ``(M_r, d)``, endpoints included."""
        return self._detectors

    @property
    def times(self) -> np.ndarray:
        """Time samples, shape ``(M_t,)``, endpoints included."""
        return self._times

    @property
    def time_step(self) -> float:
        if self.num_times < 2:
            return 0.0
        return (self.t_max - self.t_min) / (self.num_times - 1)

    @property
    def detector_pitch(self) -> float:
        if self.num_detectors < 2:
            return 0.0
        seg = np.subtract(self.detector_end, self.detector_start)
        return float(np.linalg.norm(seg)) / (self.num_detectors - 1)

    @property
    def detector_plane(self) -> float:
        """Value of the fixed coordinate shared by every detector."""
        return self.detector_start[self.fixed_component_index]

    def to_dict(self) -> dict:
        return {
            "source": list(self.source),
            "detector_start": list(self.detector_start),
            "detector_end": list(self.detector_end),
            "num_detectors": int(self.num_detectors),
            "t_min": float(self.t_min),
            "t_max": float(self.t_max),
            "num_times": int(self.num_times),
            "fixed_component_index": int(self.fixed_component_index),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AcquisitionGeometry":
        return cls(
            source=tuple(data["source"]),
            detector_start=tuple(data["detector_start"]),
            detector_end=tuple(data["detector_end"]),
            num_detectors=int(data["num_detectors"]),
            t_min=float(data["t_min"]),
            t_max=float(data["t_max"]),
            num_times=int(data["num_times"]),
            fixed_component_index=int(data.get("fixed_component_index", 0)),
        )


def benchmark_geometry(source: Sequence[float] = (-1.0, 1.0)) -> AcquisitionGeometry:
    """The planar benchmark setup: 128 detectors on x = 4, 150 views on [0, 1.5] s."""
    return AcquisitionGeometry(
        source=tuple(source),
        detector_start=(4.0, 1.0),
        detector_end=(4.0, -3.0),
        num_detectors=128,
        t_min=0.0,
        t_max=1.5,
        num_times=150,
        fixed_component_index=0,
    )

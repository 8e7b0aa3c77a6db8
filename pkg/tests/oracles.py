"""Independent reference computations used only by the tests."""

import itertools

import numpy as np
from scipy.integrate import quad


def line_integral(U, center, s, r, width=12.0):
    """Adaptive quadrature of exp(-|U(x - center)|^2) along the line through s and r.

    The integrand is a Gaussian in arc length; integration covers
    ``width`` widths either side of its peak.
    """
    U, center, s, r = (np.asarray(a, dtype=float) for a in (U, center, s, r))
    u = (r - s) / np.linalg.norm(r - s)
    Uu = U @ u
    Uw = U @ (s - center)
    k = float(Uu @ Uu)
    peak = -float(Uu @ Uw) / k
    sigma = 1.0 / np.sqrt(k)

    def f(xi):
        z = Uw + xi * Uu
        return np.exp(-float(z @ z))

    val, _ = quad(f, peak - width * sigma, peak + width * sigma, epsabs=0.0, epsrel=1e-13,
                  limit=200, points=[peak])
    return val


def brute_force_assignment(cost):
    """Minimum total cost over every injective matching of the smaller side."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n <= m:
        best = min(itertools.permutations(range(m), n),
                   key=lambda cols: sum(cost[i, c] for i, c in enumerate(cols)))
        return sum(cost[i, c] for i, c in enumerate(best))
    return brute_force_assignment(cost.T)


def exhaustive_nnls(A, b):
    """Best unconstrained least-squares fit over every support with a nonnegative solution."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    n = A.shape[1]
    best_x, best_f = np.zeros(n), float(b @ b)
    for k in range(1, n + 1):
        for support in itertools.combinations(range(n), k):
            cols = list(support)
            xs, *_ = np.linalg.lstsq(A[:, cols], b, rcond=None)
            if np.any(xs < 0):
                continue
            x = np.zeros(n)
            x[cols] = xs
            f = float(np.sum((A @ x - b) ** 2))
            if f < best_f:
                best_x, best_f = x, f
    return best_x, best_f


def projection_argmax(particle, geom, t, n_fine=4096):
    """Detector point maximising the closed-form projection on a fine grid."""
    from gmmct.model import Scene, forward_operator
    pts = np.linspace(np.array(geom.detector_start), np.array(geom.detector_end), n_fine)
    scene = Scene([particle])
    vals = np.array([forward_operator(scene, geom.source, r, t) for r in pts])
    return pts[int(np.argmax(vals))], np.linalg.norm(pts[1] - pts[0])

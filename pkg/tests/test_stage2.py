import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gmmct.geometry import AcquisitionGeometry
from gmmct.model import ParticleParams, Scene, canonical_shape, forward_operator, simulate_sinogram
from gmmct.optim import check_gradient
from gmmct.stage2 import (IsotropicShapeError, Stage2Config, grid_search_rotation, huber,
                          huber_derivative, nnls_attenuation, optimize_morphology, softplus,
                          softplus_inverse, stage2_objective)

reals = st.floats(-1e3, 1e3, allow_nan=False)
deltas = st.floats(1e-3, 1e2)


def test_huber_examples():
    d = 0.7
    assert huber(0.0, d) == 0.0
    assert huber(d, d) == pytest.approx(0.5 * d * d, rel=1e-15)
    assert huber(2 * d, d) == pytest.approx(1.5 * d * d, rel=1e-15)


@given(reals, deltas)
def test_huber_properties(u, d):
    assert huber(u, d) == huber(-u, d)
    assert huber(u, d) <= 0.5 * u * u * (1 + 1e-15)
    if abs(u) <= d:
        assert huber(u, d) == 0.5 * u * u
    else:
        assert huber(u, d) < 0.5 * u * u


@given(deltas)
def test_huber_is_c1_at_kinks(d):
    h = 1e-7 * d
    for k in (d, -d):
        left = (huber(k, d) - huber(k - h, d)) / h
        right = (huber(k + h, d) - huber(k, d)) / h
        assert left == pytest.approx(right, rel=1e-5)
        assert huber_derivative(k, d) == pytest.approx(right, rel=1e-5)


@given(st.floats(1e-6, 50))
def test_softplus_round_trip(y):
    assert softplus(softplus_inverse(y)) == pytest.approx(y, rel=1e-12)


def _args(scene):
    return ([p.theta for p in scene], [p.alpha for p in scene], [p.U for p in scene],
            [p.eta for p in scene])


def test_objective_zero_at_truth(truth, geom):
    data = simulate_sinogram(truth, geom)
    f, g = stage2_objective(*_args(truth), data)
    assert f <= 1e-20
    assert np.all(np.isfinite(g))


def test_objective_direct_summation():
    small = AcquisitionGeometry((-1.0, 1.0), (4.0, 1.5), (4.0, -0.5), 4, 0.0, 0.3, 4)
    p = ParticleParams(2.0, [[3.0, 1.0], [0.0, 2.0]], [4.0], (1, 1), (1.0, 0.5), (0, -9.81))
    data = simulate_sinogram(Scene([p]), small)
    doubled = p.replace(alpha=4.0)
    cfg = Stage2Config(huber_delta=1e6)  # every residual in the quadratic branch
    f, _ = stage2_objective(*_args(Scene([doubled])), data, cfg)
    ref = 0.0
    for i, r in enumerate(small.detectors):
        for m, t in enumerate(small.times):
            u = data.values[i, m] - forward_operator(Scene([doubled]), small.source, r, t)
            ref += 0.5 * u * u
    assert f == pytest.approx(ref / 16, rel=1e-12)
    assert f == pytest.approx(0.5 * np.mean(data.values ** 2), rel=1e-12)
    f2, _ = stage2_objective(*_args(Scene([doubled])), data, Stage2Config(huber_delta=0.05))
    ref2 = np.mean([huber(u, 0.05) for u in (-data.values).ravel()])
    assert f2 == pytest.approx(ref2, rel=1e-12)


def test_objective_gradient_few_points(truth, geom):
    data = simulate_sinogram(truth, geom)
    rng = np.random.default_rng(0)
    etas = [p.eta for p in truth]
    base = _args(truth)

    def fun(x):
        th, al, us = [], [], []
        for k in range(5):
            blk = x[5 * k:5 * k + 5]
            al.append(blk[0])
            us.append([[blk[1], blk[2]], [0.0, blk[3]]])
            th.append(blk[4:5])
        return stage2_objective(th, al, us, etas, data)

    x0 = np.concatenate([[a, U[0, 0], U[0, 1], U[1, 1], t[0]]
                         for t, a, U in zip(base[0], base[1], base[2])])
    for _ in range(3):
        assert check_gradient(fun, x0 * (1 + 0.05 * rng.standard_normal(x0.size))) <= 1e-5


def test_objective_invariant_under_shape_sign(truth, geom):
    data = simulate_sinogram(truth, geom)
    th, al, us, etas = _args(truth)
    pert = [U * 1.03 for U in us]
    f1, _ = stage2_objective(th, al, pert, etas, data)
    rng = np.random.default_rng(1)
    flipped = []
    for U in pert:
        q, _ = np.linalg.qr(rng.normal(size=(2, 2)))
        flipped.append(canonical_shape(q @ U))
    f2, _ = stage2_objective(th, al, flipped, etas, data)
    assert f2 == pytest.approx(f1, rel=1e-10)


def test_grid_search_finds_benchmark_rotation(truth, geom):
    p = truth[1]
    data = simulate_sinogram(Scene([p]), geom)
    start = Scene([p.replace(theta=[0.0])])
    cfg = Stage2Config()
    th = grid_search_rotation(0, start, data, cfg)
    grid = cfg.rotation_grid()
    assert th[0] in grid
    assert th[0] == grid[np.argmin(np.abs(grid - 5.1986))]
    assert abs(th[0] - 5.1986) <= 4 / 199


def test_grid_search_zero_rotation(truth, geom):
    p = truth[0].replace(theta=[0.0])
    data = simulate_sinogram(Scene([p]), geom)
    grid = np.linspace(-1.0, 1.0, 9)
    assert grid_search_rotation(0, Scene([p.replace(theta=[0.7])]), data, grid=grid)[0] == 0.0


def test_grid_search_rerun_does_not_worsen(truth, geom):
    data = simulate_sinogram(truth, geom)
    start = Scene(p.replace(theta=[3.0]) for p in truth)
    cfg = Stage2Config(n_rot_grid=21)
    th = grid_search_rotation(2, start, data, cfg)
    grid = np.append(cfg.rotation_grid(), [2.5, 5.05, 5.07])
    th2 = grid_search_rotation(2, start.replace_particle(2, start[2].replace(theta=th)), data, grid=grid)

    def resid(w):
        sc = start.replace_particle(2, start[2].replace(theta=w))
        return np.sum((simulate_sinogram(sc, geom).values - data.values) ** 2)

    assert resid(th2) <= resid(th)


def test_grid_search_3d_coordinatewise():
    geom3 = AcquisitionGeometry((-1.0, 1.0, 0.0), (4.0, 1.0, -1.0), (4.0, -3.0, 1.0), 64,
                                0.0, 0.6, 30)
    # detector line runs diagonally in (y, z) so every rotation plane leaves a trace
    p = ParticleParams(10.0, [[20.0, 4.0, 3.0], [0.0, 11.0, 2.0], [0.0, 0.0, 7.0]],
                       [3.1, 4.2, 5.3], (1, 1, 0), (1.5, 1.8, 0.2), (0, -9.81, 0))
    data = simulate_sinogram(Scene([p]), geom3)
    grid = np.linspace(2, 6, 41)
    pitch = grid[1] - grid[0]
    th = grid_search_rotation(0, Scene([p]), data, grid=grid)
    for c in range(3):
        fine = np.linspace(2, 6, 401)

        def resid(w, c=c):
            trial = p.theta.copy()
            trial[:c] = th[:c]
            trial[c] = w
            return np.sum((simulate_sinogram(Scene([p.replace(theta=trial)]), geom3).values
                           - data.values) ** 2)

        best = fine[np.argmin([resid(w) for w in fine])]
        assert abs(th[c] - best) <= pitch
        assert abs(th[c] - p.theta[c]) <= pitch


def test_grid_search_rejects_isotropic(truth, geom):
    data = simulate_sinogram(truth, geom)
    iso = Scene([truth[0].replace(U=np.eye(2) * 10)])
    with pytest.raises(IsotropicShapeError):
        grid_search_rotation(0, iso, data)


def test_nnls_attenuation_recovers_truth(truth, geom):
    data = simulate_sinogram(truth, geom)
    unit = Scene(p.replace(alpha=1.0) for p in truth)
    np.testing.assert_allclose(nnls_attenuation(unit, data), [p.alpha for p in truth], rtol=1e-8)


@pytest.mark.parametrize("kw", [dict(omega_min=6, omega_max=2), dict(n_rot_grid=1),
                                dict(n_morph_trials=0), dict(huber_delta=-1.0),
                                dict(polish_eta_block="x")])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        Stage2Config(**kw)


def test_single_particle_morphology(truth, geom):
    p = truth[2]
    data = simulate_sinogram(Scene([p]), geom)
    cfg = Stage2Config(n_morph_trials=2, sweep_starts=0, polish_eta_block="none", seed=3)
    est = optimize_morphology([p.eta], data, cfg)
    assert est.loss <= est.initial_loss
    assert est.loss <= 1e-6
    q = est.scene()[0]
    assert abs(q.theta[0] - p.theta[0]) <= 0.05
    assert abs(q.alpha / p.alpha - 1) <= 0.03
    G, H = p.U.T @ p.U, q.U.T @ q.U
    assert np.linalg.norm(G - H) <= 1e-2 * np.linalg.norm(G)
    refit = simulate_sinogram(est.scene(), geom)
    assert np.abs(refit.values - data.values).max() <= 1e-2

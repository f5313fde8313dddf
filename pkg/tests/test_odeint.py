import numpy as np
import pytest

from cdsmooth.errors import ConfigurationError, DivergenceError
from cdsmooth.models import make_double_well, make_ou, make_reentry, reentry_prior
from cdsmooth.odeint import (GridFunction, TimeGrid, euler_maruyama, hermite_mid,
                             measurement_times, rk4_integrate, sample_measurements, stage_eval,
                             sweep_affine, sweep_lyapunov)


def test_time_grid():
    g = TimeGrid(0.0, 1.0, 0.1, [0.5, 1.0])
    assert g.n_nodes == 11
    np.testing.assert_array_equal(g.measurement_indices, [5, 10])
    np.testing.assert_allclose(g.mid_times[0], 0.05)
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 1.0, 0.3)
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 1.0, 0.1, [0.55])
    with pytest.raises(ConfigurationError):
        TimeGrid(0.0, 1.0, 0.1, [0.5, 0.5])
    np.testing.assert_allclose(measurement_times(0.0, 10.0, 0.5)[[0, -1]], [0.5, 10.0])


def test_rk4_examples():
    g = TimeGrid(0.0, 1.0, 0.01)
    c = rk4_integrate(lambda t, y: np.zeros_like(y), np.array([2.5]), g)
    np.testing.assert_array_equal(c.post, 2.5)
    f = rk4_integrate(lambda t, y: -y, np.array([1.0]), g)
    assert f.post[-1, 0] == pytest.approx(np.exp(-1), abs=1e-9)
    b = rk4_integrate(lambda t, y: -y, np.array([np.exp(-1)]), g, "backward")
    assert b.post[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_rk4_fourth_order():
    errs = []
    for h in (0.1, 0.05):
        g = TimeGrid(0.0, 2.0, h)
        y = rk4_integrate(lambda t, y: -y, np.array([1.0]), g).post[-1, 0]
        errs.append(abs(y - np.exp(-2.0)))
    assert errs[0] / errs[1] >= 14.0


def test_rk4_divergence():
    g = TimeGrid(0.0, 1.0, 0.5)
    with pytest.raises(DivergenceError), np.errstate(over="ignore", invalid="ignore"):
        rk4_integrate(lambda t, y: y ** 8, np.array([1e40]), g)


def test_sweeps_match_rk4_and_round_trip():
    g = TimeGrid(0.0, 1.0, 0.01)
    A = np.array([[-1.0, 0.5], [-0.3, -0.2]])
    M = GridFunction.constant(g, A)
    c = GridFunction.continuous(g, np.stack([np.sin(g.times), np.cos(g.times)], -1),
                                np.stack([np.sin(g.mid_times), np.cos(g.mid_times)], -1))
    y0 = np.array([1.0, -0.5])
    post, _ = sweep_affine(M, c, y0)
    ref = rk4_integrate(lambda t, y: A @ y + np.array([np.sin(t), np.cos(t)]), y0, g)
    np.testing.assert_allclose(post, ref.post, atol=1e-13)
    back, _ = sweep_affine(M, c, post[-1], "backward")
    np.testing.assert_allclose(back[0], y0, atol=1e-8)
    S = GridFunction.constant(g, np.eye(2))
    P, _ = sweep_lyapunov(M, S, np.eye(2))
    refP = rk4_integrate(lambda t, Y: A @ Y + Y @ A.T + np.eye(2), np.eye(2), g)
    np.testing.assert_allclose(P, refP.post, atol=1e-13)


def test_backward_jumps_convention():
    g = TimeGrid(0.0, 1.0, 0.1, [0.5])
    M = GridFunction.constant(g, np.zeros((1, 1)))
    c = GridFunction.constant(g, np.zeros(1))
    jumps = np.zeros((g.n_nodes, 1))
    jumps[5] = 2.0
    post, pre = sweep_affine(M, c, np.zeros(1), "backward", jumps)
    # right limits are zero after the jump node, left limits carry the jump
    assert post[5, 0] == 0.0 and pre[5, 0] == 2.0 and post[4, 0] == 2.0


def test_hermite_mid_exact_for_cubics():
    g = TimeGrid(0.0, 1.0, 0.25)
    y = lambda t: t ** 3 - 2 * t  # noqa: E731
    dy = lambda t: 3 * t ** 2 - 2  # noqa: E731
    mid = hermite_mid(y(g.times), y(g.times), dy(g.times), dy(g.times), g.step)
    np.testing.assert_allclose(mid, y(g.mid_times), atol=1e-14)


def test_stage_eval_layout():
    g = TimeGrid(0.0, 1.0, 0.5, [0.5])
    f = GridFunction(g, np.array([0.0, 1.0, 2.0]), np.array([0.0, -1.0, 2.0]),
                     np.array([10.0, 20.0]))
    out = stage_eval(lambda t, x: x + 100 * t, g, f)
    np.testing.assert_allclose(out.post, [0.0, 51.0, 102.0])
    np.testing.assert_allclose(out.mid, [35.0, 95.0])
    np.testing.assert_allclose(out.pre, [0.0, 49.0, 102.0])


def test_euler_maruyama_determinism_and_zero_noise():
    model, _ = make_double_well()
    g = TimeGrid(0.0, 1.0, 0.01)
    a = euler_maruyama(model, np.zeros(1), g, 42)
    b = euler_maruyama(model, np.zeros(1), g, 42)
    assert np.array_equal(a.states, b.states)
    ou, _ = make_ou(a=2.0)
    quiet = type(ou)(**{**ou.__dict__, "diffusion": lambda t: np.zeros((1, 1))})
    path = euler_maruyama(quiet, np.ones(1), g, 0)
    np.testing.assert_allclose(path.states[:, 0], (1 - 2 * 0.01) ** np.arange(g.n_nodes))


def test_euler_maruyama_ou_stationary_variance():
    model, _ = make_ou(1.0, 2.0)
    g = TimeGrid(0.0, 5.0, 0.01)
    paths = euler_maruyama(model, np.zeros((10000, 1)), g, 7)
    v = paths.states[-1, :, 0].var()
    se = np.sqrt(2.0 / 10000)
    assert abs(v - 1.0) < 3 * se + 0.01  # Euler bias q dt / (2a (1 - a dt/2)) ~ 0.005


def test_double_well_paths_are_bimodal():
    model, _ = make_double_well()
    g = TimeGrid(0.0, 10.0, 0.01)
    x = euler_maruyama(model, np.zeros((200, 1)), g, 3).states[200:].ravel()
    hist, edges = np.histogram(x, bins=np.linspace(-2, 2, 21))
    centers = 0.5 * (edges[1:] + edges[:-1])
    assert abs(centers[np.argmax(hist[:10])] + 1) < 0.3
    assert abs(centers[10 + np.argmax(hist[10:])] - 1) < 0.3
    assert hist[9:11].sum() < hist[3:7].sum()


def test_sample_measurements():
    model, meas = make_ou(r=1e-30)
    g = TimeGrid(0.0, 1.0, 0.01)
    path = euler_maruyama(model, np.zeros(1), g, 0)
    rec = sample_measurements(path, meas, [0.5, 1.0], 1)
    np.testing.assert_allclose(rec[0].value, path.at([0.5])[0], atol=1e-12)
    with pytest.raises(ConfigurationError):
        sample_measurements(path, meas, [0.505], 1)
    model, meas = make_ou(r=0.7)
    path.states[:] = 0.0
    many = np.concatenate([sample_measurements(path, meas, [0.5], s)[0].value
                           for s in range(10000)])
    assert abs(many.var() - 0.7) < 3 * 0.7 * np.sqrt(2 / 10000)


def test_reentry_bearing_wrapped():
    model, meas = make_reentry()
    g = TimeGrid(0.0, 2.0, 0.01)
    path = euler_maruyama(model, reentry_prior(False).mean, g, 0)
    rec = sample_measurements(path, meas, [1.0, 2.0], 1)
    for r in rec:
        assert -np.pi < r.value[1] <= np.pi

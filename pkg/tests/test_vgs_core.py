import numpy as np
import pytest

from cdsmooth.cd_smoother import run_gfgs
from cdsmooth.errors import ConfigurationError
from cdsmooth.models import (GaussianState, MeasurementRecord, SdeModel, make_double_well,
                             make_ou, make_reentry)
from cdsmooth.odeint import GridFunction, TimeGrid, euler_maruyama, measurement_times, sample_measurements
from cdsmooth.vgs_core import (LagrangeState, VariationalParams, VgsConfig, _setup, backward_pass,
                               compute_ab, forward_pass, gaussian_kl, kl_objective, naive_init,
                               run_vgs)
from cdsmooth.vgs_expect import make_engine


def _const_params(grid, A, b):
    return VariationalParams(GridFunction.constant(grid, np.atleast_2d(A)),
                             GridFunction.constant(grid, np.atleast_1d(b)))


def test_forward_pass_constant_coefficients():
    model, _ = make_ou(a=1.0, q=2.0)
    grid = TimeGrid(0.0, 3.0, 0.01)
    a, c, m0, P0 = 1.5, 0.6, 2.0, 0.1
    m, P = forward_pass(model, _const_params(grid, [[a]], [c]), GaussianState([m0], [[P0]]), grid)
    t = grid.times
    np.testing.assert_allclose(m.post[:, 0], c / a + (m0 - c / a) * np.exp(-a * t), atol=1e-9)
    np.testing.assert_allclose(P.post[:, 0, 0], 1 / a + (P0 - 1 / a) * np.exp(-2 * a * t),
                               atol=1e-9)
    # Hermite midpoints are fourth-order accurate
    tm = grid.mid_times
    np.testing.assert_allclose(m.mid[:, 0], c / a + (m0 - c / a) * np.exp(-a * tm), atol=1e-8)


def test_singular_model_deterministic_rows():
    model, _ = make_reentry()
    grid = TimeGrid(0.0, 1.0, 0.1)
    s = _setup(model, grid)
    A = GridFunction.constant(grid, np.zeros((3, 5)))
    At = s.full_A(A)
    F1 = model.singular_partition.F1(0.0)
    for arr in (At.post, At.pre, At.mid):
        np.testing.assert_array_equal(arr[:, :2, :], np.broadcast_to(-F1, arr[:, :2, :].shape))
    b = s.full_b(GridFunction.constant(grid, np.ones(3)))
    assert np.all(b.post[:, :2] == 0.0) and np.all(b.post[:, 2:] == 1.0)


def test_backward_pass_without_measurements_is_zero():
    model, meas = make_ou(a=1.0)
    grid = TimeGrid(0.0, 2.0, 0.01)
    params = _const_params(grid, [[1.0]], [0.0])  # A = -F: e vanishes
    m, P = forward_pass(model, params, GaussianState([1.0], [[0.5]]), grid)
    lag = backward_pass(model, "ext", params, m, P, [], meas, grid)
    assert np.all(lag.lam.post == 0.0) and np.all(lag.psi.post == 0.0)


def test_backward_pass_single_jump():
    model, meas = make_ou(a=1.0, r=1.0)
    grid = TimeGrid(0.0, 1.0, 0.01, [1.0])
    params = _const_params(grid, [[1.0]], [0.0])
    m, P = forward_pass(model, params, GaussianState([np.e], [[0.5]]), grid)
    y = m.post[-1, 0] - 1.0  # m - y = 1
    lag = backward_pass(model, "ext", params, m, P, [MeasurementRecord(1.0, np.array([y]))],
                        meas, grid)
    assert lag.lam.post[-1, 0] == 0.0 and lag.psi.post[-1, 0, 0] == 0.0
    assert lag.lam.pre[-1, 0] == pytest.approx(1.0)
    assert lag.psi.pre[-1, 0, 0] == pytest.approx(0.5)
    # with e = 0 the adjoint decays as lambda' = A lambda backward in time
    lam = np.append(lag.lam.post[:-1, 0], lag.lam.pre[-1, 0])
    np.testing.assert_allclose(lam, np.exp(grid.times - 1.0), atol=1e-9)


def test_compute_ab_double_well():
    model, _ = make_double_well()
    grid = TimeGrid(0.0, 0.1, 0.01)
    m = GridFunction.constant(grid, np.zeros(1))
    P = GridFunction.constant(grid, np.eye(1))
    zero = LagrangeState(GridFunction.constant(grid, np.zeros(1)),
                         GridFunction.constant(grid, np.zeros((1, 1))))
    p = compute_ab(model, make_engine("gh", model, order=5), m, P, zero)
    np.testing.assert_allclose(p.A.values, 8.0, atol=1e-10)
    np.testing.assert_allclose(p.b.values, 0.0, atol=1e-10)
    lag = LagrangeState(GridFunction.constant(grid, np.array([0.5])),
                        GridFunction.constant(grid, np.array([[0.25]])))
    p = compute_ab(model, "analytic", m, P, lag)
    np.testing.assert_allclose(p.A.values, 8.0 + 2 * 0.25, atol=1e-10)
    np.testing.assert_allclose(p.b.values, -0.5, atol=1e-10)


def test_kl_objective_constant_energy():
    c = np.array([1.0, 2.0])
    model = SdeModel(state_dim=2, drift=lambda x, t=0.0: np.broadcast_to(c, np.shape(x)),
                     drift_jacobian=lambda x, t=0.0: np.zeros(np.shape(x) + (2,)),
                     dispersion=lambda t: np.eye(2), diffusion=lambda t: np.eye(2))
    grid = TimeGrid(0.0, 2.5, 0.05)
    params = _const_params(grid, np.zeros((2, 2)), np.zeros(2))
    m, P = forward_pass(model, params, GaussianState([0.0, 0.0], np.eye(2)), grid)
    kl = kl_objective(model, "ct", params, m, P, [], None)
    assert kl == pytest.approx(0.5 * c @ c * 2.5, rel=1e-12)


def test_kl_objective_double_well():
    model, meas = make_double_well(sigma=1.0, meas_var=1.0)
    grid = TimeGrid(0.0, 1.0, 0.01, [1.0])
    params = _const_params(grid, [[0.0]], [0.0])
    m = GridFunction.constant(grid, np.zeros(1))
    P = GridFunction.constant(grid, np.eye(1))
    assert kl_objective(model, "analytic", params, m, P, [], meas) == pytest.approx(80.0)
    rec = [MeasurementRecord(1.0, np.array([1.0]))]
    # E[u] = ((0 - 1)^2 + 1) / 2 = 1
    assert kl_objective(model, "analytic", params, m, P, rec, meas) == pytest.approx(81.0)


def test_gaussian_kl():
    assert gaussian_kl(np.zeros(2), np.eye(2), np.zeros(2), np.eye(2)) == pytest.approx(0.0)
    kl = gaussian_kl(np.array([1.0]), np.array([[2.0]]), np.array([0.0]), np.array([[1.0]]))
    assert kl == pytest.approx(0.5 * (2.0 + 1.0 - 1.0 - np.log(2.0)))


def test_run_vgs_ou_matches_rts(ou):
    _, _, _, _, ms, Ps = ou.exact()
    _, _, init = run_gfgs(ou.model, ou.meas, ou.records, ou.grid, ou.prior, "ext")
    res = run_vgs(ou.model, ou.meas, ou.records, ou.grid, ou.prior, init, VgsConfig(engine="ext"))
    assert res.converged
    assert res.iterations <= 1
    np.testing.assert_allclose(res.m.post[:, 0], ms, atol=1e-4)
    np.testing.assert_allclose(res.P.post[:, 0, 0], Ps, atol=1e-4)


def test_run_vgs_ou_from_naive_init(ou):
    # without a smoother initialization the initial moments must be optimized too
    _, _, _, _, ms, Ps = ou.exact()
    init = naive_init(ou.model, ou.prior, ou.grid, "ext", ou.meas)
    cfg = VgsConfig(engine="ext", kl_tol=1e-8, optimize_initial=True)
    res = run_vgs(ou.model, ou.meas, ou.records, ou.grid, ou.prior, init, cfg)
    assert res.converged
    assert np.all(np.diff(res.kl_history) < 0)
    np.testing.assert_allclose(res.m.post[:, 0], ms, atol=1e-3)
    np.testing.assert_allclose(res.P.post[:, 0, 0], Ps, atol=1e-3)


@pytest.fixture(scope="module")
def double_well_run():
    model, meas = make_double_well(sigma=1.0, meas_var=0.1)
    times = measurement_times(0.0, 10.0, 1.0)
    path = euler_maruyama(model, np.zeros(1), TimeGrid(0.0, 10.0, 0.01), 11)
    rec = sample_measurements(path, meas, times, 12)
    grid = TimeGrid(0.0, 10.0, 0.01, times)
    prior = GaussianState([0.0], [[1.0]])
    _, _, init = run_gfgs(model, meas, rec, grid, prior, "analytic")
    res = run_vgs(model, meas, rec, grid, prior, init, VgsConfig(engine="analytic"))
    return model, meas, rec, grid, prior, res


def test_double_well_kl_is_monotone(double_well_run):
    res = double_well_run[-1]
    assert res.converged
    assert len(res.kl_history) == res.iterations + 1 or res.non_improving
    assert np.all(np.diff(res.kl_history) < 0)


def test_double_well_fixed_point(double_well_run):
    model, meas, rec, grid, prior, res = double_well_run
    # a converged run is nearly stationary: one more update barely moves A
    target = compute_ab(model, "analytic", res.m, res.P, res.lagrange)
    scale = np.max(np.abs(res.params.A.post))
    assert np.max(np.abs(target.A.post - res.params.A.post)) < 0.1 * scale
    kl_target = kl_objective(model, "analytic", target, *forward_pass(
        model, VariationalParams(target.A, target.b, res.params.m0, res.params.P0), prior, grid),
        rec, meas)
    assert abs(kl_target - res.kl_history[-1]) < 1.0


def test_run_vgs_zero_iterations(double_well_run):
    model, meas, rec, grid, prior, res = double_well_run
    out = run_vgs(model, meas, rec, grid, prior, res.params, VgsConfig(engine="analytic",
                                                                       max_iters=0))
    assert out.iterations == 0 and len(out.kl_history) == 1


def test_vgs_config_validation():
    with pytest.raises(ConfigurationError):
        VgsConfig(kl_tol=0.0)
    with pytest.raises(ConfigurationError):
        VgsConfig(shrink=1.0)
    with pytest.raises(ConfigurationError):
        VgsConfig(max_iters=-1)

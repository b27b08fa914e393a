from dataclasses import replace

import numpy as np
import pytest

from glevy.models import (canonical, example51, example51_set, from_expressions, linear_test,
                          r_for_l, zero)
from glevy.noise import Tilt, TimeGrid, sample_noise
from glevy.sde import (Coefficients, ConvergenceError, DivergenceError, NonLipschitzModuli,
                       euler_solve, moduli_ode_check, osgood_modulus, picard_solve, simulate)
from glevy.uncertainty import ControlPath, JumpMeasure, extreme_controls

from conftest import make_set


def _decay():
    return from_expressions(b="-2*y", zero_at_zero=True)


def test_euler_linear_ode():
    U = make_set(vols=(0.0,))
    grid = TimeGrid(0.0, 1.0, 10_000)
    path = euler_solve(_decay(), ControlPath.constant((0, 0, 0), 0.0, 1.0),
                       sample_noise(grid, U.base, 0), 1.0, U)
    assert abs(path.terminal[0] - np.exp(-2.0)) <= 1e-3


def test_euler_zero_coefficients_constant():
    U = example51_set()
    grid = TimeGrid(0.0, 2.0, 100)
    noise = sample_noise(grid, U.base, 1)
    path = euler_solve(zero(), ControlPath.constant((0, 0, 1), 0.0, 2.0), noise, 1.7, U)
    assert np.all(path.y == 1.7)


def test_euler_gbm_log_closed_form():
    U = make_set(vols=(1.0,))
    grid = TimeGrid(0.0, 1.0, 1000)
    coeffs = from_expressions(sigma="y", zero_at_zero=True)
    theta = ControlPath.constant((0, 0, 0), 0.0, 1.0)
    # batch engine (checked against euler_solve path by path below)
    res = simulate(coeffs, U, [theta], grid, 1000, 5, 1.0)
    bt = np.array([sample_noise(grid, U.base, 5, i).dw.sum() for i in range(1000)])
    errs = np.log(res.terminal[0, :, 0]) - (bt - 0.5)
    errs = np.asarray(errs)
    # the mean error is O(dt); pathwise errors are O(sqrt(dt))
    assert abs(errs.mean()) <= 2 * grid.dt + 3 * errs.std() / np.sqrt(errs.size)
    assert np.mean(np.abs(errs)) <= np.sqrt(grid.dt)


def test_jump_machinery_inert_when_unused():
    U_jump = make_set([JumpMeasure.dirac([1.0])], vols=(0.8,))
    U_none = make_set(vols=(0.8,))
    grid = TimeGrid(0.0, 1.0, 200)
    coeffs = linear_test(-1.0, 1.0)
    theta = ControlPath.constant((0, 0, 0), 0.0, 1.0)
    noise = sample_noise(grid, U_jump.base, 2)
    jump_free = replace(noise, jump_times=np.zeros(0), jump_marks=np.zeros(0, dtype=np.int64),
                        jump_normals=np.zeros((0, 1)))
    stripped = sample_noise(grid, U_none.base, 2)
    a = euler_solve(coeffs, theta, jump_free, 1.0, U_jump)
    b = euler_solve(coeffs, theta, stripped, 1.0, U_none)
    assert np.array_equal(a.times, b.times)
    assert np.array_equal(a.y, b.y)


def test_euler_divergence_names_step():
    U = make_set(vols=(0.0,))
    grid = TimeGrid(0.0, 1.0, 100)
    blow = from_expressions(b="y*y*y*1e6")
    with pytest.raises(DivergenceError):
        euler_solve(blow, ControlPath.constant((0, 0, 0), 0.0, 1.0), sample_noise(grid, U.base, 0),
                    10.0, U)


def test_picard_taylor_bound():
    U = make_set(vols=(0.0,))
    T = 1.0
    grid = TimeGrid(0.0, T, 1000)
    path, log = picard_solve(_decay(), ControlPath.constant((0, 0, 0), 0.0, T),
                             sample_noise(grid, U.base, 0), 1.0, U, tol=1e-12)
    fact = 1.0
    for n, diff in enumerate(log, start=1):
        fact *= n
        assert diff <= (2 * T) ** n / fact + 1e-12


def test_picard_zero_coefficients_one_iteration():
    U = example51_set()
    grid = TimeGrid(0.0, 1.0, 50)
    path, log = picard_solve(zero(), ControlPath.constant((1, 0, 0), 0.0, 1.0),
                             sample_noise(grid, U.base, 0), 2.0, U)
    assert log == [0.0]
    assert np.all(path.y == 2.0)


def test_picard_matches_euler_example51():
    U = example51_set()
    grid = TimeGrid(0.0, 1.0, 1000)
    coeffs = example51(r_for_l(1.0))
    theta = ControlPath([0.0, 0.5, 1.0], [(0, 0, 1), (1, 0, 0)])
    noise = sample_noise(grid, U.base, 9)
    p, log = picard_solve(coeffs, theta, noise, 1.0, U, tol=1e-8)
    e = euler_solve(coeffs, theta, noise, 1.0, U)
    assert np.array_equal(p.times, e.times)
    assert np.max(np.abs(p.y - e.y)) <= 5e-2
    assert len(log) <= 25


def test_picard_raises_with_log():
    U = make_set(vols=(0.0,))
    grid = TimeGrid(0.0, 1.0, 100)
    with pytest.raises(ConvergenceError) as err:
        picard_solve(_decay(), ControlPath.constant((0, 0, 0), 0.0, 1.0),
                     sample_noise(grid, U.base, 0), 1.0, U, tol=1e-14, max_iter=3)
    assert len(err.value.log) == 3


def test_batch_engine_matches_single_path_solver():
    U = example51_set()
    grid = TimeGrid(0.0, 1.0, 200)
    coeffs = example51(r_for_l(1.0), amended=True)
    controls = extreme_controls(U, grid.nodes)
    res = simulate(coeffs, U, controls, grid, 8, seed=3, y0=1.0, record_times=[0.5, 1.0],
                   track_sup=True)
    for c, theta in enumerate(controls):
        for i in range(8):
            path = euler_solve(coeffs, theta, sample_noise(grid, U.base, 3, i), 1.0, U)
            assert res.values[c, i, -1, 0] == pytest.approx(path.terminal[0], rel=1e-10)
            assert res.values[c, i, 0, 0] == pytest.approx(path.at(0.5)[0], rel=1e-10)
            assert res.sup_sq[c, i] == pytest.approx(np.max(path.y[:, 0] ** 2), rel=1e-10)


def test_simulate_thread_independent():
    U = example51_set()
    grid = TimeGrid(0.0, 0.5, 50)
    coeffs = example51(0.3)
    controls = extreme_controls(U, grid.nodes)
    a = simulate(coeffs, U, controls, grid, 300, 1, 1.0, threads=1, path_block=64)
    b = simulate(coeffs, U, controls, grid, 300, 1, 1.0, threads=4, path_block=64)
    c = simulate(coeffs, U, controls, grid, 300, 1, 1.0, threads=2, path_block=4096)
    assert a.values.tobytes() == b.values.tobytes() == c.values.tobytes()


def test_tilted_simulation_is_unbiased():
    U = make_set([JumpMeasure([[1.0], [-1.0]], [0.5, 0.5])], vols=(1.0,))
    grid = TimeGrid(0.0, 1.0, 20)
    controls = extreme_controls(U, grid.nodes)
    res = simulate(canonical(), U, controls, grid, 40_000, 0, 0.0, tilt=Tilt((1.0,), 1.5))
    w = np.exp(res.log_weight[:, -1])
    x = res.terminal[0, :, 0]
    # E[X_1] = 0 and E[X_1^2] = 1 + 1 under the original measure
    for vals, target in ((x, 0.0), (x * x, 2.0)):
        est = w * vals
        assert abs(est.mean() - target) <= 4 * est.std() / np.sqrt(est.size)


def test_coefficients_zero_at_zero_check():
    assert example51(0.4).check_zero_at_zero([0.0, 1.0, 2.0], [[1.0], [-1.0]])
    shifted = from_expressions(b="1 + y")
    assert not shifted.check_zero_at_zero([0.0], [[1.0]])
    assert isinstance(canonical(), Coefficients)


def test_moduli_lipschitz_case():
    rep = moduli_ode_check(lambda t, u: u, 1.0, 1.0, 1.0)
    assert rep.global_solution
    assert rep.final == pytest.approx(np.e, abs=1e-6)


def test_moduli_blowup():
    rep = moduli_ode_check(lambda t, u: u * u, 1.0, 1.0, 2.0)
    assert not rep.global_solution
    assert rep.blowup_time < 1.1
    assert rep.blowup_time == pytest.approx(1.0, abs=1e-3)


def test_moduli_osgood_global():
    H = osgood_modulus()
    rep = moduli_ode_check(H, 1.0, 0.5, 10.0)
    assert rep.global_solution
    # on the linear continuation u' = top + slope (u - delta) the solution stays finite
    assert np.isfinite(rep.final)
    assert NonLipschitzModuli(H, H).check([0.0, 1.0], np.linspace(0, 5, 51))["ok"]


def test_moduli_check_detects_decreasing():
    m = NonLipschitzModuli(lambda t, u: -u, lambda t, u: 1.0 + u)
    rep = m.check([0.0], [0.0, 1.0])
    assert not rep["H_monotone"] and not rep["F_zero_at_zero"] and not rep["ok"]

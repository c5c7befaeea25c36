# tests/test_variational.py
import math

import numpy as np
import pytest

from occupation_lab.errors import InfeasibleLevelError, LatticeError, ThetaModelError
from occupation_lab.variational import (
    GridFunction, SolverOptions, ThetaModel, build_quasi_minimizer, discrete_energy, eigen_oracle, harmonic_profile,
    rate_function_curve, solve_constrained,
)

G00 = 1.516386059151978
COARSE = dict(shape="ball", r_D=1.0, r=4.0, h=0.5)
TIGHT = SolverOptions(constraint_tol=1e-10, energy_rtol=1e-9, gtol=1e-12)


def test_grid_radius_must_be_whole_steps():
    with pytest.raises(LatticeError):
        GridFunction(3, 0.3, 1.0, np.zeros((7, 7, 7)))


def test_grid_function_save_and_load(tmp_path):
    phi = GridFunction.from_function(lambda x: 1.0 - np.sqrt((x ** 2).sum(axis=1)) / 2.0, 3, 0.5, 2.0,
                                     meta={"kind": "cone"})
    loaded = GridFunction.load(phi.save(tmp_path / "cone.npz"))
    np.testing.assert_array_equal(loaded.values, phi.values)
    assert loaded.meta == {"kind": "cone"}
    assert loaded.evaluate([[0.0, 0.0, 0.0]])[0] == pytest.approx(1.0)
    assert loaded.evaluate([[5.0, 0.0, 0.0]])[0] == 0.0


def test_theta_models():
    linear = ThetaModel.linear(2.0)
    assert linear.inverse(1.0) == 0.5
    assert linear.theta_infinity == math.inf
    f2 = ThetaModel.closed_form_f2(G00)
    assert f2.inverse(0.5) == pytest.approx(G00 * math.log(2))
    assert float(f2(f2.inverse(0.3))) == pytest.approx(0.3)
    with pytest.raises(InfeasibleLevelError):
        f2.inverse(1.0)


def test_interpolated_theta():
    model = ThetaModel.interpolated([1.0, 2.0, 4.0], [0.4, 0.6, 0.8])
    assert model.levels[0] == 0.0
    assert float(model(0.0)) == 0.0
    assert float(model(10.0)) == 0.8
    assert float(model.derivative(10.0)) == 0.0
    assert model.inverse(0.6) == pytest.approx(2.0)
    with pytest.raises(ThetaModelError):
        ThetaModel.interpolated([1.0, 2.0], [0.5, 0.4])


def test_harmonic_profile_is_one_on_the_domain():
    profile = harmonic_profile(**COARSE)
    assert profile.evaluate([[0.0, 0.0, 0.0]])[0] == pytest.approx(1.0)
    assert profile.values.min() >= 0.0 and profile.values.max() <= 1.0 + 1e-12


def test_linear_solve_matches_the_eigen_oracle():
    oracle = eigen_oracle(**COARSE)
    solution = solve_constrained(ThetaModel.linear(), 0.5, opts=TIGHT, **COARSE)
    assert solution.constraint == pytest.approx(0.5, rel=1e-9)
    assert solution.energy == pytest.approx(oracle.predicted_energy(0.5), rel=1e-5)
    assert solution.phi.minimum_inside() >= 0.0
    assert solution.summary()["theta"] == "linear"


def test_levels_outside_the_range_are_infeasible():
    theta = ThetaModel.closed_form_f2(G00)
    with pytest.raises(InfeasibleLevelError):
        solve_constrained(theta, 0.0, **COARSE)
    with pytest.raises(InfeasibleLevelError):
        solve_constrained(theta, 0.9999, **COARSE)


def test_rate_function_increases():
    theta = ThetaModel.closed_form_f2(G00)
    curve = rate_function_curve(theta, [0.2, 0.1], **COARSE)
    assert [s.nu for s in curve] == [0.1, 0.2]
    assert curve[0].energy < curve[1].energy


def test_linear_rate_is_homogeneous():
    half = solve_constrained(ThetaModel.linear(), 0.25, opts=TIGHT, **COARSE)
    full = solve_constrained(ThetaModel.linear(), 0.5, opts=TIGHT, **COARSE)
    assert full.energy == pytest.approx(2 * half.energy, rel=1e-4)


def test_rate_does_not_increase_with_the_ball_radius():
    theta = ThetaModel.closed_form_f2(G00)
    energies = [solve_constrained(theta, 0.2, "ball", 1.0, r, 0.5, opts=TIGHT).energy for r in (3.0, 4.0, 5.0)]
    assert energies[1] <= energies[0] * (1 + 1e-6)
    assert energies[2] <= energies[1] * (1 + 1e-6)


def test_quasi_minimizer():
    theta = ThetaModel.closed_form_f2(G00)
    solution = solve_constrained(theta, 0.2, **COARSE)
    with pytest.raises(ValueError):
        build_quasi_minimizer(solution, 0.6, theta)
    report = build_quasi_minimizer(solution, 0.25, theta)
    assert report.positive
    assert report.in_window == (not report.degraded)
    assert report.window == pytest.approx((0.25, 0.3))
    assert report.phi.meta["kind"] == "quasi-minimizer"
    assert "phi" not in report.as_dict()


def test_discrete_energy_on_matching_lattice():
    # with N h = 1 the lattice points are the grid nodes, so both energies agree
    phi = GridFunction.from_function(lambda x: 1.0 - np.sqrt((x ** 2).sum(axis=1)) / 2.0, 3, 0.5, 2.0)
    result = discrete_energy(phi, 2)
    assert result.relative_gap == pytest.approx(0.0, abs=1e-9)
    assert result.scaled == pytest.approx(phi.energy())
    with pytest.raises(LatticeError):
        discrete_energy(phi, 0)

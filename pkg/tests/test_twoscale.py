import math

import numpy as np
import pytest

from loghom.correctors import compute_corrector_set
from loghom.errors import ConfigError
from loghom.field import (
    CovarianceSpec,
    LatticeGrid,
    exp_field,
    sample_gaussian_field,
    scalar_field,
    truncate_coefficient,
)
from loghom.fluctuations import bump_edge_field
from loghom.pde import (
    divergence_edges,
    edge_coefficients,
    gradient_edges,
    solve_constant_divform_spectral,
    solve_divform,
)
from loghom.twoscale import (
    TwoScaleCase,
    compare_rate_models,
    expansion_error,
    local_average,
    middle_half_mask,
    solve_two_scale_level,
    two_scale_expansion,
)
from loghom.balls import ball_offsets


def unit_setup(n=32):
    grid = LatticeGrid(2, n, float(n))
    a = scalar_field(grid, np.ones(grid.shape))
    aE = edge_coefficients(a)
    cset = compute_corrector_set(a, aE)
    return grid, a, aE, cset


class TestLocalAverage:
    def test_preserves_constants(self):
        grid = LatticeGrid(2, 16, 16.0)
        out = local_average(np.full(grid.shape, 3.3), grid)
        assert np.allclose(out, 3.3)

    def test_contractive_in_max_norm(self):
        grid = LatticeGrid(2, 32, 32.0)
        v = np.random.default_rng(0).standard_normal(grid.shape)
        out = local_average(v, grid)
        assert np.abs(out).max() <= np.abs(v).max() + 1e-12

    def test_linear(self):
        grid = LatticeGrid(2, 16, 16.0)
        gen = np.random.default_rng(1)
        u, v = gen.standard_normal((2, *grid.shape))
        lhs = local_average(2.0 * u - 3.0 * v, grid)
        rhs = 2.0 * local_average(u, grid) - 3.0 * local_average(v, grid)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_fourier_mode_attenuation(self):
        # a single mode is an eigenfunction of the ball average; the factor
        # is the direct sum of cosines over the ball offsets
        grid = LatticeGrid(2, 32, 32.0)
        k = (2, 3)
        x = np.meshgrid(*[np.arange(32)] * 2, indexing="ij")
        mode = np.cos(2 * np.pi * (k[0] * x[0] + k[1] * x[1]) / 32)
        offsets = ball_offsets(grid, 1.0)
        factor = np.mean([math.cos(2 * math.pi * (k[0] * d0 + k[1] * d1) / 32)
                          for d0, d1 in offsets])
        out = local_average(mode, grid, 1.0)
        assert np.abs(out - factor * mode).max() < 1e-12

    def test_minimum_radius_enforced(self):
        grid = LatticeGrid(2, 16, 16.0)
        with pytest.raises(ConfigError):
            local_average(np.ones(grid.shape), grid, radius=0.25)


class TestTwoScaleExpansion:
    def test_zero_corrector_reduces_to_average(self):
        grid, a, aE, cset = unit_setup()
        u_bar = scalar_field(grid, np.random.default_rng(2).standard_normal(grid.shape))
        out = two_scale_expansion(u_bar, cset)
        assert np.allclose(out.scalar, local_average(u_bar, grid))

    def test_galilean_shift_invariance(self):
        # adding a constant to u_bar shifts the expansion by the same
        # constant and leaves gradients and errors unchanged
        grid = LatticeGrid(2, 32, 32.0)
        spec = CovarianceSpec("gaussian_kernel", 0.5, 1.0)
        a = truncate_coefficient(exp_field(sample_gaussian_field(grid, spec, 4)), math.e**4)
        aE = edge_coefficients(a)
        cset = compute_corrector_set(a, aE, tol=1e-8)
        u_bar = scalar_field(grid, np.random.default_rng(3).standard_normal(grid.shape))
        shifted = scalar_field(grid, u_bar.scalar + 11.5)
        out1 = two_scale_expansion(u_bar, cset)
        out2 = two_scale_expansion(shifted, cset)
        assert np.allclose(out2.scalar - out1.scalar, 11.5, atol=1e-10)
        g1 = gradient_edges(out1.scalar, grid)
        g2 = gradient_edges(out2.scalar, grid)
        assert np.allclose(g1, g2, atol=1e-10)

    def test_one_dimensional_quadrature_oracle(self):
        # solve the d = 1 problem by cumulative flux integration (quadrature)
        # and compare the pipeline's weighted error against the direct one
        grid = LatticeGrid(1, 256, 256.0)
        spec = CovarianceSpec("gaussian_kernel", 0.5, 2.0)
        a = exp_field(sample_gaussian_field(grid, spec, 9))
        aE = edge_coefficients(a)
        cset = compute_corrector_set(a, aE, tol=1e-12)
        eps = 1.0 / 16.0
        f_edges = bump_edge_field(grid, 16, 0)

        u_eps, _ = solve_divform(aE, h=f_edges, tol=1e-12)
        # independent oracle: a u' = -f + c with c fixed by periodicity
        ae = aE.values[0]
        f = f_edges[0]
        c = np.sum(f / ae) / np.sum(1.0 / ae)
        du = (c - f) / ae
        u_direct = np.concatenate([[0.0], np.cumsum(du)[:-1]])
        u_direct -= u_direct.mean()
        assert np.abs(u_eps.scalar - u_direct).max() < 1e-8

        ahom = cset.ahom_sample
        u_bar = solve_constant_divform_spectral(grid, ahom, f_edges)
        u2s = two_scale_expansion(u_bar, cset)
        err_pipeline = expansion_error(a, aE, u_eps, u2s, eps)
        # direct quadrature of the same error functional
        diff = gradient_edges(u_eps.scalar - u2s.scalar, grid)
        energy = ae * diff[0] ** 2
        cell = 0.5 * (energy + np.roll(energy, 1))
        smooth = local_average(cell, grid)
        mask = middle_half_mask(grid)
        err_direct = math.sqrt(eps * smooth[mask].sum())
        assert err_pipeline == pytest.approx(err_direct, abs=1e-10)


class TestCaseValidation:
    def test_eps_levels_must_be_dyadic(self):
        with pytest.raises(ConfigError):
            TwoScaleCase(0, (0.25, 0.1))

    def test_finest_window_resolution(self):
        with pytest.raises(ConfigError):
            TwoScaleCase(0, (0.5, 0.25), corr_length=1.0)
        TwoScaleCase(0, (0.25, 0.125), corr_length=1.0)


class TestSolveLevel:
    def test_unit_coefficient_small_error_and_energy_identity(self):
        grid, a, aE, cset = unit_setup(64)
        cell = solve_two_scale_level(a, aE, cset, np.eye(2), 0.125, tol=1e-10)
        assert cell["energy_defect"] < 1e-8
        # no corrector error: only quadrature/averaging remains
        assert cell["error"] < 0.2

    def test_window_must_fit_middle_quarter(self):
        grid, a, aE, cset = unit_setup(16)
        with pytest.raises(ConfigError):
            solve_two_scale_level(a, aE, cset, np.eye(2), 1.0 / 8.0)

    def test_unit_coefficient_slope_at_least_one(self):
        # expansion exact up to averaging: residual slope vs eps >= 1
        grid, a, aE, cset = unit_setup(128)
        errors, levels = [], (0.25, 0.125, 0.0625)
        for eps in levels:
            cell = solve_two_scale_level(a, aE, cset, np.eye(2), eps, tol=1e-10)
            errors.append(cell["error"])
        slope = np.polyfit(np.log(levels), np.log(errors), 1)[0]
        assert slope >= 0.95


class TestModelComparison:
    def test_pure_power_data_prefers_power(self):
        eps = np.array([0.25, 0.125, 0.0625])
        errors = 3.0 * eps
        out = compare_rate_models(eps, errors, dim=2)
        assert out["power_slope"] == pytest.approx(1.0, abs=1e-9)
        assert not out["log_corrected_preferred"]

    def test_log_corrected_data_prefers_log(self):
        from loghom.fluctuations import mu_d

        eps = np.array([0.25, 0.125, 0.0625, 0.03125])
        errors = 3.0 * eps * mu_d(1.0 / eps, 2)
        out = compare_rate_models(eps, errors, dim=2)
        assert out["log_corrected_preferred"]
        assert out["log_corrected_slope"] == pytest.approx(1.0, abs=1e-9)
        assert out["log_corrected_r2"] == pytest.approx(1.0, abs=1e-12)

import math

import numpy as np
import pytest

from loghom.correctors import (
    compute_corrector,
    compute_corrector_set,
    compute_flux,
    compute_sigma,
    estimate_ahom,
    reconstruction_residual,
    sigma_divergence,
    sigma_index_pairs,
)
from loghom.errors import ConfigMismatch
from loghom.field import (
    CovarianceSpec,
    LatticeGrid,
    exp_field,
    lognormal_moment,
    sample_gaussian_field,
    scalar_field,
    truncate_coefficient,
)
from loghom.pde import divergence_edges, edge_coefficients, gradient_edges


def lognormal(grid, seed, amp=1.0, ell=2.0, M=math.e**4):
    spec = CovarianceSpec("gaussian_kernel", amp, ell)
    a = exp_field(sample_gaussian_field(grid, spec, seed))
    return truncate_coefficient(a, M) if M else a


class TestCorrector:
    def test_constant_coefficients_need_no_corrector(self):
        grid = LatticeGrid(2, 32, 32.0)
        a = scalar_field(grid, np.full(grid.shape, 2.5))
        phi, report = compute_corrector(edge_coefficients(a), 0)
        assert np.abs(phi.scalar).max() == 0.0
        assert report.iterations == 0

    def test_one_dimensional_closed_form(self):
        # D phi + 1 = (harmonic mean of edges) / a_edge exactly
        grid = LatticeGrid(1, 256, 256.0)
        a = lognormal(grid, 3, amp=0.5, ell=4.0)
        aE = edge_coefficients(a)
        phi, _ = compute_corrector(aE, 0, tol=1e-12)
        du = gradient_edges(phi.scalar, grid)[0]
        harm = 1.0 / np.mean(1.0 / aE.values[0])
        assert np.abs(du + 1.0 - harm / aE.values[0]).max() < 1e-10

    def test_layered_medium_tangential_direction(self):
        # a depending only on x2 with e1 forcing: e1 is already a-harmonic
        grid = LatticeGrid(2, 32, 32.0)
        profile = np.exp(np.sin(2 * np.pi * np.arange(32) / 32))
        a = scalar_field(grid, np.tile(profile[None, :], (32, 1)))
        phi, _ = compute_corrector(edge_coefficients(a), 0, tol=1e-12)
        assert np.abs(phi.scalar).max() < 1e-12

    def test_mean_zero_gradient_exact(self):
        grid = LatticeGrid(2, 32, 32.0)
        aE = edge_coefficients(lognormal(grid, 9))
        phi, _ = compute_corrector(aE, 1)
        du = gradient_edges(phi.scalar, grid)
        assert abs(du[0].mean()) < 1e-13
        assert abs(du[1].mean()) < 1e-13


class TestFlux:
    def test_constant_coefficient_flux(self):
        grid = LatticeGrid(2, 16, 16.0)
        a = scalar_field(grid, np.full(grid.shape, 3.0))
        aE = edge_coefficients(a)
        phi, _ = compute_corrector(aE, 0)
        q = compute_flux(aE, phi, 0)
        assert np.allclose(q[0], 3.0)
        assert np.allclose(q[1], 0.0)

    def test_one_dimensional_constant_flux(self):
        grid = LatticeGrid(1, 128, 128.0)
        a = lognormal(grid, 5, amp=0.5, ell=2.0)
        aE = edge_coefficients(a)
        phi, _ = compute_corrector(aE, 0, tol=1e-12)
        q = compute_flux(aE, phi, 0)
        harm = 1.0 / np.mean(1.0 / aE.values[0])
        assert np.abs(q[0] - harm).max() < 1e-10

    def test_divergence_at_solver_tolerance(self):
        grid = LatticeGrid(2, 64, 64.0)
        a = lognormal(grid, 6)
        aE = edge_coefficients(a)
        phi, report = compute_corrector(aE, 0, tol=1e-10)
        q = compute_flux(aE, phi, 0)
        div = divergence_edges(q, grid)
        b = divergence_edges(aE.values * np.stack([np.ones(grid.shape),
                                                   np.zeros(grid.shape)]), grid)
        # the flux divergence is exactly the CG residual field
        assert np.linalg.norm(div.ravel()) <= 10 * report.relative_residual * np.linalg.norm(b.ravel())


class TestSigma:
    def test_constant_flux_gives_zero_sigma(self):
        grid = LatticeGrid(2, 16, 16.0)
        q = np.stack([np.full(grid.shape, 2.0), np.full(grid.shape, -1.0)])
        sigma = compute_sigma(q, grid)
        assert np.abs(sigma[(0, 1)]).max() < 1e-14

    def test_stream_function_oracle(self):
        # divergence-free q built from backward differences of a stream
        # function inverts the gauge equation exactly: sigma_12 = psi - mean
        grid = LatticeGrid(2, 64, 64.0)
        gen = np.random.default_rng(12)
        psi_hat = np.zeros(grid.shape, complex)
        psi_hat[:8, :8] = gen.standard_normal((8, 8)) + 1j * gen.standard_normal((8, 8))
        psi = np.fft.ifftn(psi_hat).real
        back = lambda f, ax: (f - np.roll(f, 1, axis=ax)) / grid.spacing
        q = np.stack([back(psi, 1), -back(psi, 0)])
        assert np.abs(divergence_edges(q, grid)).max() < 1e-15
        sigma = compute_sigma(q, grid)
        assert np.abs(sigma[(0, 1)] - (psi - psi.mean())).max() < 1e-8 * np.abs(psi).max()

    def test_skew_symmetry_exact(self):
        grid = LatticeGrid(3, 16, 16.0)
        a = lognormal(grid, 7, amp=0.5)
        aE = edge_coefficients(a)
        cset = compute_corrector_set(a, aE, tol=1e-8)
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    sjk = cset.sigma_ijk(i, j, k)
                    skj = cset.sigma_ijk(i, k, j)
                    assert np.array_equal(sjk, -skj)

    def test_sigma_mean_zero(self):
        grid = LatticeGrid(2, 32, 32.0)
        a = lognormal(grid, 8)
        cset = compute_corrector_set(a, edge_coefficients(a), tol=1e-10)
        for arr in cset.sigma.values():
            assert abs(arr.mean()) < 1e-13

    def test_reconstruction_identity(self):
        # q - mean(q) = div sigma to solver precision on lognormal samples
        grid = LatticeGrid(2, 64, 64.0)
        for seed in (0, 1):
            a = lognormal(grid, (21, seed))
            cset = compute_corrector_set(a, edge_coefficients(a), tol=1e-10)
            for i in range(2):
                assert reconstruction_residual(cset, i) < 1e-6

    def test_index_pairs(self):
        assert sigma_index_pairs(1) == []
        assert sigma_index_pairs(2) == [(0, 1)]
        assert sigma_index_pairs(3) == [(0, 1), (0, 2), (1, 2)]


class TestAhom:
    def test_identity_for_unit_coefficient(self):
        grid = LatticeGrid(2, 16, 16.0)
        a = scalar_field(grid, np.ones(grid.shape))
        cset = compute_corrector_set(a, edge_coefficients(a))
        assert np.array_equal(cset.ahom_sample, np.eye(2))

    def test_one_dimensional_harmonic_mean_oracle(self):
        # d = 1: ahom equals the harmonic mean of the edge coefficients,
        # and pooled over replicas matches exp(-C(0)/2)
        grid = LatticeGrid(1, 4096, 4096.0)
        spec = CovarianceSpec("gaussian_kernel", 0.5, 8.0)
        samples = []
        for r in range(60):
            a = exp_field(sample_gaussian_field(grid, spec, (41, r)))
            aE = edge_coefficients(a)
            cset = compute_corrector_set(a, aE, tol=1e-10)
            harm = 1.0 / np.mean(1.0 / aE.values[0])
            assert cset.ahom_sample[0, 0] == pytest.approx(harm, rel=1e-8)
            samples.append(cset.ahom_sample[0, 0])
        target = math.exp(-0.25)
        se = np.std(samples, ddof=1) / math.sqrt(len(samples))
        assert abs(np.mean(samples) - target) < 3 * se

    def test_estimate_pooling_and_mismatch(self):
        grid = LatticeGrid(2, 32, 32.0)
        sets = []
        for r in range(4):
            a = lognormal(grid, (3, r), amp=0.5)
            a.meta["config_hash"] = "abc"
            sets.append(compute_corrector_set(a, edge_coefficients(a), tol=1e-8))
        mean, stderr = estimate_ahom(sets)
        assert mean.shape == (2, 2) and np.all(stderr >= 0)
        sets[0].meta["config_hash"] = "zzz"
        with pytest.raises(ConfigMismatch):
            estimate_ahom(sets)
        with pytest.raises(ConfigMismatch):
            estimate_ahom(sets[:1])

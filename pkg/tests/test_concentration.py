"""Tests for the change-of-measure and exponential-moment oracles.

Frozen reference values, derived independently of the implementation:

* canonical kernel entry (0, 0) against the flat density: the centered pair
  function is -sqrt(eta) * 0.5 * cos(2 pi (z - v)), so its sup-norm is
  0.5 sqrt(eta); the largest dyadic eta with 0.5 sqrt(eta) < 1/(2e) - 1e-6
  is 1/8 (sqrt(1/8) * 0.5 = 0.17678 < 0.18394 <= sqrt(1/4) * 0.5 = 0.25).
* canonical drift component against the flat density: the entry is
  -pi sin(2 pi z) with zero mean, sup-norm pi, and the dyadic search gives
  eta = 2^-9 (pi sqrt(2^-9) = 0.13884 < 0.18394 <= pi sqrt(2^-8) = 0.19635).
* density 1 + 0.6 cos(2 pi v): the convolved entry is 1 + 0.15 cos(2 pi z)
  (Fourier mode pairing halves the amplitude product: 0.5 * 0.3), the
  sup-norm base is max(1.15 - 0.5, 1.5 - 0.85) = 0.65, and the dyadic
  search gives eta = 2^-4 (0.65 sqrt(2^-4) = 0.1625 < 0.18394 <=
  0.65 sqrt(2^-3) = 0.22981).
* Gaussian limit of the exponential moment for the canonical pair function:
  X tends to N(0, s) with s = sup^2 / 2, so E exp(X^2) tends to
  1 / sqrt(1 - 2 s) = 1 / sqrt(1 - 0.17678^2) = 1.01600129.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chaoslab.concentration import (
    COM_TOL,
    PSI_SUP_LIMIT,
    DiscreteSpace,
    _GridSampler,
    build_psi,
    change_of_measure_check,
    exp_moment_check,
    random_instance,
    tensor_power,
)
from chaoslab.fields import DensityField, PeriodicGrid
from chaoslab.kernels import KernelMode, KernelSpec, build_kernel, canonical_kernel, constant_kernel

CANONICAL_ETA = 0.125
CANONICAL_SUP = 0.5 * math.sqrt(0.125)
DRIFT_ETA = 2.0**-9
MIXED_ETA = 0.0625
GAUSSIAN_LIMIT = 1.0 / math.sqrt(1.0 - CANONICAL_SUP**2)


def flat_density(n=128):
    return DensityField(PeriodicGrid(1, n), np.ones(n))


def two_dim_kernel():
    amp = np.array([[0.3, 0.1], [0.1, 0.2]])
    return build_kernel(
        KernelSpec(dimension=2, base_level=1.0, modes=(KernelMode((1, 0), amp),))
    )


class TestTensorPower:
    def test_two_copies_is_outer_product(self):
        v = np.array([0.25, 0.75])
        out = tensor_power(v, 2)
        assert np.allclose(out, np.outer(v, v).reshape(-1), atol=1e-16)

    def test_normalization_preserved(self):
        rng = np.random.default_rng(0)
        v = rng.random(5)
        v /= v.sum()
        assert abs(tensor_power(v, 4).sum() - 1.0) < 1e-12

    def test_single_copy_identity(self):
        v = np.array([0.5, 0.5])
        assert np.array_equal(tensor_power(v, 1), v)

    def test_size_guard(self):
        with pytest.raises(ValueError, match="exceeds"):
            tensor_power(np.full(100, 0.01), 4)


class TestDiscreteSpace:
    def test_two_state_entropy_by_hand(self):
        # KL((0.8,0.2)|(0.5,0.5)) = 0.8 ln 1.6 + 0.2 ln 0.4, one copy
        space = DiscreteSpace(
            size=2,
            copies=1,
            joint=np.array([0.8, 0.2]),
            site=np.array([0.5, 0.5]),
            test_function=np.zeros(2),
        )
        expected = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
        assert abs(space.scaled_entropy() - expected) < 1e-14

    def test_product_joint_has_zero_entropy(self):
        site = np.array([0.2, 0.3, 0.5])
        space = DiscreteSpace(
            size=3,
            copies=3,
            joint=tensor_power(site, 3),
            site=site,
            test_function=np.zeros(27),
        )
        assert abs(space.scaled_entropy()) < 1e-14

    def test_entropy_scales_per_coordinate(self):
        # product of identical one-site gaps: H_N equals the one-site KL
        p = np.array([0.9, 0.1])
        q = np.array([0.5, 0.5])
        one = DiscreteSpace(2, 1, p, q, np.zeros(2))
        three = DiscreteSpace(2, 3, tensor_power(p, 3), q, np.zeros(8))
        assert abs(three.scaled_entropy() - one.scaled_entropy()) < 1e-13

    def test_support_violation_rejected(self):
        with pytest.raises(ValueError, match="support"):
            DiscreteSpace(
                size=2,
                copies=2,
                joint=np.array([0.25, 0.25, 0.25, 0.25]),
                site=np.array([1.0, 0.0]),
                test_function=np.zeros(4),
            )

    def test_negative_mass_rejected(self):
        with pytest.raises(ValueError, match="negative"):
            DiscreteSpace(2, 1, np.array([1.2, -0.2]), np.array([0.5, 0.5]), np.zeros(2))

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError, match="sums to"):
            DiscreteSpace(2, 1, np.array([0.5, 0.4]), np.array([0.5, 0.5]), np.zeros(2))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            DiscreteSpace(2, 2, np.full(4, 0.25), np.array([0.5, 0.5]), np.zeros(3))


class TestChangeOfMeasure:
    def test_zero_test_function_is_entropy_nonnegativity(self):
        rng = np.random.default_rng(3)
        joint = rng.random(8) + 0.01
        joint /= joint.sum()
        space = DiscreteSpace(2, 3, joint, np.array([0.4, 0.6]), np.zeros(8))
        audit = change_of_measure_check(space, eta=0.7)
        assert audit.lhs == 0.0
        assert audit.holds
        assert abs(audit.rhs - space.scaled_entropy() / 0.7) < 1e-14
        assert audit.rhs >= 0.0

    def test_product_law_reduces_to_jensen(self):
        rng = np.random.default_rng(4)
        site = rng.random(4) + 0.05
        site /= site.sum()
        joint = tensor_power(site, 3)
        for _ in range(100):
            phi = rng.uniform(-2.0, 2.0, size=64)
            eta = float(2.0 ** rng.uniform(-3, 2))
            space = DiscreteSpace(4, 3, joint, site, phi)
            audit = change_of_measure_check(space, eta)
            assert audit.holds
            assert abs(audit.entropy) < 1e-13

    def test_gibbs_tilt_is_the_equality_case(self):
        # p proportional to q^N e^{N eta Phi} makes the inequality exact,
        # so the check is tight, not just one-sided
        rng = np.random.default_rng(5)
        site = rng.random(3) + 0.1
        site /= site.sum()
        phi = rng.uniform(-1.0, 1.0, size=9)
        eta = 0.8
        reference = tensor_power(site, 2)
        joint = reference * np.exp(2 * eta * phi)
        joint /= joint.sum()
        space = DiscreteSpace(3, 2, joint, site, phi)
        audit = change_of_measure_check(space, eta)
        assert audit.holds
        assert abs(audit.rhs - audit.lhs) < 1e-12

    def test_exhaustive_sweep_has_zero_violations(self):
        rng = np.random.default_rng(2025)
        failures = 0
        for i in range(1000):
            space, eta = random_instance(rng, product_joint=(i % 5 == 0))
            if not change_of_measure_check(space, eta).holds:
                failures += 1
        assert failures == 0

    def test_eta_must_be_positive(self):
        space = DiscreteSpace(2, 1, np.array([0.5, 0.5]), np.array([0.5, 0.5]), np.zeros(2))
        with pytest.raises(ValueError, match="eta"):
            change_of_measure_check(space, 0.0)

    def test_support_violation_detected_at_check_time(self):
        space = DiscreteSpace(2, 1, np.array([0.5, 0.5]), np.array([0.5, 0.5]), np.zeros(2))
        space.site = np.array([1.0, 0.0])  # corrupt after construction
        with pytest.raises(ValueError, match="support"):
            change_of_measure_check(space, 1.0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), product_joint=st.booleans())
    def test_property_never_violated(self, seed, product_joint):
        rng = np.random.default_rng(seed)
        space, eta = random_instance(rng, product_joint=product_joint)
        audit = change_of_measure_check(space, eta)
        assert audit.holds
        assert audit.slack >= 0.0
        assert audit.slack <= audit.rhs - audit.lhs + 2 * COM_TOL


class TestBuildPsi:
    def test_constant_kernel_gives_zero_function(self):
        psi = build_psi(constant_kernel(1, 1.0), flat_density(), (0, 0))
        assert psi.sup_norm == 0.0
        assert psi.eta == 1.0
        assert psi.centering_residual == 0.0
        z = np.linspace(0, 1, 7)
        assert np.all(psi(z, z[::-1]) == 0.0)

    def test_canonical_entry_closed_form(self):
        psi = build_psi(canonical_kernel(), flat_density(), (0, 0))
        assert psi.eta == CANONICAL_ETA
        assert abs(psi.sup_norm - CANONICAL_SUP) < 1e-12
        assert psi.hypothesis_met
        assert psi.centering_residual <= 1e-10
        rng = np.random.default_rng(6)
        z = rng.random(40)
        v = rng.random(40)
        expected = -math.sqrt(CANONICAL_ETA) * 0.5 * np.cos(2 * np.pi * (z - v))
        assert np.abs(psi(z, v) - expected).max() < 1e-12

    def test_canonical_drift_component(self):
        psi = build_psi(canonical_kernel(), flat_density(), 0)
        assert psi.eta == DRIFT_ETA
        assert abs(psi.sup_norm - math.pi * math.sqrt(DRIFT_ETA)) < 1e-9
        rng = np.random.default_rng(7)
        z = rng.random(40)
        v = rng.random(40)
        expected = math.sqrt(DRIFT_ETA) * math.pi * np.sin(2 * np.pi * (z - v))
        assert np.abs(psi(z, v) - expected).max() < 1e-12

    def test_nonuniform_density_convolution(self):
        grid = PeriodicGrid(1, 128)
        vgrid = grid.axis()
        f = DensityField(grid, 1.0 + 0.6 * np.cos(2 * np.pi * vgrid))
        psi = build_psi(canonical_kernel(), f, (0, 0))
        assert psi.eta == MIXED_ETA
        z = np.linspace(0, 1, 33)
        expected_conv = 1.0 + 0.15 * np.cos(2 * np.pi * z)
        assert np.abs(psi.convolution_at(z) - expected_conv).max() < 1e-12
        assert psi.centering_residual <= 1e-10

    def test_centering_for_random_densities(self):
        # independent quadrature of int psi(z, v) f(v) dv at random z
        rng = np.random.default_rng(8)
        grid = PeriodicGrid(1, 256)
        vgrid = grid.axis()
        for _ in range(50):
            e1, e2 = rng.uniform(-0.4, 0.4, size=2)
            vals = 1.0 + e1 * np.cos(2 * np.pi * vgrid) + e2 * np.sin(4 * np.pi * vgrid)
            f = DensityField(grid, vals)
            psi = build_psi(canonical_kernel(), f, (0, 0))
            z = rng.random()
            quad = float(np.sum(psi(z, vgrid) * vals) / grid.n)
            assert abs(quad) <= 1e-10

    def test_eta_cap_respected(self):
        psi = build_psi(canonical_kernel(), flat_density(), (0, 0), eta_max=0.01)
        assert psi.eta == 2.0**-7
        assert psi.eta <= 0.01

    def test_two_dimensional_entries(self):
        kernel = two_dim_kernel()
        grid = PeriodicGrid(2, 32)
        f = DensityField(grid, np.ones((32, 32)))
        off_diag = build_psi(kernel, f, (0, 1))
        drift = build_psi(kernel, f, 1)
        for psi in (off_diag, drift):
            assert psi.hypothesis_met
            assert psi.centering_residual <= 1e-10
            assert psi.sup_norm > 0.0
        # off-diagonal entry is 0.1 cos(2 pi z_0): sup base 0.1, eta capped at 1
        assert off_diag.eta == 1.0
        z = np.array([[0.3, 0.4]])
        v = np.array([[0.1, 0.9]])
        expected = -0.1 * math.cos(2 * math.pi * 0.2)
        assert abs(off_diag(z, v)[0] - expected) < 1e-12

    def test_scaled_control_breaks_hypothesis(self):
        psi = build_psi(canonical_kernel(), flat_density(), (0, 0))
        control = psi.scaled_to(1.2)
        assert abs(control.sup_norm - 1.2) < 1e-12
        assert not control.hypothesis_met
        z, v = np.array([0.2]), np.array([0.5])
        ratio = control(z, v)[0] / psi(z, v)[0]
        assert abs(ratio - 1.2 / psi.sup_norm) < 1e-10

    def test_unnormalized_density_rejected(self):
        grid = PeriodicGrid(1, 64)
        with pytest.raises(ValueError, match="mass"):
            build_psi(canonical_kernel(), DensityField(grid, np.full(64, 1.1)), (0, 0))

    def test_entry_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            build_psi(canonical_kernel(), flat_density(), (0, 1))
        with pytest.raises(ValueError, match="out of range"):
            build_psi(canonical_kernel(), flat_density(), 3)


class TestGridSampler:
    def test_uniform_density_is_identity(self):
        sampler = _GridSampler(flat_density(64))
        u = np.linspace(0.0, 0.999, 101)
        assert np.abs(sampler.sample(u) - u).max() < 1e-12

    def test_cosine_density_first_moment(self):
        grid = PeriodicGrid(1, 128)
        vgrid = grid.axis()
        f = DensityField(grid, 1.0 + 0.8 * np.cos(2 * np.pi * vgrid))
        sampler = _GridSampler(f)
        rng = np.random.default_rng(9)
        draws = sampler.sample(rng.random(200_000))
        est = float(np.cos(2 * np.pi * draws).mean())
        # E cos = 0.4; var cos = 1/2 - 0.16; binning bias is O(1/n^2)
        se = math.sqrt((0.5 - 0.16) / 200_000)
        assert abs(est - 0.4) < 5 * se + 1e-4

    def test_multidimensional_density_rejected(self):
        grid = PeriodicGrid(2, 16)
        with pytest.raises(ValueError, match="one-dimensional"):
            _GridSampler(DensityField(grid, np.ones((16, 16))))


class TestExpMoment:
    def test_zero_function_gives_exactly_one(self):
        psi = build_psi(constant_kernel(1, 1.0), flat_density(), (0, 0))
        report = exp_moment_check(psi, flat_density(), (1, 10, 100), 500)
        for row in report.rows:
            assert row.estimate == 1.0
            assert row.std_error == 0.0
        assert report.no_growth_trend
        assert report.all_at_least_one

    def test_canonical_moments_bounded(self):
        psi = build_psi(canonical_kernel(), flat_density(), (0, 0))
        report = exp_moment_check(psi, flat_density(), (10, 100), 20_000, master_seed=7)
        assert report.hypothesis_met
        assert report.no_growth_trend
        assert report.all_at_least_one
        for row in report.rows:
            assert 1.0 <= row.estimate < 1.05
            assert row.std_error < 1e-3

    def test_gaussian_limit_oracle(self):
        # CLT: X -> N(0, sup^2/2), so E exp(X^2) -> 1/sqrt(1 - sup^2)
        psi = build_psi(canonical_kernel(), flat_density(), (0, 0))
        report = exp_moment_check(psi, flat_density(), (1000,), 30_000, master_seed=11)
        row = report.rows[0]
        assert abs(row.estimate - GAUSSIAN_LIMIT) < 6 * row.std_error + 2e-4

    def test_deterministic_given_seed(self):
        psi = build_psi(canonical_kernel(), flat_density(), (0, 0))
        a = exp_moment_check(psi, flat_density(), (10, 50), 3000, master_seed=3)
        b = exp_moment_check(psi, flat_density(), (10, 50), 3000, master_seed=3)
        assert [r.estimate for r in a.rows] == [r.estimate for r in b.rows]
        assert [r.std_error for r in a.rows] == [r.std_error for r in b.rows]

    def test_negative_control_grows(self):
        # sup-norm forced to 1.2: the Gaussian-limit moment diverges, so
        # finite-N estimates climb; the tool reports without asserting
        psi = build_psi(canonical_kernel(), flat_density(), (0, 0)).scaled_to(1.2)
        report = exp_moment_check(psi, flat_density(), (5, 50), 20_000, master_seed=7)
        assert not report.hypothesis_met
        assert report.rows[1].estimate > 2.0 * report.rows[0].estimate
        assert report.all_at_least_one

    def test_nonuniform_density_sampling_path(self):
        grid = PeriodicGrid(1, 128)
        vgrid = grid.axis()
        f = DensityField(grid, 1.0 + 0.6 * np.cos(2 * np.pi * vgrid))
        psi = build_psi(canonical_kernel(), f, (0, 0))
        report = exp_moment_check(psi, f, (10, 100), 10_000, master_seed=5)
        assert report.no_growth_trend
        assert report.all_at_least_one

    def test_ladder_validation(self):
        psi = build_psi(canonical_kernel(), flat_density(), (0, 0))
        with pytest.raises(ValueError, match="increasing"):
            exp_moment_check(psi, flat_density(), (10, 10), 100)
        with pytest.raises(ValueError, match="positive"):
            exp_moment_check(psi, flat_density(), (0, 10), 100)
        with pytest.raises(ValueError, match="samples"):
            exp_moment_check(psi, flat_density(), (10,), 1)

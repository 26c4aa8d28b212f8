"""Tests for the empirical-law metrics and the N-scaling study machinery.

Frozen oracles
--------------
* Two-level CKP instance: bin masses (1/2, 1/2, 0, 0) against
  (1/4, 3/4, 0, 0). Direct summation gives
  KL = 0.5 ln 2 - 0.5 ln(3/2) = 0.14384103622589042, so the Pinsker bound
  is sqrt(2 KL) = 0.5363600213026516, comfortably above the L1 distance
  0.5. (A frequently quoted value near 0.522 does not reproduce from
  these masses by any direct summation; the digits here are exact.)
* Exact power-law rows c N^{-1/2} must come back with slope -0.5 to
  round-off, and the two-row fit must agree with the closed form
  (log e2 - log e1)/(log n2 - log n1).
* The L1 noise model sd = sqrt((1 - 2/pi) sum q(1-q) / S) is checked
  against a direct multinomial Monte Carlo.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaoslab.fields import CosineProfile, DensityField, PeriodicGrid, uniform_profile
from chaoslab.kernels import canonical_kernel, constant_kernel
from chaoslab.liouville import density_relative_entropy
from chaoslab.metrics import (
    ChaosStudyConfig,
    CkpAudit,
    EmpiricalDensity,
    auto_bins,
    bin_density,
    ckp_audit,
    fit_power_law,
    fit_study_rows,
    histogram,
    l1_distance,
    l1_noise_sd,
    marginal_error_study,
    nh_boundedness_check,
    StudyRow,
)

TWO_LEVEL_KL = 0.14384103622589042  # 0.5 ln 2 - 0.5 ln 1.5, direct summation
TWO_LEVEL_BOUND = 0.5363600213026516  # sqrt(2 * TWO_LEVEL_KL)


def make_row(n, err, sd, included=True, **extra):
    defaults = dict(
        n_particles=n, n_replicas=100, horizon=0.5, eval_time=0.045,
        l1_error=err, std_error=sd, included=included, reason="",
        seed=1, replica_offset=0, config_hash="x",
    )
    defaults.update(extra)
    return StudyRow(**defaults)


class TestEmpiricalDensity:
    def test_valid_construction(self):
        g = EmpiricalDensity(4, 1, np.full(4, 0.25), sample_count=100)
        assert g.bin_volume == 0.25

    def test_too_few_bins(self):
        with pytest.raises(ValueError, match="at least 4"):
            EmpiricalDensity(2, 1, np.full(2, 0.5), sample_count=10)

    def test_mass_must_be_one(self):
        with pytest.raises(ValueError, match="sum to"):
            EmpiricalDensity(4, 1, np.full(4, 0.3), sample_count=10)

    def test_nonnegative(self):
        with pytest.raises(ValueError, match="negative"):
            EmpiricalDensity(4, 1, np.array([0.5, 0.6, -0.1, 0.0]), sample_count=10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            EmpiricalDensity(4, 2, np.full(4, 0.25), sample_count=10)


class TestHistogram:
    def test_uniform_bins_within_binomial_error(self):
        rng = np.random.default_rng(11)
        count = 10**6
        g = histogram(rng.random(count), 32)
        se = np.sqrt((1 / 32) * (31 / 32) / count)
        assert g.sample_count == count
        assert np.abs(g.masses - 1 / 32).max() <= 5 * se

    def test_single_bin(self):
        g = histogram(np.full(50, 0.6), 4)
        assert g.masses[2] == 1.0
        assert g.masses.sum() == 1.0

    def test_shift_by_one_bin_width_rolls_histogram(self):
        rng = np.random.default_rng(3)
        x = rng.random(4000)
        base = histogram(x, 8)
        shifted = histogram(np.mod(x + 1.0 / 8.0, 1.0), 8)
        assert np.array_equal(shifted.masses, np.roll(base.masses, 1))

    def test_two_dimensional_against_direct_count(self):
        rng = np.random.default_rng(5)
        pts = rng.random((500, 2))
        g = histogram(pts, 4)
        direct = np.zeros((4, 4))
        for x, y in pts:
            direct[int(x * 4), int(y * 4)] += 1
        assert np.array_equal(g.masses, direct / 500)

    def test_empty_set_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            histogram(np.empty(0), 4)

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError, match="0, 1"):
            histogram(np.array([0.2, 1.0]), 4)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([4, 5, 8]))
    def test_mass_one_property(self, seed, bins):
        rng = np.random.default_rng(seed)
        g = histogram(rng.random(137), bins)
        assert abs(g.masses.sum() - 1.0) <= 1e-12
        assert g.masses.min() >= 0.0


class TestBinDensity:
    def test_uniform_density_exact(self):
        grid = PeriodicGrid(1, 64)
        g = bin_density(DensityField(grid, np.ones(64)), 8)
        assert np.allclose(g.masses, 0.125, atol=1e-15)
        assert g.sample_count == 0

    @staticmethod
    def trapezoid_weights(n, bins):
        """bins x n quadrature matrix: edge nodes shared between neighbours."""
        block = n // bins
        w = np.zeros((bins, n))
        for b in range(bins):
            w[b, b * block : (b + 1) * block] = 1.0
            w[b, b * block] = 0.5
            w[b, ((b + 1) * block) % n] += 0.5
        return w

    def test_trapezoid_oracle(self):
        rng = np.random.default_rng(8)
        grid = PeriodicGrid(1, 32)
        vals = rng.random(32) + 0.5
        vals /= vals.mean()
        g = bin_density(DensityField(grid, vals), 4)
        oracle = self.trapezoid_weights(32, 4) @ vals / 32
        assert np.abs(g.masses - oracle / oracle.sum()).max() <= 1e-15

    def test_two_dimensional_blocks(self):
        rng = np.random.default_rng(9)
        grid = PeriodicGrid(2, 16)
        vals = rng.random((16, 16)) + 0.5
        vals /= vals.mean()
        g = bin_density(DensityField(grid, vals), 4)
        w = self.trapezoid_weights(16, 4)
        oracle = w @ vals @ w.T / 256
        assert np.abs(g.masses - oracle / oracle.sum()).max() <= 1e-15

    def test_cosine_bins_match_exact_integrals(self):
        # analytic check of the quadrature order: the exact mass of
        # 1 + c*cos(2 pi v) over [l, r] is (r - l) + c*(sin(2 pi r) -
        # sin(2 pi l)) / (2 pi); trapezoid on 32 nodes per bin lands
        # within ~3e-5 while a plain left block sum misses by ~3e-3
        grid = PeriodicGrid(1, 128)
        v = grid.axis()
        vals = 1.0 + 0.8 * np.cos(2 * np.pi * v)
        g = bin_density(DensityField(grid, vals), 4)
        edges = np.arange(5) / 4
        exact = np.diff(edges) + 0.8 * np.diff(np.sin(2 * np.pi * edges)) / (2 * np.pi)
        assert np.abs(g.masses - exact).max() < 5e-5
        left = vals.reshape(4, 32).sum(axis=1) / 128
        assert np.abs(left - exact).max() > 1e-3

    def test_resolution_must_divide(self):
        grid = PeriodicGrid(1, 64)
        with pytest.raises(ValueError, match="divide"):
            bin_density(DensityField(grid, np.ones(64)), 6)

    def test_binning_contracts_l1(self):
        # data processing: pooling cells can only shrink the L1 distance
        rng = np.random.default_rng(10)
        grid = PeriodicGrid(1, 32)
        f = rng.random(32) + 0.2
        g = rng.random(32) + 0.2
        f /= f.mean()
        g /= g.mean()
        fine = l1_distance(DensityField(grid, f), DensityField(grid, g))
        coarse = l1_distance(
            bin_density(DensityField(grid, f), 8), bin_density(DensityField(grid, g), 8)
        )
        assert coarse <= fine + 1e-12


class TestL1Distance:
    def test_identical_is_zero(self):
        g = histogram(np.random.default_rng(0).random(100), 4)
        assert l1_distance(g, g) == 0.0

    def test_disjoint_supports_give_two(self):
        a = EmpiricalDensity(4, 1, np.array([1.0, 0, 0, 0]), sample_count=5)
        b = EmpiricalDensity(4, 1, np.array([0, 0, 1.0, 0]), sample_count=5)
        assert l1_distance(a, b) == 2.0

    def test_direct_summation_oracle(self):
        rng = np.random.default_rng(2)
        grid = PeriodicGrid(1, 16)
        f = rng.random(16) + 0.1
        g = rng.random(16) + 0.1
        dist = l1_distance(DensityField(grid, f), DensityField(grid, g))
        direct = sum(abs(a - b) for a, b in zip(f, g)) / 16
        assert abs(dist - direct) <= 1e-12

    def test_bin_layout_mismatch(self):
        a = EmpiricalDensity(4, 1, np.full(4, 0.25), sample_count=5)
        b = EmpiricalDensity(8, 1, np.full(8, 0.125), sample_count=5)
        with pytest.raises(ValueError, match="layouts differ"):
            l1_distance(a, b)

    def test_grid_mismatch(self):
        f = DensityField(PeriodicGrid(1, 16), np.ones(16))
        g = DensityField(PeriodicGrid(1, 32), np.ones(32))
        with pytest.raises(ValueError, match="different grids"):
            l1_distance(f, g)

    def test_mixed_types_rejected(self):
        f = DensityField(PeriodicGrid(1, 16), np.ones(16))
        g = EmpiricalDensity(4, 1, np.full(4, 0.25), sample_count=5)
        with pytest.raises(ValueError, match="bin_density"):
            l1_distance(f, g)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range_and_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = histogram(rng.random(73), 4)
        b = histogram(rng.random(91), 4)
        d = l1_distance(a, b)
        assert 0.0 <= d <= 2.0
        assert d == l1_distance(b, a)


class TestCkpAudit:
    def test_two_level_frozen_oracle(self):
        a = EmpiricalDensity(4, 1, np.array([0.5, 0.5, 0.0, 0.0]), sample_count=0)
        b = EmpiricalDensity(4, 1, np.array([0.25, 0.75, 0.0, 0.0]), sample_count=0)
        kl = 0.5 * np.log(0.5 / 0.25) + 0.5 * np.log(0.5 / 0.75)
        assert abs(kl - TWO_LEVEL_KL) <= 1e-16
        audit = ckp_audit(a, b, kl)
        assert audit.l1_value == 0.5
        assert abs(audit.bound - TWO_LEVEL_BOUND) <= 1e-15
        assert audit.holds

    def test_identical_inputs_hold_trivially(self):
        g = EmpiricalDensity(4, 1, np.full(4, 0.25), sample_count=0)
        audit = ckp_audit(g, g, 0.0)
        assert audit.l1_value == 0.0 and audit.bound == 0.0 and audit.holds

    def test_negative_entropy_clamped(self):
        g = EmpiricalDensity(4, 1, np.full(4, 0.25), sample_count=0)
        audit = ckp_audit(g, g, -1e-15)
        assert audit.bound == 0.0 and audit.holds

    def test_violation_reported_not_raised(self):
        a = EmpiricalDensity(4, 1, np.array([1.0, 0, 0, 0]), sample_count=0)
        b = EmpiricalDensity(4, 1, np.array([0, 0, 1.0, 0]), sample_count=0)
        audit = ckp_audit(a, b, 0.0)  # deliberately inconsistent entropy
        assert isinstance(audit, CkpAudit)
        assert not audit.holds
        assert audit.slack < 0

    def test_order_two_scales_bound(self):
        g = EmpiricalDensity(4, 1, np.full(4, 0.25), sample_count=0)
        one = ckp_audit(g, g, 0.3, order=1)
        two = ckp_audit(g, g, 0.3, order=2)
        assert abs(two.bound - np.sqrt(2.0) * one.bound) <= 1e-15

    def test_invalid_order(self):
        g = EmpiricalDensity(4, 1, np.full(4, 0.25), sample_count=0)
        with pytest.raises(ValueError, match="order"):
            ckp_audit(g, g, 0.1, order=0)

    def test_thousand_random_density_pairs_no_violation(self):
        # Pinsker holds exactly for discrete laws, so the audit must never
        # flag a pair whose entropy comes from the same grid masses.
        rng = np.random.default_rng(77)
        grid = PeriodicGrid(1, 16)
        violations = 0
        for _ in range(1000):
            f = rng.random(16) + 0.05
            g = rng.random(16) + 0.05
            f /= f.mean()
            g /= g.mean()
            df = DensityField(grid, f)
            dg = DensityField(grid, g)
            h = density_relative_entropy(df, dg)
            if not ckp_audit(df, dg, h).holds:
                violations += 1
        assert violations == 0


class TestPowerLawFit:
    def test_exact_inverse_square_root(self):
        sizes = np.array([8.0, 32.0, 128.0, 512.0])
        errors = 3.7 * sizes**-0.5
        slope, intercept = fit_power_law(sizes, errors)
        assert abs(slope + 0.5) <= 1e-12
        assert abs(intercept - np.log(3.7)) <= 1e-12

    def test_two_point_closed_form(self):
        sizes = np.array([8.0, 512.0])
        errors = np.array([0.11, 0.017])
        slope, intercept = fit_power_law(sizes, errors)
        closed = (np.log(errors[1]) - np.log(errors[0])) / (
            np.log(sizes[1]) - np.log(sizes[0])
        )
        assert abs(slope - closed) <= 1e-12
        assert abs(intercept - (np.log(errors[0]) - closed * np.log(sizes[0]))) <= 1e-12

    def test_needs_two_rows(self):
        with pytest.raises(ValueError, match="two rows"):
            fit_power_law([8.0], [0.1])

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="positive"):
            fit_power_law([8.0, 16.0], [0.1, 0.0])

    def test_rejects_coincident_sizes(self):
        with pytest.raises(ValueError, match="coincide"):
            fit_power_law([8.0, 8.0], [0.1, 0.2])


class TestL1NoiseSd:
    def test_uniform_closed_form(self):
        sd = l1_noise_sd(np.full(4, 0.25), 10000)
        assert abs(sd - np.sqrt((1 - 2 / np.pi) * 0.75 / 10000)) <= 1e-15

    def test_matches_multinomial_monte_carlo(self):
        rng = np.random.default_rng(123)
        q = np.array([0.1, 0.2, 0.3, 0.4])
        count = 4000
        draws = rng.multinomial(count, q, size=3000) / count
        l1s = np.abs(draws - q).sum(axis=1)
        assert abs(l1s.std() - l1_noise_sd(q, count)) <= 0.15 * l1s.std()

    def test_positive_count_required(self):
        with pytest.raises(ValueError, match="positive"):
            l1_noise_sd(np.full(4, 0.25), 0)


class TestAutoBins:
    def test_budget_rules(self):
        # pooled count 16000 -> cube root 25.x, so the largest divisor of
        # 128 at or below 25 is 16
        assert auto_bins(128, 16000) == 16

    def test_grid_cap(self):
        assert auto_bins(8, 10**9) == 4

    def test_no_admissible_bins(self):
        with pytest.raises(ValueError, match="admissible"):
            auto_bins(128, 27)  # cube root 3 < minimum bin count


class TestStudyConfig:
    def base_config(self, **overrides):
        kwargs = dict(
            kernel=canonical_kernel(),
            initial=(CosineProfile(((1, 0.5),)),),
            ladder=(2, 4),
            n_replicas=50,
            t_final=0.05,
            dt=1e-3,
            eval_time=0.05,
            master_seed=9,
            pde_grid_n=32,
            pde_dt=2.5e-4,
            bins=4,
        )
        kwargs.update(overrides)
        return ChaosStudyConfig(**kwargs)

    def test_digest_deterministic_and_sensitive(self):
        a = self.base_config()
        b = self.base_config()
        c = self.base_config(master_seed=10)
        assert a.digest() == b.digest()
        assert a.digest() != c.digest()
        assert len(a.digest()) == 64

    def test_ladder_must_increase(self):
        with pytest.raises(ValueError, match="increasing"):
            self.base_config(ladder=(4, 2))

    def test_eval_time_inside_horizon(self):
        with pytest.raises(ValueError, match="eval_time"):
            self.base_config(eval_time=0.2)

    def test_profile_count_checked(self):
        with pytest.raises(ValueError, match="initial profiles"):
            self.base_config(initial=())


class TestFitStudyRows:
    def test_exact_rows_fit(self):
        rows = [make_row(n, 2.0 * n**-0.5, 1e-4) for n in (8, 32, 128)]
        slope, intercept, se, flags = fit_study_rows(rows)
        assert abs(slope + 0.5) <= 1e-12
        assert flags["fit_available"] and flags["slope_in_band"]
        assert not flags["no_significant_trend"]
        assert se <= 1e-3

    def test_excluded_rows_ignored(self):
        rows = [make_row(n, 2.0 * n**-0.5, 1e-4) for n in (8, 32)]
        rows.append(make_row(128, 0.9, 1e-4, included=False, reason="noise"))
        slope, _, _, _ = fit_study_rows(rows)
        assert abs(slope + 0.5) <= 1e-12

    def test_fewer_than_two_rows_means_no_trend(self):
        rows = [make_row(8, 0.1, 1e-3), make_row(32, 0.05, 1e-3, included=False)]
        slope, intercept, se, flags = fit_study_rows(rows)
        assert slope is None and intercept is None and se is None
        assert not flags["fit_available"]
        assert flags["no_significant_trend"]

    def test_wide_interval_is_not_a_trend(self):
        rows = [make_row(8, 0.10, 0.04), make_row(32, 0.05, 0.02)]
        _, _, se, flags = fit_study_rows(rows)
        assert flags["no_significant_trend"]
        assert se > 0.2


class TestMarginalErrorStudy:
    def small_config(self, **overrides):
        kwargs = dict(
            kernel=canonical_kernel(),
            initial=(CosineProfile(((1, 0.95),)),),
            ladder=(2, 4),
            n_replicas=400,
            t_final=0.05,
            dt=1e-3,
            eval_time=0.05,
            master_seed=2025,
            pde_grid_n=32,
            pde_dt=2.5e-4,
            bins=4,
        )
        kwargs.update(overrides)
        return ChaosStudyConfig(**kwargs)

    def test_report_structure_and_hygiene(self):
        cfg = self.small_config()
        report = marginal_error_study(cfg)
        assert report.bins == 4
        assert len(report.rows) == 2
        assert report.config_hash == cfg.digest()
        for row in report.rows:
            assert row.config_hash == cfg.digest()
            assert row.seed == cfg.master_seed
            assert 0.0 <= row.l1_error <= 2.0
            assert row.std_error > 0.0
            assert row.included or row.reason
        offsets = [row.replica_offset for row in report.rows]
        assert offsets == [0, 400]

    def test_two_particle_rung_beats_noise_floor(self):
        # the N=2 marginal deviates from mean field by about 0.1 in L1 at
        # this horizon, an order of magnitude above the pooled noise sd
        report = marginal_error_study(self.small_config())
        assert report.rows[0].included

    def test_rerun_is_bit_identical(self):
        cfg = self.small_config()
        a = marginal_error_study(cfg)
        b = marginal_error_study(cfg)
        assert [r.l1_error for r in a.rows] == [r.l1_error for r in b.rows]
        assert a.slope == b.slope

    def test_flags_consistent_with_fit(self):
        report = marginal_error_study(self.small_config())
        if report.flags["fit_available"]:
            assert report.slope is not None and report.slope_se is not None
        else:
            assert report.slope is None

    def test_auto_bins_applied(self):
        report = marginal_error_study(self.small_config(bins=None))
        # pooled count 800 -> cube root 9.28, largest divisor of 32 below is 8
        assert report.bins == 8


class TestNhBoundedness:
    def test_exact_exponential_recovered(self):
        times = np.linspace(0.0, 0.5, 11)
        c1, c2 = 0.37, 2.4
        series = {}
        for n in (2, 3):
            vals = (c1 / n) * np.exp(c2 * times)
            vals[0] = 0.0  # product initialization
            series[n] = (times, vals)
        report = nh_boundedness_check(series)
        assert abs(report.c1 - c1) <= 1e-10
        assert abs(report.c2 - c2) <= 1e-10
        assert abs(report.envelope_ratio - 1.0) <= 1e-12
        assert abs(report.max_scaled[2] - c1 * np.exp(c2 * 0.5)) <= 1e-12

    def test_initial_entropy_enforced(self):
        series = {2: (np.array([0.0, 0.1]), np.array([1e-6, 1e-5]))}
        with pytest.raises(ValueError, match="product initialization"):
            nh_boundedness_check(series)

    def test_series_must_start_at_zero(self):
        series = {2: (np.array([0.1, 0.2]), np.array([0.0, 1e-5]))}
        with pytest.raises(ValueError, match="start at t=0"):
            nh_boundedness_check(series)

    def test_non_finite_rejected(self):
        series = {2: (np.array([0.0, 0.1]), np.array([0.0, np.inf]))}
        with pytest.raises(ValueError, match="non-finite"):
            nh_boundedness_check(series)

    def test_all_zero_series_reports_no_fit(self):
        series = {2: (np.array([0.0, 0.1, 0.2]), np.zeros(3))}
        report = nh_boundedness_check(series)
        assert report.c1 is None and report.c2 is None
        assert report.envelope_ratio == 1.0
        assert report.max_scaled[2] == 0.0

    def test_mismatched_shapes_rejected(self):
        series = {2: (np.array([0.0, 0.1]), np.array([0.0]))}
        with pytest.raises(ValueError, match="matching"):
            nh_boundedness_check(series)

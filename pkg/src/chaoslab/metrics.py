"""Distances between particle laws and the mean-field solution.

Two kinds of objects are compared: exact grid densities from the solvers
and binned empirical laws pooled from particle ensembles. The N-scaling
study pools all M * N positions of a rung into one histogram (replicas are
independent and particles exchangeable), measures its L1 distance to the
binned mean-field marginal at a fixed evaluation time, and fits
log(error) against log(N).

A rung whose deviation is indistinguishable from multinomial sampling
noise carries no information about the N-dependence, so each row gets the
standard error of its L1 statistic under the binomial null (first-order:
sd of sum_b |p_hat_b - q_b| with p_hat ~ q) and enters the fit only when
that standard error is below a third of the measured error. Excluded rows
stay in the report with the reason spelled out.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .fields import CosineProfile, DensityField, PeriodicGrid
from .kernels import KernelField
from .particles import EnsembleConfig, run_ensemble
from .pde import MeanFieldSolver

MASS_TOL = 1e-12
CKP_SLACK = 1e-10
MIN_BINS = 4


@dataclass
class EmpiricalDensity:
    """Normalized mass per equal-width periodic bin, B bins per axis.

    sample_count == 0 marks an exactly binned density (no sampling noise),
    anything positive a pooled histogram of that many points.
    """

    bins: int
    dimension: int
    masses: np.ndarray  # (bins,) * dimension
    sample_count: int

    def __post_init__(self):
        self.masses = np.asarray(self.masses, dtype=float)
        if self.bins < MIN_BINS:
            raise ValueError(f"need at least {MIN_BINS} bins per axis, got {self.bins}")
        if self.masses.shape != (self.bins,) * self.dimension:
            raise ValueError(
                f"masses shape {self.masses.shape} does not match "
                f"{(self.bins,) * self.dimension}"
            )
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")
        if self.masses.min() < 0.0:
            raise ValueError(f"negative bin mass {self.masses.min():.3e}")
        total = float(self.masses.sum())
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"bin masses sum to {total!r}, not 1")

    @property
    def bin_volume(self) -> float:
        return (1.0 / self.bins) ** self.dimension


def histogram(samples: np.ndarray, bins: int) -> EmpiricalDensity:
    """Pool samples in [0,1)^d into equal-width periodic bins."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, np.newaxis]
    if samples.ndim != 2:
        raise ValueError("samples must have shape (count, d)")
    count, d = samples.shape
    if count == 0:
        raise ValueError("cannot build a histogram from an empty sample set")
    if samples.min() < 0.0 or samples.max() >= 1.0:
        raise ValueError("samples must lie in [0, 1)")
    # floor(x * B) == B can occur for x just below 1 through round-off
    idx = np.minimum((samples * bins).astype(np.int64), bins - 1)
    flat = np.ravel_multi_index(tuple(idx[:, a] for a in range(d)), (bins,) * d)
    counts = np.bincount(flat, minlength=bins**d).reshape((bins,) * d)
    return EmpiricalDensity(
        bins=bins, dimension=d, masses=counts / count, sample_count=count
    )


def bin_density(density: DensityField, bins: int) -> EmpiricalDensity:
    """Bin masses of a grid density by the periodic trapezoid rule.

    A plain block sum is the left-endpoint rule, whose O(h) bin error is
    large enough to pollute the scaling study's high-N rungs; sharing the
    bin-edge nodes between neighbours brings each bin to O(h^2) while the
    total still telescopes to the exact grid mass.
    """
    n = density.grid.n
    if n % bins != 0:
        raise ValueError(f"bins={bins} must divide the grid resolution {n}")
    block = n // bins
    d = density.grid.dimension
    vals = density.values
    for axis in range(d):
        moved = np.moveaxis(vals, axis, 0)
        edges = moved[::block]
        blocks = moved.reshape((bins, block) + moved.shape[1:]).sum(axis=1)
        blocks = blocks - 0.5 * edges + 0.5 * np.roll(edges, -1, axis=0)
        vals = np.moveaxis(blocks, 0, axis)
    masses = vals * density.grid.cell_volume
    total = float(masses.sum())
    if abs(total - 1.0) > 1e-8:
        raise ValueError(f"density mass {total!r} is not 1; cannot bin")
    masses = np.clip(masses, 0.0, None)
    return EmpiricalDensity(
        bins=bins, dimension=d, masses=masses / masses.sum(), sample_count=0
    )


def l1_distance(g1, g2) -> float:
    """L1 distance between two laws on the torus, always in [0, 2]."""
    if isinstance(g1, EmpiricalDensity) and isinstance(g2, EmpiricalDensity):
        if g1.bins != g2.bins or g1.dimension != g2.dimension:
            raise ValueError(
                f"bin layouts differ: {g1.bins}^{g1.dimension} vs {g2.bins}^{g2.dimension}"
            )
        return float(np.abs(g1.masses - g2.masses).sum())
    if isinstance(g1, DensityField) and isinstance(g2, DensityField):
        if g1.grid != g2.grid:
            raise ValueError("densities live on different grids")
        return float(np.abs(g1.values - g2.values).sum() * g1.grid.cell_volume)
    raise ValueError(
        "l1_distance needs two EmpiricalDensity or two DensityField objects; "
        "bin exact densities with bin_density first"
    )


@dataclass
class CkpAudit:
    """Outcome of one Csiszar-Kullback-Pinsker check."""

    l1_value: float
    entropy: float
    order: int
    bound: float
    slack: float
    holds: bool


def ckp_audit(g1, g2, entropy: float, order: int = 1) -> CkpAudit:
    """Check ||g1 - g2||_1 <= sqrt(2 k H) + slack; never raises on violation."""
    if order < 1:
        raise ValueError("marginal order must be >= 1")
    value = l1_distance(g1, g2)
    bound = float(np.sqrt(2.0 * order * max(entropy, 0.0)))
    slack = bound + CKP_SLACK - value
    return CkpAudit(
        l1_value=value, entropy=float(entropy), order=order,
        bound=bound, slack=slack, holds=slack >= 0.0,
    )


def fit_power_law(sizes, errors):
    """Least-squares slope and intercept of log(error) against log(size)."""
    sizes = np.asarray(sizes, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if sizes.shape != errors.shape or sizes.ndim != 1:
        raise ValueError("sizes and errors must be 1-d arrays of equal length")
    if sizes.size < 2:
        raise ValueError("need at least two rows to fit a power law")
    if sizes.min() <= 0 or errors.min() <= 0:
        raise ValueError("sizes and errors must be positive to take logs")
    x = np.log(sizes)
    y = np.log(errors)
    xbar = x.mean()
    sxx = float(((x - xbar) ** 2).sum())
    if sxx == 0.0:
        raise ValueError("all sizes coincide; slope is undefined")
    slope = float(((x - xbar) * y).sum() / sxx)
    intercept = float(y.mean() - slope * xbar)
    return slope, intercept


def l1_noise_sd(reference_masses: np.ndarray, sample_count: int) -> float:
    """Standard deviation of sum_b |p_hat_b - q_b| under binomial sampling.

    Each bin contributes a half-normal |X_b| with X_b ~ N(0, q_b(1-q_b)/S)
    in the large-S limit, so the variance of the sum is
    (1 - 2/pi) sum_b q_b (1 - q_b) / S. Bin correlations through the
    multinomial constraint are dropped; they shrink the sd slightly.
    """
    q = np.asarray(reference_masses, dtype=float)
    if sample_count <= 0:
        raise ValueError("sample_count must be positive")
    return float(np.sqrt((1.0 - 2.0 / np.pi) * (q * (1.0 - q)).sum() / sample_count))


def auto_bins(pde_grid_n: int, pooled_count: int) -> int:
    """Largest divisor of the PDE resolution obeying the budget rules:
    bin width >= 2 grid spacings and B <= (pooled sample count)^(1/3)."""
    cap = min(pde_grid_n // 2, int(np.floor(pooled_count ** (1.0 / 3.0))))
    best = 0
    for b in range(MIN_BINS, cap + 1):
        if pde_grid_n % b == 0:
            best = b
    if best == 0:
        raise ValueError(
            f"no admissible bin count: need a divisor of {pde_grid_n} in "
            f"[{MIN_BINS}, {cap}]"
        )
    return best


@dataclass(frozen=True)
class ChaosStudyConfig:
    """Inputs of one N-scaling study against the mean-field solution."""

    kernel: KernelField
    initial: tuple  # CosineProfile per axis
    ladder: tuple
    n_replicas: int
    t_final: float
    dt: float
    eval_time: float
    master_seed: int
    pde_grid_n: int = 128
    pde_dt: float = 2e-5
    bins: int | None = None
    snapshot_times: tuple = ()
    drift_coefficient: float = 2.0
    force_mode: str = "spectral"
    replica_offset: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ladder", tuple(int(n) for n in self.ladder))
        object.__setattr__(self, "initial", tuple(self.initial))
        object.__setattr__(self, "snapshot_times", tuple(self.snapshot_times))
        if len(self.ladder) < 1 or any(n < 2 for n in self.ladder):
            raise ValueError("ladder must list particle counts >= 2")
        if list(self.ladder) != sorted(set(self.ladder)):
            raise ValueError("ladder must be strictly increasing")
        if not 0.0 < self.eval_time <= self.t_final:
            raise ValueError("eval_time must lie in (0, t_final]")
        if not all(isinstance(p, CosineProfile) for p in self.initial):
            raise ValueError("study initial data must be CosineProfiles")
        if len(self.initial) != self.kernel.dimension:
            raise ValueError(f"need {self.kernel.dimension} initial profiles")

    def digest(self) -> str:
        spec = self.kernel.spec
        payload = {
            "kernel": {
                "dimension": spec.dimension,
                "base_level": spec.base_level,
                "modes": [
                    [list(m.wavevec), np.asarray(m.amplitude).tolist()]
                    for m in spec.modes
                ],
            },
            "initial": [list(p.modes) for p in self.initial],
            "ladder": list(self.ladder),
            "n_replicas": self.n_replicas,
            "t_final": self.t_final,
            "dt": self.dt,
            "eval_time": self.eval_time,
            "master_seed": self.master_seed,
            "pde_grid_n": self.pde_grid_n,
            "pde_dt": self.pde_dt,
            "bins": self.bins,
            "snapshot_times": list(self.snapshot_times),
            "drift_coefficient": self.drift_coefficient,
            "force_mode": self.force_mode,
            "replica_offset": self.replica_offset,
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class StudyRow:
    """One rung of the ladder with its error budget."""

    n_particles: int
    n_replicas: int
    horizon: float
    eval_time: float
    l1_error: float
    std_error: float
    included: bool
    reason: str
    seed: int
    replica_offset: int
    config_hash: str
    ckp_bound: float | None = None


@dataclass
class ChaosStudyReport:
    """Rows, fit, and flags of one completed study."""

    rows: list
    bins: int
    config_hash: str
    slope: float | None
    intercept: float | None
    slope_se: float | None
    flags: dict = field(default_factory=dict)

    @property
    def included_rows(self) -> list:
        return [r for r in self.rows if r.included]


def fit_study_rows(rows, slope_band=(-1.2, -0.3), no_trend_bound=-0.2):
    """Fit included rows; propagate per-row relative noise into the slope.

    Returns (slope, intercept, slope_se, flags). With fewer than two
    included rows there is no fit and the study cannot demonstrate a trend.
    """
    included = [r for r in rows if r.included]
    if len(included) < 2:
        flags = {
            "fit_available": False,
            "slope_in_band": False,
            "no_significant_trend": True,
        }
        return None, None, None, flags
    sizes = np.array([r.n_particles for r in included], dtype=float)
    errors = np.array([r.l1_error for r in included], dtype=float)
    slope, intercept = fit_power_law(sizes, errors)
    x = np.log(sizes)
    xbar = x.mean()
    sxx = float(((x - xbar) ** 2).sum())
    rel = np.array([r.std_error / r.l1_error for r in included])
    slope_se = float(np.sqrt((((x - xbar) / sxx) ** 2 * rel**2).sum()))
    flags = {
        "fit_available": True,
        "slope_in_band": bool(slope_band[0] <= slope <= slope_band[1]),
        # the two-sided 95% interval reaches past the flatness bound
        "no_significant_trend": bool(slope + 2.0 * slope_se >= no_trend_bound),
    }
    return slope, intercept, slope_se, flags


def marginal_error_study(cfg: ChaosStudyConfig) -> ChaosStudyReport:
    """Pooled 1-marginal error at eval_time for every rung, plus slope fit.

    The mean-field reference is solved once; each rung runs its own replica
    window (rung k uses global replicas [offset + k M, offset + (k+1) M)) so
    no stream is shared between rungs and reruns are bit-reproducible.
    """
    grid = PeriodicGrid(cfg.kernel.dimension, cfg.pde_grid_n)
    f0_values = np.ones(grid.shape)
    for axis, profile in enumerate(cfg.initial):
        shape = [1] * cfg.kernel.dimension
        shape[axis] = cfg.pde_grid_n
        f0_values = f0_values * profile.density(grid.axis()).reshape(shape)
    solver = MeanFieldSolver(cfg.kernel, grid, cfg.pde_dt)
    solution = solver.solve(
        DensityField(grid, f0_values), cfg.eval_time, snapshot_times=(cfg.eval_time,)
    )
    pooled_min = cfg.n_replicas * min(cfg.ladder)
    bins = cfg.bins if cfg.bins is not None else auto_bins(cfg.pde_grid_n, pooled_min)
    reference = bin_density(solution.snapshot(0), bins)

    digest = cfg.digest()
    snapshots = tuple(sorted(set(cfg.snapshot_times) | {cfg.eval_time}))
    eval_index = snapshots.index(cfg.eval_time)
    rows = []
    for rung, n_particles in enumerate(cfg.ladder):
        ensemble = EnsembleConfig(
            kernel=cfg.kernel,
            n_particles=n_particles,
            n_replicas=cfg.n_replicas,
            dt=cfg.dt,
            t_final=cfg.t_final,
            initial=cfg.initial,
            master_seed=cfg.master_seed,
            snapshot_times=snapshots,
            drift_coefficient=cfg.drift_coefficient,
            force_mode=cfg.force_mode,
            replica_offset=cfg.replica_offset + rung * cfg.n_replicas,
        )
        result = run_ensemble(ensemble)
        pooled = result.positions[eval_index].reshape(-1, cfg.kernel.dimension)
        empirical = histogram(pooled, bins)
        err = l1_distance(empirical, reference)
        sd = l1_noise_sd(reference.masses, empirical.sample_count)
        included = sd < err / 3.0
        rows.append(
            StudyRow(
                n_particles=n_particles,
                n_replicas=cfg.n_replicas,
                horizon=cfg.t_final,
                eval_time=cfg.eval_time,
                l1_error=err,
                std_error=sd,
                included=included,
                reason="" if included else "noise floor: 3 * std_error >= error",
                seed=cfg.master_seed,
                replica_offset=ensemble.replica_offset,
                config_hash=digest,
            )
        )
    slope, intercept, slope_se, flags = fit_study_rows(rows)
    return ChaosStudyReport(
        rows=rows, bins=bins, config_hash=digest,
        slope=slope, intercept=intercept, slope_se=slope_se, flags=flags,
    )


@dataclass
class NhBoundednessReport:
    """Scaled-entropy envelopes N H_N(t) and the fitted growth model."""

    max_scaled: dict
    envelope_ratio: float
    c1: float | None
    c2: float | None


def nh_boundedness_check(series: dict, initial_tol: float = 1e-10) -> NhBoundednessReport:
    """Check N H_N(t) stays bounded across N and fit C1 exp(C2 t) to it.

    series maps N to (times, H_N values) from the joint-law solver with
    product initial data. H_N(0) must vanish to tolerance; the fitted
    constants are reported, never asserted against specific magnitudes.
    """
    if len(series) < 1:
        raise ValueError("need at least one entropy series")
    max_scaled = {}
    log_points = []
    for n, (times, values) in sorted(series.items()):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.shape != values.shape or times.ndim != 1:
            raise ValueError(f"series for N={n} must be matching 1-d arrays")
        if times[0] != 0.0:
            raise ValueError(f"series for N={n} must start at t=0")
        if abs(values[0]) > initial_tol:
            raise ValueError(
                f"H_N(0) = {values[0]:.3e} for N={n}; product initialization "
                f"must give relative entropy <= {initial_tol:.0e}"
            )
        scaled = n * values
        if not np.all(np.isfinite(scaled)):
            raise ValueError(f"N H_N contains non-finite values for N={n}")
        max_scaled[n] = float(scaled.max())
        keep = scaled > 1e-14
        log_points.extend(zip(times[keep], np.log(scaled[keep])))
    peaks = [v for v in max_scaled.values() if v > 0.0]
    if peaks:
        envelope_ratio = max(peaks) / min(peaks)
    else:
        envelope_ratio = 1.0
    if len(log_points) >= 2 and len({t for t, _ in log_points}) >= 2:
        t = np.array([p[0] for p in log_points])
        y = np.array([p[1] for p in log_points])
        tbar = t.mean()
        c2 = float(((t - tbar) * y).sum() / ((t - tbar) ** 2).sum())
        c1 = float(np.exp(y.mean() - c2 * tbar))
    else:
        c1 = None
        c2 = None
    return NhBoundednessReport(
        max_scaled=max_scaled, envelope_ratio=float(envelope_ratio), c1=c1, c2=c2
    )

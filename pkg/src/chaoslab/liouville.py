"""Exact joint-law solver for two or three particles in one dimension.

The joint density of the particle system obeys

    dt f_N = sum_i d_i[ A_i(V) d_i f_N - B_i(V) f_N ],
    A_i(V) = (1/N) sum_{j != i} a(v_i - v_j),
    B_i(V) = (1/N) sum_{j != i} div(a)(v_i - v_j).

Note the drift here is (1/N) sum b although the SDE moves each particle with
(2/N) sum b: expanding the generator's second-order term in divergence form,
d_i . A_i = (1/N) sum_j div(a)(v_i - v_j) appears with a plus sign and
cancels exactly half of the transport coefficient. Getting this factor wrong
turns the drift off entirely, which is what the Monte Carlo negative control
in the acceptance suite detects.

The coefficient fields do not depend on time, so they are tabulated once at
half nodes. Each step treats the constant diffusion at the certified upper
level exponentially in Fourier space and the remainder (a conservative
centered-difference flux divergence) through the phi_1 weight; mass is
conserved to round-off because both parts are exact discrete divergences.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

from .fields import DensityField, PeriodicGrid
from .kernels import KernelField
from .pde import convolve
from .util import snapshot_lookup, steps_for

MAX_GRID = {2: 512, 3: 96}
NEGATIVE_TOL = 1e-10


@dataclass
class LiouvilleDensity:
    """Joint density of N particles (d=1) on an n^N grid."""

    n_particles: int
    grid_n: int
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.n_particles not in MAX_GRID:
            raise ValueError(f"joint solves support N in {set(MAX_GRID)}, got {self.n_particles}")
        if self.values.shape != (self.grid_n,) * self.n_particles:
            raise ValueError(f"values shape {self.values.shape} does not match grid")
        if abs(self.mass() - 1.0) > 1e-8:
            raise ValueError(f"joint density mass {self.mass():.10f} is not 1")
        if self.values.min() < -NEGATIVE_TOL:
            raise ValueError(f"joint density dips to {self.values.min():.3e}")

    @property
    def cell_volume(self) -> float:
        return (1.0 / self.grid_n) ** self.n_particles

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def node_masses(self) -> np.ndarray:
        return self.values * self.cell_volume


def product_initial(f: DensityField, n_particles: int) -> LiouvilleDensity:
    """Tensorize a one-dimensional density: i.i.d. particles, zero relative
    entropy against the same density by construction."""
    if f.grid.dimension != 1:
        raise ValueError("product initialization needs a one-dimensional density")
    values = reduce(np.multiply.outer, [f.values] * n_particles)
    return LiouvilleDensity(n_particles, f.grid.n, values, time=0.0)


def _pair_table(kernel: KernelField, n: int, stagger: float, component: str) -> np.ndarray:
    """Table T[p, q] = component of the kernel at (p + stagger)/n - q/n."""
    x = np.arange(n) / n
    diff = (x[:, np.newaxis] + stagger / n) - x[np.newaxis, :]
    if component == "matrix":
        return kernel.matrix(diff)[..., 0, 0]
    if component == "divergence":
        return kernel.divergence(diff)[..., 0]
    return kernel.div_divergence(diff)


def pair_coefficient_field(kernel: KernelField, n_particles: int, grid_n: int,
                           component: str, stagger: float = 0.0) -> list[np.ndarray]:
    """Per-axis coefficient (1/N) sum_{j != i} kernel(v_i + stagger*h - v_j),
    each an n^N array (broadcastable views are expanded on write)."""
    table = _pair_table(kernel, grid_n, stagger, component)
    fields = []
    for i in range(n_particles):
        acc = np.zeros((grid_n,) * n_particles)
        for j in range(n_particles):
            if j == i:
                continue
            view = np.moveaxis(
                table[(...,) + (np.newaxis,) * (n_particles - 2)], (0, 1), (i, j)
            )
            acc += view
        fields.append(acc / n_particles)
    return fields


class LiouvilleSolver:
    """Grid integrator for the N-particle joint law, N in {2, 3}, d = 1."""

    def __init__(self, kernel: KernelField, n_particles: int, grid_n: int, dt: float):
        if kernel.dimension != 1:
            raise ValueError("joint solves are implemented for d=1 kernels only")
        if n_particles not in MAX_GRID:
            raise ValueError(f"N must be in {set(MAX_GRID)}")
        if grid_n > MAX_GRID[n_particles]:
            raise ValueError(
                f"grid n={grid_n} exceeds the feasible size {MAX_GRID[n_particles]} for N={n_particles}"
            )
        if grid_n < 2 * kernel.max_wavenumber + 2:
            raise ValueError("grid too coarse for the kernel modes")
        self.kernel = kernel
        self.n_particles = n_particles
        self.grid_n = grid_n
        self.dt = dt
        self.spacing = 1.0 / grid_n
        n = n_particles
        self.stiff = kernel.eig_upper * (n - 1) / n

        spread = (kernel.eig_upper - kernel.eig_lower) * (n - 1) / n
        dt_diff = np.inf if spread == 0 else self.spacing**2 / (2.0 * n * spread)
        sup_drift = kernel.sup_divergence() * (n - 1) / n
        dt_adv = np.inf if sup_drift == 0 else self.spacing / sup_drift
        self.dt_bound = float(min(dt_diff, dt_adv))
        if dt > self.dt_bound * (1 + 1e-12):
            raise ValueError(f"dt={dt:g} exceeds stability bound {self.dt_bound:g}")

        self.diff_half = [
            a - self.stiff
            for a in pair_coefficient_field(kernel, n, grid_n, "matrix", stagger=0.5)
        ]
        self.drift_half = pair_coefficient_field(kernel, n, grid_n, "divergence", stagger=0.5)

        k = np.fft.fftfreq(grid_n, d=1.0 / grid_n)
        lap = np.zeros((grid_n,) * n)
        for axis in range(n):
            shape = [1] * n
            shape[axis] = grid_n
            lap = lap - (2 * np.pi * k.reshape(shape)) ** 2
        z = self.stiff * lap * dt
        self.decay = np.exp(z)
        with np.errstate(divide="ignore", invalid="ignore"):
            phi1 = np.expm1(z) / z
        phi1[np.abs(z) < 1e-12] = 1.0
        self.phi1_dt = dt * phi1

    def step(self, values: np.ndarray) -> np.ndarray:
        h = self.spacing
        remainder = np.zeros_like(values)
        for axis in range(self.n_particles):
            fwd = np.roll(values, -1, axis=axis)
            flux = self.diff_half[axis] * (fwd - values) / h \
                - self.drift_half[axis] * 0.5 * (fwd + values)
            remainder += (flux - np.roll(flux, 1, axis=axis)) / h
        fhat = np.fft.fftn(values)
        rhat = np.fft.fftn(remainder)
        return np.fft.ifftn(self.decay * fhat + self.phi1_dt * rhat).real

    def solve(self, f0: LiouvilleDensity, t_final: float, snapshot_times=None) -> "LiouvilleTrajectory":
        if f0.n_particles != self.n_particles or f0.grid_n != self.grid_n:
            raise ValueError("initial density does not match the solver grid")
        n_steps = steps_for(t_final, self.dt)
        if snapshot_times is None:
            snapshot_times = [0.0, t_final]
        lookup = snapshot_lookup(snapshot_times, self.dt, n_steps)
        states = np.empty((len(snapshot_times),) + f0.values.shape)
        values = f0.values.copy()
        mass0 = values.sum()
        worst_mass = 0.0
        worst_min = values.min()
        for idx in lookup.get(0, []):
            states[idx] = values
        for step_no in range(1, n_steps + 1):
            values = self.step(values)
            worst_mass = max(worst_mass, abs(values.sum() - mass0))
            low = values.min()
            worst_min = min(worst_min, low)
            if low < -NEGATIVE_TOL:
                raise RuntimeError(
                    f"joint density reached {low:.3e} at t={step_no * self.dt:g}; "
                    f"dt={self.dt:g} (bound {self.dt_bound:g}), refine n or dt"
                )
            for idx in lookup.get(step_no, []):
                states[idx] = values
        return LiouvilleTrajectory(
            n_particles=self.n_particles,
            grid_n=self.grid_n,
            kernel=self.kernel,
            times=np.asarray(snapshot_times, dtype=float),
            states=states,
            mass_drift=worst_mass * f0.cell_volume,
            min_value=float(worst_min),
        )


@dataclass
class LiouvilleTrajectory:
    """Snapshots of a joint-law solve, with the interaction that produced them."""

    n_particles: int
    grid_n: int
    kernel: KernelField
    times: np.ndarray
    states: np.ndarray
    mass_drift: float
    min_value: float

    def snapshot(self, i: int) -> LiouvilleDensity:
        return LiouvilleDensity(self.n_particles, self.grid_n, self.states[i],
                                time=float(self.times[i]))


def marginal(density: LiouvilleDensity, k: int) -> DensityField:
    """Integrate out particles k+1..N; exact quadrature on the grid."""
    if not 1 <= k < density.n_particles:
        raise ValueError(f"marginal order must be in [1, {density.n_particles - 1}]")
    reduce_axes = tuple(range(k, density.n_particles))
    h = 1.0 / density.grid_n
    values = density.values.sum(axis=reduce_axes) * h ** (density.n_particles - k)
    return DensityField(PeriodicGrid(k, density.grid_n), values)


def _log_tensor(f: DensityField, n_particles: int) -> np.ndarray:
    """log of the product density f^(x)N as an n^N array."""
    logf = np.log(f.values)
    n = f.grid.n
    out = np.zeros((n,) * n_particles)
    for axis in range(n_particles):
        shape = [1] * n_particles
        shape[axis] = n
        out = out + logf.reshape(shape)
    return out


def relative_entropy(density: LiouvilleDensity, f: DensityField) -> float:
    """H_N = (1/N) int f_N log(f_N / f^(x)N), evaluated as an exact discrete
    Kullback-Leibler divergence of normalized node masses so the Gibbs bound
    holds to round-off. Convention 0 log 0 = 0."""
    if f.grid.dimension != 1 or f.grid.n != density.grid_n:
        raise ValueError("reference density must live on the matching 1-d grid")
    if f.minimum() <= 0.0:
        raise ValueError("reference density must be strictly positive")
    w = density.node_masses()
    positive = w > 0.0
    if not positive.all() and w[~positive].min() < -NEGATIVE_TOL:
        raise ValueError("joint density has negative mass beyond tolerance")
    p = np.where(positive, w, 0.0)
    total = p.sum()
    p = p / total
    log_ratio = np.zeros_like(p)
    log_ratio[positive] = np.log(density.values[positive]) - _log_tensor(f, density.n_particles)[positive]
    # normalization of both sides keeps this an exact discrete KL
    h_sum = float((p * log_ratio).sum()) - np.log(total) + density.n_particles * np.log(f.mass())
    return h_sum / density.n_particles


def density_relative_entropy(g: DensityField, f: DensityField) -> float:
    """int g log(g/f) for densities on the same grid, as an exact discrete
    KL of normalized cell masses (so the Gibbs bound holds to round-off)."""
    if g.grid != f.grid:
        raise ValueError("densities must share a grid")
    if f.minimum() <= 0.0:
        raise ValueError("reference density must be strictly positive")
    cell = g.grid.cell_volume
    w = g.values * cell
    positive = w > 0.0
    if not positive.all() and w[~positive].min() < -NEGATIVE_TOL:
        raise ValueError("density has negative mass beyond tolerance")
    p = np.where(positive, w, 0.0)
    total = p.sum()
    p = p / total
    log_ratio = np.zeros_like(p)
    log_ratio[positive] = np.log(g.values[positive]) - np.log(f.values[positive])
    return float((p * log_ratio).sum()) - np.log(total) + np.log(f.mass())


def joint_entropy(density: LiouvilleDensity) -> float:
    """int f_N log f_N with the 0 log 0 = 0 convention (not divided by N)."""
    w = density.node_masses()
    positive = w > 0.0
    return float((w[positive] * np.log(density.values[positive])).sum())


def _centered_log_gradient(values: np.ndarray, axis: int, spacing: float,
                           floor: float = 1e-300) -> np.ndarray:
    logv = np.log(np.clip(values, floor, None))
    return (np.roll(logv, -1, axis=axis) - np.roll(logv, 1, axis=axis)) / (2.0 * spacing)


def entropy_solution_residual(trajectory: LiouvilleTrajectory) -> np.ndarray:
    """Defect in the time-integrated entropy inequality, one value per
    snapshot time (index 0 is zero by construction):

        S(t) + int_0^t [Fisher quadratic + drift-divergence term] - S(0),

    with S the joint entropy, the quadratic weighted by the nodal pair
    matrix (1/N) sum_{j != i} a(v_i - v_j), and centered-difference log
    gradients, so the defect shrinks at O(h^2 + dt) under refinement."""
    n = trajectory.n_particles
    grid_n = trajectory.grid_n
    h = 1.0 / grid_n
    diff_nodal = pair_coefficient_field(trajectory.kernel, n, grid_n, "matrix")
    div_nodal = pair_coefficient_field(trajectory.kernel, n, grid_n, "div_divergence")
    cell = h**n

    entropies = np.empty(len(trajectory.times))
    production = np.empty(len(trajectory.times))
    for s in range(len(trajectory.times)):
        density = trajectory.snapshot(s)
        entropies[s] = joint_entropy(density)
        w = np.clip(density.values, 0.0, None) * cell
        fisher = 0.0
        drift = 0.0
        for axis in range(n):
            g = _centered_log_gradient(density.values, axis, h)
            fisher += float((w * diff_nodal[axis] * g * g).sum())
            drift += float((w * div_nodal[axis]).sum())
        production[s] = fisher + drift
    residuals = np.empty_like(entropies)
    residuals[0] = 0.0
    integral = 0.0
    for s in range(1, len(trajectory.times)):
        dt_s = trajectory.times[s] - trajectory.times[s - 1]
        integral += 0.5 * dt_s * (production[s] + production[s - 1])
        residuals[s] = entropies[s] + integral - entropies[0]
    return residuals


@dataclass
class EntropyBalance:
    """The three terms driving d/dt of the relative entropy at one time.

    dissipation_term is the negative quadratic with the pair matrix (always
    <= 0); diffusion_coupling_term and drift_coupling_term carry the
    difference between the mean-field convolutions and the pair sums."""

    time: float
    dissipation_term: float
    diffusion_coupling_term: float
    drift_coupling_term: float

    @property
    def dissipation(self) -> float:
        return -self.dissipation_term

    @property
    def total(self) -> float:
        return self.dissipation_term + self.diffusion_coupling_term + self.drift_coupling_term


def entropy_balance_terms(density: LiouvilleDensity, f: DensityField,
                          kernel: KernelField) -> EntropyBalance:
    """Quadrature of the three relative-entropy production integrals at one
    time point; raises if the quadratic term comes out positive."""
    if f.grid.dimension != 1 or f.grid.n != density.grid_n:
        raise ValueError("reference density must live on the matching 1-d grid")
    if f.minimum() <= 0.0:
        raise ValueError("reference density must be strictly positive")
    if density.values.min() <= 0.0:
        raise ValueError("joint density must be strictly positive for the balance")
    n = density.n_particles
    grid_n = density.grid_n
    h = 1.0 / grid_n
    w = density.node_masses()

    conv = convolve(kernel, f)
    conv_a = conv.diffusion[:, 0, 0]
    conv_b = conv.drift[:, 0]
    pair_a = pair_coefficient_field(kernel, n, grid_n, "matrix")
    pair_b = pair_coefficient_field(kernel, n, grid_n, "divergence")

    log_ratio = np.log(density.values) - _log_tensor(f, n)
    logf = np.log(f.values)
    dlogf = (np.roll(logf, -1) - np.roll(logf, 1)) / (2.0 * h)

    dissipation = 0.0
    diffusion_coupling = 0.0
    drift_coupling = 0.0
    for axis in range(n):
        shape = [1] * n
        shape[axis] = grid_n
        g_ratio = (np.roll(log_ratio, -1, axis=axis) - np.roll(log_ratio, 1, axis=axis)) / (2.0 * h)
        g_bar = dlogf.reshape(shape)
        a_dev = conv_a.reshape(shape) - pair_a[axis]
        b_dev = conv_b.reshape(shape) - pair_b[axis]
        dissipation -= float((w * pair_a[axis] * g_ratio * g_ratio).sum())
        diffusion_coupling += float((w * a_dev * g_ratio * g_bar).sum())
        drift_coupling -= float((w * b_dev * g_ratio).sum())
    dissipation /= n
    diffusion_coupling /= n
    drift_coupling /= n
    if dissipation > 1e-12:
        raise RuntimeError(f"entropy dissipation term came out positive: {dissipation:.3e}")
    return EntropyBalance(
        time=density.time,
        dissipation_term=dissipation,
        diffusion_coupling_term=diffusion_coupling,
        drift_coupling_term=drift_coupling,
    )


def entropy_balance_series(trajectory: LiouvilleTrajectory, references: list[DensityField],
                           tol: float = 1e-3) -> tuple[list[EntropyBalance], float]:
    """Balance terms at every snapshot, cross-checked against the centered
    time difference of the relative entropy at interior snapshots. The
    reference densities must be the mean-field solution sampled at the same
    times (the entropy derivative sees both evolutions). Raises if the worst
    interior defect exceeds tol."""
    if len(references) != len(trajectory.times):
        raise ValueError("need one reference density per snapshot")
    balances = []
    entropies = np.empty(len(trajectory.times))
    for s, f in enumerate(references):
        density = trajectory.snapshot(s)
        balances.append(entropy_balance_terms(density, f, trajectory.kernel))
        entropies[s] = relative_entropy(density, f)
    worst = 0.0
    for s in range(1, len(trajectory.times) - 1):
        span = trajectory.times[s + 1] - trajectory.times[s - 1]
        rate = (entropies[s + 1] - entropies[s - 1]) / span
        worst = max(worst, abs(rate - balances[s].total))
    if worst > tol:
        raise RuntimeError(
            f"entropy balance defect {worst:.3e} exceeds tolerance {tol:g}; "
            "refine the snapshot spacing or the grid"
        )
    return balances, worst

"""N-particle diffusion on the torus with pairwise trigonometric interactions.

Each particle moves by Euler-Maruyama steps of

    dv^i = (2/N) sum_{j != i} div(a)(v^i - v^j) dt
         + sqrt(2) [ (1/N) sum_{j != i} a(v^i - v^j) ]^{1/2} dB^i,

displacements reduced to [-0.5, 0.5)^d before kernel evaluation. The
factor-2 drift is deliberate: in the generator, div_i acting on
(1/N) sum_j a(v^i - v^j) f produces one copy of the divergence term, so a
transport coefficient of 2 div(a) per pair leaves exactly one copy as
genuine drift relative to the diffusion written in divergence form. The
small-N grid solver mirrors this split and the joint-law comparison in the
acceptance suite guards the coefficient.

Randomness is counter-based: particle i of replica r owns the Philox
stream keyed (master_seed, r * 2^32 + i), and its initial position comes
from a second stream with the top key bit set. Results are therefore
independent of scheduling, replica batching, and worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import CosineProfile, DensityField
from .kernels import KernelField
from .util import snapshot_lookup, steps_for

INIT_STREAM_FLAG = 1 << 63
PSD_TOL = 1e-10


def particle_stream(master_seed: int, replica: int, particle: int,
                    init: bool = False) -> np.random.Generator:
    """Dedicated Philox stream for one particle of one replica."""
    if not 0 <= replica < 2**31 or not 0 <= particle < 2**32:
        raise ValueError("replica must fit in 31 bits and particle in 32 bits")
    word = (replica << 32) | particle
    if init:
        word |= INIT_STREAM_FLAG
    # The key must be handed over as uint64: a plain list whose second word
    # has the high bit set would be promoted to float64 and rounded, fusing
    # every init stream into one.
    key = np.array([master_seed, word], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def wrap_displacement(diff: np.ndarray) -> np.ndarray:
    """Reduce displacements to the canonical box [-0.5, 0.5)^d."""
    return np.mod(diff + 0.5, 1.0) - 0.5


@dataclass
class DriftDiffusion:
    """Per-particle drift vectors and symmetric PSD diffusion matrices."""

    drift: np.ndarray      # (..., N, d)
    diffusion: np.ndarray  # (..., N, d, d)


def _self_matrix(kernel: KernelField) -> np.ndarray:
    """Kernel value at zero displacement, a(0) = base Id + sum A_k."""
    a0 = kernel.spec.base_level * np.eye(kernel.dimension)
    if kernel.n_modes:
        a0 = a0 + kernel.amplitudes.sum(axis=0)
    return a0


def forces_naive(positions: np.ndarray, kernel: KernelField,
                 drift_coefficient: float = 2.0, row_block: int = 256) -> DriftDiffusion:
    """Direct O(N^2) pair summation, the oracle for the spectral evaluator.

    positions has shape (..., N, d); leading axes are independent replicas.
    Work proceeds in row blocks so the (N, N) pair tables never exceed a
    few hundred MB even at N = 10^4.
    """
    positions = np.asarray(positions, dtype=float)
    d = kernel.dimension
    if positions.shape[-1] != d:
        raise ValueError(f"positions last axis must be {d}")
    batch_shape = positions.shape[:-2]
    n = positions.shape[-2]
    flat = positions.reshape(-1, n, d)
    drift = np.empty_like(flat)
    diffusion = np.empty(flat.shape[:-1] + (d, d))
    a0 = _self_matrix(kernel)
    for b in range(flat.shape[0]):
        pos = flat[b]
        for i0 in range(0, n, row_block):
            i1 = min(i0 + row_block, n)
            diff = wrap_displacement(pos[i0:i1, np.newaxis, :] - pos[np.newaxis, :, :])
            diffusion[b, i0:i1] = (kernel.matrix(diff).sum(axis=1) - a0) / n
            drift[b, i0:i1] = kernel.divergence(diff).sum(axis=1) * (drift_coefficient / n)
    return DriftDiffusion(
        drift=drift.reshape(batch_shape + (n, d)),
        diffusion=diffusion.reshape(batch_shape + (n, d, d)),
    )


def forces_spectral(positions: np.ndarray, kernel: KernelField,
                    drift_coefficient: float = 2.0) -> DriftDiffusion:
    """O(NK) evaluator: per-mode sums over particles, then O(K) per particle.

    The self term is removed analytically: cos contributes a(0)/N to the
    diffusion and sin contributes nothing to the drift.
    """
    positions = np.asarray(positions, dtype=float)
    d = kernel.dimension
    if positions.shape[-1] != d:
        raise ValueError(f"positions last axis must be {d}")
    n = positions.shape[-2]
    lead = positions.shape[:-2]
    eye = np.eye(d)
    diffusion = np.empty(lead + (n, d, d))
    diffusion[...] = kernel.spec.base_level * ((n - 1) / n) * eye
    drift = np.zeros(lead + (n, d))
    if kernel.n_modes:
        phases = 2.0 * np.pi * (positions @ kernel.wavevecs.T)  # (..., N, K)
        cos = np.cos(phases)
        sin = np.sin(phases)
        cos_sum = cos.sum(axis=-2, keepdims=True)
        sin_sum = sin.sum(axis=-2, keepdims=True)
        pair_cos = cos * cos_sum + sin * sin_sum
        pair_sin = sin * cos_sum - cos * sin_sum
        diffusion += np.einsum("...k,kab->...ab", pair_cos, kernel.amplitudes) / n
        diffusion -= kernel.amplitudes.sum(axis=0) / n
        drift += np.einsum("...k,ka->...a", pair_sin, kernel.div_coeffs) * (drift_coefficient / n)
    return DriftDiffusion(drift=drift, diffusion=diffusion)


_FORCE_EVALUATORS = {"naive": forces_naive, "spectral": forces_spectral}


def forces(positions: np.ndarray, kernel: KernelField, mode: str = "spectral",
           drift_coefficient: float = 2.0) -> DriftDiffusion:
    try:
        evaluate = _FORCE_EVALUATORS[mode]
    except KeyError:
        raise ValueError(f"unknown force mode {mode!r}; expected naive or spectral") from None
    return evaluate(positions, kernel, drift_coefficient=drift_coefficient)


def sqrt_psd(mats: np.ndarray, tol: float = PSD_TOL) -> np.ndarray:
    """Principal square root of symmetric PSD matrices, d <= 3.

    d=1 scalar square root; d=2 closed form through the eigenvalue pair;
    d=3 cyclic Jacobi diagonalization. Eigenvalues in [-tol, 0) are clamped
    to zero, anything below -tol is an error.
    """
    mats = np.asarray(mats, dtype=float)
    if mats.ndim < 2 or mats.shape[-1] != mats.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {mats.shape}")
    d = mats.shape[-1]
    scale = max(1.0, float(np.abs(mats).max())) if mats.size else 1.0
    if not np.allclose(mats, np.swapaxes(mats, -1, -2), atol=1e-10 * scale, rtol=0.0):
        raise ValueError("matrices are not symmetric")
    if d == 1:
        vals = mats[..., 0, 0]
        _check_floor(vals, tol)
        return np.sqrt(np.clip(vals, 0.0, None))[..., np.newaxis, np.newaxis]
    if d == 2:
        return _sqrt_2x2(mats, tol)
    if d == 3:
        eigvals, eigvecs = _jacobi_eigh3(mats)
        _check_floor(eigvals, tol)
        roots = np.sqrt(np.clip(eigvals, 0.0, None))
        out = np.einsum("...ak,...k,...bk->...ab", eigvecs, roots, eigvecs)
        return 0.5 * (out + np.swapaxes(out, -1, -2))
    raise ValueError(f"dimension {d} not supported (d <= 3)")


def _check_floor(vals: np.ndarray, tol: float):
    low = float(vals.min()) if vals.size else 0.0
    if low < -tol:
        raise ValueError(f"matrix eigenvalue {low:.3e} below -{tol:.0e}; not PSD")


def _sqrt_2x2(mats: np.ndarray, tol: float) -> np.ndarray:
    a = mats[..., 0, 0]
    b = mats[..., 0, 1]
    c = mats[..., 1, 1]
    half_gap = np.sqrt(((a - c) / 2.0) ** 2 + b**2)
    mid = (a + c) / 2.0
    lo = mid - half_gap
    hi = mid + half_gap
    _check_floor(lo, tol)
    slo = np.sqrt(np.clip(lo, 0.0, None))
    shi = np.sqrt(np.clip(hi, 0.0, None))
    # S = slo Id + (shi - slo)/(hi - lo) (A - lo Id); the ratio -> 0 exactly
    # when the spectrum degenerates because the numerator vanishes first
    denom = np.where(half_gap > 0.0, 2.0 * half_gap, 1.0)
    coef = (shi - slo) / denom
    eye = np.eye(2)
    shifted = mats - lo[..., np.newaxis, np.newaxis] * eye
    return coef[..., np.newaxis, np.newaxis] * shifted + slo[..., np.newaxis, np.newaxis] * eye


_JACOBI_PAIRS = ((0, 1), (0, 2), (1, 2))


def _jacobi_eigh3(mats: np.ndarray, max_sweeps: int = 16):
    """Cyclic Jacobi eigendecomposition for batches of symmetric 3x3."""
    a = mats.copy()
    batch = a.shape[:-2]
    v = np.zeros_like(a)
    v[...] = np.eye(3)
    scale = max(1.0, float(np.abs(a).max())) if a.size else 1.0
    for _ in range(max_sweeps):
        off = max(float(np.abs(a[..., p, q]).max()) for p, q in _JACOBI_PAIRS)
        if off <= 1e-15 * scale:
            break
        for p, q in _JACOBI_PAIRS:
            apq = a[..., p, q]
            theta = 0.5 * np.arctan2(2.0 * apq, a[..., q, q] - a[..., p, p])
            theta = np.where(np.abs(apq) > 0.0, theta, 0.0)
            cth = np.cos(theta)
            sth = np.sin(theta)
            rot_p = cth[..., np.newaxis] * a[..., :, p] - sth[..., np.newaxis] * a[..., :, q]
            rot_q = sth[..., np.newaxis] * a[..., :, p] + cth[..., np.newaxis] * a[..., :, q]
            a[..., :, p] = rot_p
            a[..., :, q] = rot_q
            rot_p = cth[..., np.newaxis] * a[..., p, :] - sth[..., np.newaxis] * a[..., q, :]
            rot_q = sth[..., np.newaxis] * a[..., p, :] + cth[..., np.newaxis] * a[..., q, :]
            a[..., p, :] = rot_p
            a[..., q, :] = rot_q
            rot_p = cth[..., np.newaxis] * v[..., :, p] - sth[..., np.newaxis] * v[..., :, q]
            rot_q = sth[..., np.newaxis] * v[..., :, p] + cth[..., np.newaxis] * v[..., :, q]
            v[..., :, p] = rot_p
            v[..., :, q] = rot_q
    eigvals = np.stack([a[..., i, i] for i in range(3)], axis=-1)
    return eigvals.reshape(batch + (3,)), v


def advance_positions(positions: np.ndarray, kernel: KernelField, dt: float,
                      noise: np.ndarray, mode: str = "spectral",
                      drift_coefficient: float = 2.0) -> np.ndarray:
    """One Euler-Maruyama step for an array of replicas; pure function."""
    dd = forces(positions, kernel, mode=mode, drift_coefficient=drift_coefficient)
    roots = sqrt_psd(dd.diffusion)
    kick = np.einsum("...ab,...b->...a", roots, noise)
    return np.mod(positions + dd.drift * dt + np.sqrt(2.0 * dt) * kick, 1.0)


@dataclass
class ParticleState:
    """Positions of one replica plus the RNG lineage that produced them."""

    positions: np.ndarray  # (N, d)
    time: float
    master_seed: int
    replica: int = 0
    draws_consumed: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[0] < 2:
            raise ValueError("positions must be (N, d) with N >= 2")
        if self.positions.min() < 0.0 or self.positions.max() >= 1.0:
            raise ValueError("positions must lie in [0, 1)")

    @property
    def n_particles(self) -> int:
        return self.positions.shape[0]


def em_step(state: ParticleState, kernel: KernelField, dt: float,
            mode: str = "spectral", drift_coefficient: float = 2.0) -> ParticleState:
    """Single Euler-Maruyama step drawing from each particle's own stream.

    Streams are replayed up to the state's draw counter, so stepping one at
    a time reproduces bit-for-bit what the batched ensemble runner produces.
    """
    if dt == 0.0:
        return state
    n, d = state.positions.shape
    noise = np.empty((n, d))
    rows = state.draws_consumed + 1
    for i in range(n):
        gen = particle_stream(state.master_seed, state.replica, i)
        noise[i] = gen.normal(size=(rows, d))[-1]
    new_positions = advance_positions(
        state.positions, kernel, dt, noise, mode=mode, drift_coefficient=drift_coefficient
    )
    return ParticleState(
        positions=new_positions,
        time=state.time + dt,
        master_seed=state.master_seed,
        replica=state.replica,
        draws_consumed=state.draws_consumed + 1,
    )


@dataclass
class EnsembleConfig:
    """Inputs for a batch of independent replicas of the particle system."""

    kernel: KernelField
    n_particles: int
    n_replicas: int
    dt: float
    t_final: float
    initial: object  # sequence of CosineProfile (product law) or DensityField
    master_seed: int
    snapshot_times: tuple = ()
    drift_coefficient: float = 2.0
    force_mode: str = "spectral"
    replica_offset: int = 0
    noise_block_bytes: float = 2.68e8

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if self.n_replicas < 1:
            raise ValueError("need at least 1 replica")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.force_mode not in _FORCE_EVALUATORS:
            raise ValueError(f"unknown force mode {self.force_mode!r}")
        if isinstance(self.initial, DensityField):
            if self.initial.grid.dimension != self.kernel.dimension:
                raise ValueError("initial density dimension mismatch")
        else:
            profiles = tuple(self.initial)
            if len(profiles) != self.kernel.dimension:
                raise ValueError(
                    f"need {self.kernel.dimension} profiles for a product initial law"
                )
            if not all(isinstance(p, CosineProfile) for p in profiles):
                raise ValueError("initial must be CosineProfiles or a DensityField")
            self.initial = profiles


@dataclass
class EnsembleResult:
    """Snapshots of every replica: positions[s, m, i] = particle i of
    replica m at snapshot time s."""

    times: np.ndarray
    positions: np.ndarray  # (S, M, N, d)
    master_seed: int
    replica_offset: int

    def pooled(self, snapshot: int) -> np.ndarray:
        """All particles of all replicas at one snapshot, shape (M*N, d)."""
        s = self.positions[snapshot]
        return s.reshape(-1, s.shape[-1])


def _sample_block_uniforms(cfg: EnsembleConfig, r0: int, r1: int, n_extra: int) -> np.ndarray:
    d = cfg.kernel.dimension
    out = np.empty((r1 - r0, cfg.n_particles, d + n_extra))
    for rb, r in enumerate(range(r0, r1)):
        for i in range(cfg.n_particles):
            gen = particle_stream(cfg.master_seed, cfg.replica_offset + r, i, init=True)
            out[rb, i] = gen.random(d + n_extra)
    return out


def sample_block_positions(cfg: EnsembleConfig, r0: int, r1: int) -> np.ndarray:
    """Initial positions for replicas [r0, r1), each particle from its own
    init stream; product laws by per-axis quantile inversion, gridded
    densities by exact inversion of the cell histogram."""
    d = cfg.kernel.dimension
    if isinstance(cfg.initial, DensityField):
        u = _sample_block_uniforms(cfg, r0, r1, 1)
        return sample_from_field(cfg.initial, u[..., 0], u[..., 1:])
    u = _sample_block_uniforms(cfg, r0, r1, 0)
    pos = np.empty_like(u)
    for axis, profile in enumerate(cfg.initial):
        pos[..., axis] = profile.quantile(u[..., axis])
    return pos


def sample_from_field(density: DensityField, cell_u: np.ndarray, offset_u: np.ndarray) -> np.ndarray:
    """Exact draw from the piecewise-constant density defined by grid cells:
    pick a cell by inverse CDF, then place the point uniformly inside it."""
    values = density.values.reshape(-1)
    if values.min() < 0:
        raise ValueError("density must be nonnegative to sample from")
    cdf = np.cumsum(values)
    cdf /= cdf[-1]
    flat_idx = np.searchsorted(cdf, cell_u, side="right")
    flat_idx = np.clip(flat_idx, 0, values.size - 1)
    coords = np.unravel_index(flat_idx, density.grid.shape)
    corner = np.stack(coords, axis=-1) * density.grid.spacing
    return corner + offset_u * density.grid.spacing


def run_ensemble(cfg: EnsembleConfig) -> EnsembleResult:
    """Simulate M independent replicas, batching them to bound noise memory.

    Replica m is keyed by its global index (replica_offset + m), so sharding
    a run across workers and concatenating preserves every bit.
    """
    d = cfg.kernel.dimension
    n_steps = steps_for(cfg.t_final, cfg.dt)
    snapshot_times = tuple(cfg.snapshot_times) or (0.0, cfg.t_final)
    lookup = snapshot_lookup(snapshot_times, cfg.dt, n_steps)
    out = np.empty((len(snapshot_times), cfg.n_replicas, cfg.n_particles, d))

    per_replica = max(1, n_steps) * cfg.n_particles * d * 8
    block = int(max(1, min(cfg.n_replicas, cfg.noise_block_bytes // per_replica)))
    for r0 in range(0, cfg.n_replicas, block):
        r1 = min(r0 + block, cfg.n_replicas)
        positions = sample_block_positions(cfg, r0, r1)
        noise = np.empty((r1 - r0, n_steps, cfg.n_particles, d))
        for rb, r in enumerate(range(r0, r1)):
            for i in range(cfg.n_particles):
                gen = particle_stream(cfg.master_seed, cfg.replica_offset + r, i)
                noise[rb, :, i, :] = gen.normal(size=(n_steps, d))
        for snap in lookup.get(0, []):
            out[snap, r0:r1] = positions
        for step in range(1, n_steps + 1):
            positions = advance_positions(
                positions, cfg.kernel, cfg.dt, noise[:, step - 1],
                mode=cfg.force_mode, drift_coefficient=cfg.drift_coefficient,
            )
            for snap in lookup.get(step, []):
                out[snap, r0:r1] = positions
    return EnsembleResult(
        times=np.asarray(snapshot_times, dtype=float),
        positions=out,
        master_seed=cfg.master_seed,
        replica_offset=cfg.replica_offset,
    )

"""Matrix-valued interaction kernels on the unit torus.

A kernel is a real trigonometric polynomial

    a(z) = base_level * Id + sum_k A_k cos(2 pi k.z),

with symmetric coefficient matrices A_k, so that the vector field
div(a) and the scalar div(div(a)) are available in closed form and the
ellipticity certificate is checkable at construction time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CERTIFY_TOL = 1e-10


@dataclass(frozen=True)
class KernelMode:
    """One cosine mode: integer wave vector and symmetric amplitude matrix."""

    wavevec: tuple[int, ...]
    amplitude: np.ndarray  # (d, d) symmetric

    def __post_init__(self):
        amp = np.asarray(self.amplitude, dtype=float)
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "wavevec", tuple(int(k) for k in self.wavevec))


@dataclass(frozen=True)
class KernelSpec:
    """Declarative description of a torus kernel (period 1 per axis)."""

    dimension: int
    base_level: float
    modes: tuple[KernelMode, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(self.modes))
        if self.dimension not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        if not self.base_level > 0:
            raise ValueError(f"base_level must be positive, got {self.base_level}")
        seen: set[tuple[int, ...]] = set()
        for mode in self.modes:
            k = mode.wavevec
            if len(k) != self.dimension:
                raise ValueError(f"wave vector {k} does not match dimension {self.dimension}")
            if all(ki == 0 for ki in k):
                raise ValueError("wave vector 0 is not allowed; use base_level for the mean")
            neg = tuple(-ki for ki in k)
            if k in seen or neg in seen:
                raise ValueError(f"duplicate wave vector {k}: k and -k span the same cosine")
            seen.add(k)
            amp = mode.amplitude
            if amp.shape != (self.dimension, self.dimension):
                raise ValueError(f"amplitude for mode {k} must be {self.dimension}x{self.dimension}")
            if not np.allclose(amp, amp.T, atol=1e-14, rtol=0.0):
                raise ValueError(f"amplitude for mode {k} is not symmetric")


class KernelField:
    """Evaluable kernel with certified eigenvalue bounds.

    Immutable after construction; all evaluations are pure functions of the
    input points and can run concurrently.
    """

    def __init__(self, spec: KernelSpec):
        self.spec = spec
        self.dimension = spec.dimension
        d = spec.dimension
        n_modes = len(spec.modes)
        self.wavevecs = np.array([m.wavevec for m in spec.modes], dtype=float).reshape(n_modes, d)
        self.amplitudes = np.array([m.amplitude for m in spec.modes], dtype=float).reshape(n_modes, d, d)
        # coefficient-level differentiation: the sine coefficients of div(a)
        # and the cosine coefficients of div(div(a))
        self.div_coeffs = -2.0 * np.pi * np.einsum("kab,kb->ka", self.amplitudes, self.wavevecs)
        self.div2_coeffs = -4.0 * np.pi**2 * np.einsum("ka,kab,kb->k", self.wavevecs, self.amplitudes, self.wavevecs)
        if n_modes:
            norms = np.array([np.abs(np.linalg.eigvalsh(A)).max() for A in self.amplitudes])
        else:
            norms = np.zeros(0)
        self.mode_norms = norms
        total = float(norms.sum())
        self.eig_lower = spec.base_level - total
        self.eig_upper = spec.base_level + total
        if not self.eig_lower > 0:
            raise ValueError(
                "ellipticity certificate failed: base_level - sum of mode norms = "
                f"{self.eig_lower:.6g} <= 0"
            )

    @property
    def n_modes(self) -> int:
        return len(self.spec.modes)

    @property
    def max_wavenumber(self) -> int:
        if self.n_modes == 0:
            return 0
        return int(np.abs(self.wavevecs).max())

    def sup_divergence(self) -> float:
        """Upper bound for |div(a)| (Euclidean norm), from coefficient sums."""
        if self.n_modes == 0:
            return 0.0
        return float(np.sqrt((self.div_coeffs**2).sum(axis=1)).sum())

    def _as_points(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.dimension == 1 and (z.ndim == 0 or z.shape[-1] != 1):
            z = z[..., np.newaxis]
        if z.shape[-1] != self.dimension:
            raise ValueError(f"points must have last axis {self.dimension}, got shape {z.shape}")
        return np.mod(z, 1.0)

    def phases(self, z) -> np.ndarray:
        """2 pi k.z for every mode; shape (..., n_modes)."""
        z = self._as_points(z)
        return 2.0 * np.pi * (z @ self.wavevecs.T)

    def matrix(self, z) -> np.ndarray:
        """Evaluate the matrix kernel; shape (..., d, d), exactly symmetric."""
        z = self._as_points(z)
        out = np.zeros(z.shape[:-1] + (self.dimension, self.dimension))
        out[...] = self.spec.base_level * np.eye(self.dimension)
        if self.n_modes:
            cos = np.cos(self.phases(z))
            out += np.einsum("...k,kab->...ab", cos, self.amplitudes)
        return out

    def divergence(self, z) -> np.ndarray:
        """Row-wise divergence of the matrix kernel; shape (..., d)."""
        z = self._as_points(z)
        if self.n_modes == 0:
            return np.zeros(z.shape[:-1] + (self.dimension,))
        sin = np.sin(self.phases(z))
        return np.einsum("...k,ka->...a", sin, self.div_coeffs)

    def div_divergence(self, z) -> np.ndarray:
        """Divergence of the divergence field; scalar per point."""
        z = self._as_points(z)
        if self.n_modes == 0:
            return np.zeros(z.shape[:-1])
        cos = np.cos(self.phases(z))
        return cos @ self.div2_coeffs


def build_kernel(spec: KernelSpec) -> KernelField:
    """Construct a KernelField, rejecting specs whose certificate fails."""
    return KernelField(spec)


def constant_kernel(dimension: int, level: float) -> KernelField:
    """Kernel a = level * Id with zero divergence everywhere."""
    return build_kernel(KernelSpec(dimension=dimension, base_level=level))


def canonical_kernel() -> KernelField:
    """The 1-d reference kernel 1 + 0.5 cos(2 pi z), bounds (0.5, 1.5)."""
    return build_kernel(
        KernelSpec(dimension=1, base_level=1.0, modes=(KernelMode((1,), np.array([[0.5]])),))
    )


def certify_bounds(field: KernelField, grid_n: int) -> tuple[float, float]:
    """Scan kernel eigenvalues on a uniform grid and check them against the
    certified bounds.

    Returns (observed min, observed max). Raises if the scan escapes the
    certificate by more than CERTIFY_TOL, which would indicate a
    construction bug rather than a bad input.
    """
    if grid_n < 2 * field.max_wavenumber + 1:
        raise ValueError(
            f"grid_n={grid_n} too coarse for max wave number {field.max_wavenumber}"
        )
    d = field.dimension
    axes = [np.arange(grid_n) / grid_n] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    mats = field.matrix(pts)
    if d == 1:
        eigs = mats[..., 0, 0]
    else:
        eigs = np.linalg.eigvalsh(mats)
    observed_min = float(eigs.min())
    observed_max = float(eigs.max())
    if observed_min < field.eig_lower - CERTIFY_TOL or observed_max > field.eig_upper + CERTIFY_TOL:
        raise RuntimeError(
            "certified bounds violated on scan: "
            f"observed ({observed_min:.12g}, {observed_max:.12g}) vs "
            f"certified ({field.eig_lower:.12g}, {field.eig_upper:.12g})"
        )
    return observed_min, observed_max

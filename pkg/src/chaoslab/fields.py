"""Uniform periodic grids, gridded densities, and closed-form initial data."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform n^d grid on the unit torus, nodes at j/n."""

    dimension: int
    n: int

    def __post_init__(self):
        if self.dimension not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        if self.n < 4 or self.n % 2 != 0:
            raise ValueError(f"n must be an even integer >= 4, got {self.n}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dimension

    @property
    def spacing(self) -> float:
        return 1.0 / self.n

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dimension

    def axis(self) -> np.ndarray:
        return np.arange(self.n) / self.n

    def points(self) -> np.ndarray:
        """Node coordinates, shape grid.shape + (d,)."""
        axes = [self.axis()] * self.dimension
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def wavenumbers(self) -> list[np.ndarray]:
        """Integer wave numbers per axis in FFT order."""
        return [np.fft.fftfreq(self.n, d=1.0 / self.n)] * self.dimension

    def laplacian_symbol(self) -> np.ndarray:
        """Fourier symbol of the Laplacian, -(2 pi)^2 |k|^2, grid shaped."""
        ks = self.wavenumbers()
        out = np.zeros(self.shape)
        for axis, k in enumerate(ks):
            shape = [1] * self.dimension
            shape[axis] = self.n
            out = out - (2 * np.pi * k.reshape(shape)) ** 2
        return out

    def gradient_symbols(self) -> list[np.ndarray]:
        """Fourier symbols 2 pi i k per axis, Nyquist mode zeroed so that
        derivatives of real fields stay real."""
        out = []
        for axis, k in enumerate(self.wavenumbers()):
            k = k.copy()
            k[self.n // 2] = 0.0
            shape = [1] * self.dimension
            shape[axis] = self.n
            out.append(2j * np.pi * np.broadcast_to(k.reshape(shape), self.shape))
        return out

    def integrate(self, values: np.ndarray) -> float:
        return float(values.sum() * self.cell_volume)


@dataclass
class DensityField:
    """Real scalar field sampled on a PeriodicGrid."""

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(
                f"values shape {self.values.shape} does not match grid {self.grid.shape}"
            )

    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def minimum(self) -> float:
        return float(self.values.min())

    def fourier(self) -> np.ndarray:
        """Normalized coefficients: fourier()[k] approximates int f e^{-2 pi i k.v}."""
        return np.fft.fftn(self.values) / self.values.size

    def fourier_mode(self, wavevec) -> complex:
        idx = tuple(int(k) % self.grid.n for k in np.atleast_1d(wavevec))
        return complex(self.fourier()[idx])

    def copy(self) -> "DensityField":
        return DensityField(self.grid, self.values.copy())


@dataclass(frozen=True)
class CosineProfile:
    """One-dimensional density 1 + sum_j eps_j cos(2 pi k_j v).

    Positive whenever sum |eps_j| < 1, with closed-form antiderivative, so
    exact sampling by quantile inversion is available.
    """

    modes: tuple[tuple[int, float], ...]

    def __post_init__(self):
        object.__setattr__(
            self, "modes", tuple((int(k), float(e)) for k, e in self.modes)
        )
        ks = [k for k, _ in self.modes]
        if any(k < 1 for k in ks):
            raise ValueError("profile wave numbers must be >= 1")
        if len(set(ks)) != len(ks):
            raise ValueError("profile wave numbers must be distinct")
        if sum(abs(e) for _, e in self.modes) >= 1.0:
            raise ValueError("sum of |amplitudes| must be < 1 to keep the density positive")

    @property
    def min_value(self) -> float:
        return 1.0 - sum(abs(e) for _, e in self.modes)

    def density(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.ones_like(v)
        for k, eps in self.modes:
            out = out + eps * np.cos(2 * np.pi * k * v)
        return out

    def cdf(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = v.astype(float).copy()
        for k, eps in self.modes:
            out = out + eps / (2 * np.pi * k) * np.sin(2 * np.pi * k * v)
        return out

    def quantile(self, u) -> np.ndarray:
        """Invert the cdf by Newton iteration (monotone, density > 0)."""
        u = np.asarray(u, dtype=float)
        v = u.astype(float).copy()
        for _ in range(60):
            resid = self.cdf(v) - u
            if np.abs(resid).max() < 1e-14:
                break
            v = v - resid / self.density(v)
        else:
            raise RuntimeError("quantile iteration did not converge")
        return np.mod(v, 1.0)

    def fourier_mode(self, k: int) -> float:
        """Coefficient of e^{-2 pi i k v} in the density (real by symmetry)."""
        if k == 0:
            return 1.0
        for kk, eps in self.modes:
            if kk == abs(k):
                return eps / 2.0
        return 0.0

    def on_grid(self, grid: PeriodicGrid) -> DensityField:
        if grid.dimension != 1:
            raise ValueError("CosineProfile is one-dimensional")
        return DensityField(grid, self.density(grid.axis()))


def uniform_profile() -> CosineProfile:
    return CosineProfile(modes=())


def product_density(grid: PeriodicGrid, profiles) -> DensityField:
    """Tensor product of 1-d profiles across the axes of a grid."""
    profiles = list(profiles)
    if len(profiles) != grid.dimension:
        raise ValueError(f"need {grid.dimension} profiles, got {len(profiles)}")
    values = np.ones(grid.shape)
    x = grid.axis()
    for axis, profile in enumerate(profiles):
        shape = [1] * grid.dimension
        shape[axis] = grid.n
        values = values * profile.density(x).reshape(shape)
    return DensityField(grid, values)

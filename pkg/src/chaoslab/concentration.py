"""Executable checks for the two abstract inequalities behind the entropy bound.

The first is the change-of-measure inequality: for a joint law p on a finite
product space, a single-site reference q, and a bounded observable Phi,

    sum p Phi  <=  (1/eta) * ( KL(p | q^N)/N + (1/N) log sum q^N e^{N eta Phi} ).

On a finite space every term is an exact finite sum, so the check carries no
quadrature error and a violation can only mean a bug.

The second is the exponential-moment bound: for a pair function psi with
sup-norm below 1/(2e) and mean zero against f in its second argument,

    E exp( ( (1/sqrt N) sum_j psi(v1, vj) )^2 ),    v1..vN iid with law f,

stays bounded uniformly in N.  That statement is genuinely probabilistic, so
the check is Monte Carlo with explicit standard errors and a trend test
rather than a sharp threshold.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .fields import DensityField
from .kernels import KernelField

# sup-norm hypothesis of the exponential-moment bound
PSI_SUP_LIMIT = 1.0 / (2.0 * math.e)
# margin kept between the dyadic sup-norm target and the hypothesis limit
PSI_SUP_MARGIN = 1e-6
# additive tolerance of the change-of-measure comparison
COM_TOL = 1e-12
# largest product space the exhaustive summation will accept
MAX_PRODUCT_STATES = 1_000_000
# replicas drawn per RNG stream; fixed so reruns are chunking-independent
SAMPLE_BLOCK = 1024


def tensor_power(vec: np.ndarray, copies: int) -> np.ndarray:
    """Flat C-ordered probability vector of the product law vec^(x copies)."""
    vec = np.asarray(vec, dtype=float)
    if vec.ndim != 1:
        raise ValueError("tensor_power expects a vector")
    if copies < 1:
        raise ValueError("copies must be >= 1")
    if vec.size**copies > MAX_PRODUCT_STATES:
        raise ValueError(
            f"product space {vec.size}^{copies} exceeds {MAX_PRODUCT_STATES} states"
        )
    out = np.ones(1)
    for _ in range(copies):
        out = np.multiply.outer(out, vec).reshape(-1)
    return out


@dataclass(eq=False)
class DiscreteSpace:
    """One change-of-measure instance on a finite product space.

    joint is the observed N-coordinate law, site the single-site reference
    whose N-fold product it is compared against, and test_function a bounded
    observable on the product space; all product-space vectors are flat in
    C order (first coordinate varies slowest).
    """

    size: int
    copies: int
    joint: np.ndarray
    site: np.ndarray
    test_function: np.ndarray

    def __post_init__(self):
        self.joint = np.asarray(self.joint, dtype=float)
        self.site = np.asarray(self.site, dtype=float)
        self.test_function = np.asarray(self.test_function, dtype=float)
        if self.size < 1 or self.copies < 1:
            raise ValueError("size and copies must be positive")
        states = self.size**self.copies
        if states > MAX_PRODUCT_STATES:
            raise ValueError(f"product space {states} states is too large")
        if self.site.shape != (self.size,):
            raise ValueError(f"site law must have shape ({self.size},)")
        if self.joint.shape != (states,):
            raise ValueError(f"joint law must have shape ({states},)")
        if self.test_function.shape != (states,):
            raise ValueError(f"test function must have shape ({states},)")
        if not np.all(np.isfinite(self.test_function)):
            raise ValueError("test function must be finite")
        for name, vec in (("joint", self.joint), ("site", self.site)):
            if vec.min() < 0:
                raise ValueError(f"{name} law has negative entries")
            total = vec.sum()
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"{name} law sums to {total!r}, not 1")
        self.joint = self.joint / self.joint.sum()
        self.site = self.site / self.site.sum()
        reference = tensor_power(self.site, self.copies)
        if self.joint[reference == 0.0].sum() > 0:
            raise ValueError(
                "joint law charges a state outside the product support; "
                "the relative entropy is infinite"
            )

    def reference(self) -> np.ndarray:
        return tensor_power(self.site, self.copies)

    def scaled_entropy(self) -> float:
        """KL(joint | site^N) / N by exact summation over the support."""
        reference = self.reference()
        mask = self.joint > 0
        kl = float(
            np.sum(self.joint[mask] * np.log(self.joint[mask] / reference[mask]))
        )
        return kl / self.copies


@dataclass(frozen=True)
class ChangeOfMeasureAudit:
    """Both sides of one change-of-measure comparison."""

    lhs: float
    rhs: float
    entropy: float
    log_moment: float  # (1/N) log sum q^N e^{N eta Phi}
    eta: float
    slack: float  # rhs + COM_TOL - lhs
    holds: bool


def change_of_measure_check(space: DiscreteSpace, eta: float) -> ChangeOfMeasureAudit:
    """Evaluate the inequality exactly; a negative slack would indicate a bug."""
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    reference = space.reference()
    if space.joint[reference == 0.0].sum() > 0:
        raise ValueError("infinite relative entropy: support violation")
    entropy = space.scaled_entropy()
    exponent = space.copies * eta * space.test_function
    shift = float(exponent.max())
    log_moment = (
        shift + math.log(float(np.sum(reference * np.exp(exponent - shift))))
    ) / space.copies
    lhs = float(np.sum(space.joint * space.test_function))
    rhs = (entropy + log_moment) / eta
    slack = rhs + COM_TOL - lhs
    return ChangeOfMeasureAudit(
        lhs=lhs,
        rhs=rhs,
        entropy=entropy,
        log_moment=log_moment,
        eta=eta,
        slack=slack,
        holds=slack >= 0.0,
    )


def random_instance(
    rng: np.random.Generator,
    max_size: int = 5,
    max_copies: int = 4,
    product_joint: bool = False,
) -> tuple[DiscreteSpace, float]:
    """Random (space, eta) pair for exhaustive-summation sweeps.

    Laws are kept fully supported so the entropy is always finite; with
    product_joint the joint is itself an i.i.d. product, the case where the
    inequality reduces to Jensen's.
    """
    size = int(rng.integers(2, max_size + 1))
    copies = int(rng.integers(1, max_copies + 1))
    site = rng.random(size) + 0.05
    site /= site.sum()
    if product_joint:
        one_site = rng.random(size) + 0.05
        joint = tensor_power(one_site / one_site.sum(), copies)
    else:
        joint = rng.random(size**copies) + 0.01
        joint /= joint.sum()
    phi = rng.uniform(-2.0, 2.0, size=size**copies)
    eta = float(2.0 ** rng.uniform(-4.0, 2.0))
    space = DiscreteSpace(
        size=size, copies=copies, joint=joint, site=site, test_function=phi
    )
    return space, eta


@dataclass(frozen=True)
class PsiFunction:
    """Centered pair function psi(z, v) = scale * (c*f(z) - c(z - v)).

    c is one scalar entry of the interaction kernel (a matrix entry or a
    drift component), so both c and its convolution against f are short
    trigonometric series and psi is evaluable in closed form at arbitrary
    points.  The centering integral against f vanishes identically because
    the convolution term is that integral.
    """

    dimension: int
    entry: tuple
    scale: float  # sqrt(eta)
    eta: float
    sup_norm: float
    centering_residual: float
    wavevecs: np.ndarray  # (m, d)
    cos_coeffs: np.ndarray  # kernel entry cosine coefficients
    sin_coeffs: np.ndarray
    const: float
    conv_cos: np.ndarray  # convolution-series coefficients
    conv_sin: np.ndarray
    conv_const: float

    @property
    def hypothesis_met(self) -> bool:
        return self.sup_norm < PSI_SUP_LIMIT

    def _point_shape(self, w: np.ndarray) -> tuple:
        """In one dimension any array shape is a batch of scalar points; in
        higher dimensions the last axis must carry the coordinates."""
        if self.dimension == 1:
            return w.shape
        if w.ndim == 0 or w.shape[-1] != self.dimension:
            raise ValueError(f"points must have last axis {self.dimension}")
        return w.shape[:-1]

    def _phases(self, w: np.ndarray) -> np.ndarray:
        w = np.mod(w, 1.0)
        if self.dimension == 1:
            return 2.0 * np.pi * w[..., np.newaxis] * self.wavevecs[:, 0]
        return 2.0 * np.pi * (w @ self.wavevecs.T)

    def kernel_entry_at(self, w) -> np.ndarray:
        """The scalar kernel entry c at torus points w."""
        w = np.asarray(w, dtype=float)
        shape = self._point_shape(w)
        if self.wavevecs.shape[0] == 0:
            return np.full(shape, self.const)
        phases = self._phases(w)
        return self.const + np.cos(phases) @ self.cos_coeffs + np.sin(phases) @ self.sin_coeffs

    def convolution_at(self, z) -> np.ndarray:
        """(c * f)(z) at arbitrary torus points, from the stored series."""
        z = np.asarray(z, dtype=float)
        shape = self._point_shape(z)
        if self.wavevecs.shape[0] == 0:
            return np.full(shape, self.conv_const)
        phases = self._phases(z)
        return self.conv_const + np.cos(phases) @ self.conv_cos + np.sin(phases) @ self.conv_sin

    def __call__(self, z, v) -> np.ndarray:
        """psi(z, v) with broadcasting between the two point sets."""
        z = np.asarray(z, dtype=float)
        v = np.asarray(v, dtype=float)
        return self.scale * (self.convolution_at(z) - self.kernel_entry_at(z - v))

    def scaled_to(self, sup_target: float) -> "PsiFunction":
        """Copy rescaled to a prescribed sup-norm (for negative controls)."""
        if self.sup_norm == 0.0:
            raise ValueError("cannot rescale an identically zero function")
        factor = sup_target / self.sup_norm
        scale = self.scale * factor
        return dataclasses.replace(
            self,
            scale=scale,
            eta=scale**2,
            sup_norm=sup_target,
            centering_residual=self.centering_residual * abs(factor),
        )


def _entry_series(field: KernelField, entry) -> tuple[tuple, float, np.ndarray, np.ndarray]:
    """Trig-series coefficients of one scalar kernel entry.

    entry = (alpha, beta) selects the matrix entry a_ab (a cosine series plus
    a constant on the diagonal); entry = alpha selects the drift component
    div(a)_alpha (a sine series).
    """
    d = field.dimension
    if isinstance(entry, (tuple, list)):
        alpha, beta = (int(i) for i in entry)
        if not (0 <= alpha < d and 0 <= beta < d):
            raise ValueError(f"matrix entry {entry} out of range for dimension {d}")
        const = field.spec.base_level if alpha == beta else 0.0
        cos_coeffs = field.amplitudes[:, alpha, beta].copy()
        sin_coeffs = np.zeros_like(cos_coeffs)
        return ("a", alpha, beta), const, cos_coeffs, sin_coeffs
    alpha = int(entry)
    if not 0 <= alpha < d:
        raise ValueError(f"drift component {alpha} out of range for dimension {d}")
    sin_coeffs = field.div_coeffs[:, alpha].copy()
    cos_coeffs = np.zeros_like(sin_coeffs)
    return ("b", alpha), 0.0, cos_coeffs, sin_coeffs


def _scan_points(dimension: int, max_wavenumber: int) -> np.ndarray:
    per_axis = {1: 8192, 2: 512, 3: 96}[dimension]
    per_axis = max(per_axis, 8 * max(max_wavenumber, 1))
    axis = np.arange(per_axis) / per_axis
    if dimension == 1:
        return axis
    mesh = np.meshgrid(*([axis] * dimension), indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, dimension)


def build_psi(
    field: KernelField, f: DensityField, entry, eta_max: float = 1.0
) -> PsiFunction:
    """Construct the centered pair function for one kernel entry.

    The scale sqrt(eta) is chosen with eta the largest power of two not
    exceeding eta_max for which the sup-norm stays below 1/(2e) by a fixed
    margin; dyadic values keep the choice reproducible across platforms.
    Sup-norms split over the two arguments (z - v sweeps the whole torus for
    any fixed z), so they reduce to extrema of two short trig series, read
    off a dense scan.
    """
    if field.dimension != f.grid.dimension:
        raise ValueError("kernel and density dimensions differ")
    if abs(f.mass() - 1.0) > 1e-8:
        raise ValueError(f"density mass {f.mass()!r} is not 1")
    if not 0 < eta_max <= 1.0:
        raise ValueError("eta_max must lie in (0, 1]")
    entry_key, const, cos_coeffs, sin_coeffs = _entry_series(field, entry)

    # exact Fourier pairing: int cos(2 pi k (z-v)) f(v) dv = Re e^{2 pi i k z} f_k
    spectrum = f.fourier()
    n = f.grid.n
    m = field.n_modes
    conv_cos = np.zeros(m)
    conv_sin = np.zeros(m)
    for idx in range(m):
        k = tuple(int(round(ki)) % n for ki in field.wavevecs[idx])
        fk = spectrum[k]
        conv_cos[idx] = cos_coeffs[idx] * fk.real + sin_coeffs[idx] * fk.imag
        conv_sin[idx] = sin_coeffs[idx] * fk.real - cos_coeffs[idx] * fk.imag
    conv_const = const  # the mean of f is 1

    probe = PsiFunction(
        dimension=field.dimension,
        entry=entry_key,
        scale=1.0,
        eta=1.0,
        sup_norm=0.0,
        centering_residual=0.0,
        wavevecs=field.wavevecs.copy(),
        cos_coeffs=cos_coeffs,
        sin_coeffs=sin_coeffs,
        const=const,
        conv_cos=conv_cos,
        conv_sin=conv_sin,
        conv_const=conv_const,
    )
    pts = _scan_points(field.dimension, field.max_wavenumber)
    conv_vals = probe.convolution_at(pts)
    entry_vals = probe.kernel_entry_at(pts)
    base_sup = max(
        float(conv_vals.max() - entry_vals.min()),
        float(entry_vals.max() - conv_vals.min()),
        0.0,
    )

    eta = 2.0 ** math.floor(math.log2(eta_max))
    while base_sup > 0.0 and math.sqrt(eta) * base_sup >= PSI_SUP_LIMIT - PSI_SUP_MARGIN:
        eta /= 2.0
    scale = math.sqrt(eta)

    residual = _centering_residual(probe, f) * scale
    return dataclasses.replace(
        probe,
        scale=scale,
        eta=eta,
        sup_norm=scale * base_sup,
        centering_residual=residual,
    )


def _centering_residual(psi: PsiFunction, f: DensityField) -> float:
    """max_z |sum_v psi(z, v) f(v) h^d| by literal grid quadrature.

    Independent of the Fourier identity used to build the convolution
    series, so it cross-checks the construction rather than restating it.
    """
    grid = f.grid
    nodes = grid.points().reshape(-1, grid.dimension)
    weights = f.values.reshape(-1) * grid.cell_volume
    stride = max(1, nodes.shape[0] // 64)
    z_nodes = nodes[::stride]
    if grid.dimension == 1:
        z_nodes = z_nodes[:, 0]
        diff = z_nodes[:, None] - nodes[None, :, 0]
    else:
        diff = z_nodes[:, None, :] - nodes[None, :, :]
    conv = psi.convolution_at(z_nodes)
    quad = psi.kernel_entry_at(diff) @ weights
    return float(np.abs(conv - quad).max())


@dataclass(frozen=True)
class ExpMomentRow:
    """Monte Carlo estimate of E exp(X^2) at one coordinate count."""

    n_copies: int
    estimate: float
    std_error: float
    n_samples: int


@dataclass(frozen=True)
class ExpMomentReport:
    rows: tuple
    sup_norm: float
    hypothesis_met: bool
    no_growth_trend: bool
    trend_slack: float
    all_at_least_one: bool


class _GridSampler:
    """Exact inverse-CDF sampling of the piecewise-linear interpolant of a
    one-dimensional grid density."""

    def __init__(self, f: DensityField):
        if f.grid.dimension != 1:
            raise ValueError("sampling is implemented for one-dimensional densities")
        vals = np.clip(f.values, 0.0, None)
        if f.values.min() < -1e-9:
            raise ValueError(f"density minimum {f.values.min()!r} is negative")
        self.n = f.grid.n
        self.left = vals
        self.right = np.roll(vals, -1)
        increments = (self.left + self.right) / (2.0 * self.n)
        self.cdf = np.concatenate(([0.0], np.cumsum(increments)))
        self.total = self.cdf[-1]

    def sample(self, uniforms: np.ndarray) -> np.ndarray:
        u = uniforms * self.total
        seg = np.clip(np.searchsorted(self.cdf, u, side="right") - 1, 0, self.n - 1)
        y = (u - self.cdf[seg]) * self.n
        fl = self.left[seg]
        df = self.right[seg] - fl
        # stable root of df/2 t^2 + fl t = y on [0, 1]
        disc = np.sqrt(np.clip(fl**2 + 2.0 * df * y, 0.0, None))
        t = np.where(disc + fl > 0.0, 2.0 * y / (disc + fl), 0.0)
        return np.mod((seg + np.clip(t, 0.0, 1.0)) / self.n, 1.0)


def exp_moment_check(
    psi: PsiFunction,
    f: DensityField,
    ladder,
    samples: int,
    master_seed: int = 0,
) -> ExpMomentReport:
    """Estimate E exp(((1/sqrt N) sum_j psi(v1, vj))^2) along a ladder of N.

    Coordinates are i.i.d. with law f and the sum includes j = 1, whose
    summand psi(v1, v1) is the one term the centering does not kill; it is
    O(1/sqrt N) inside X and vanishes from the limit.  Streams are keyed by
    (seed, N, block), with a fixed block size, so estimates do not depend on
    chunking.  Overflowing exponentials are reported as inf rather than
    raised: they can only occur when the sup-norm hypothesis is broken,
    which is exactly the negative-control mode.
    """
    ladder = tuple(int(n) for n in ladder)
    if len(ladder) < 1 or any(n < 1 for n in ladder):
        raise ValueError("ladder must list positive coordinate counts")
    if list(ladder) != sorted(set(ladder)):
        raise ValueError("ladder must be strictly increasing")
    if samples < 2:
        raise ValueError("need at least 2 samples")
    sampler = _GridSampler(f)
    rows = []
    for n_copies in ladder:
        acc = 0.0
        acc_sq = 0.0
        done = 0
        block_idx = 0
        while done < samples:
            count = min(SAMPLE_BLOCK, samples - done)
            rng = np.random.default_rng(
                np.random.SeedSequence((master_seed, n_copies, block_idx))
            )
            positions = sampler.sample(rng.random((count, n_copies)))
            z = positions[:, 0]
            values = psi(z[:, None], positions)
            x = values.sum(axis=1) / math.sqrt(n_copies)
            with np.errstate(over="ignore"):
                y = np.exp(x**2)
            acc += float(y.sum())
            acc_sq += float((y**2).sum())
            done += count
            block_idx += 1
        mean = acc / samples
        if math.isfinite(mean) and math.isfinite(acc_sq):
            var = max(acc_sq - samples * mean**2, 0.0) / (samples - 1)
            se = math.sqrt(var / samples)
        else:
            se = math.inf
        rows.append(
            ExpMomentRow(
                n_copies=n_copies, estimate=mean, std_error=se, n_samples=samples
            )
        )

    first, last = rows[0], rows[-1]
    if math.isfinite(last.estimate) and math.isfinite(first.estimate):
        comparison_se = math.hypot(last.std_error, 2.0 * first.std_error)
        trend_slack = 2.0 * first.estimate + 5.0 * comparison_se - last.estimate
        no_growth = trend_slack >= 0.0
    else:
        trend_slack = -math.inf
        no_growth = False
    at_least_one = all(
        row.estimate >= 1.0 - 3.0 * row.std_error for row in rows
    )
    return ExpMomentReport(
        rows=tuple(rows),
        sup_norm=psi.sup_norm,
        hypothesis_met=psi.hypothesis_met,
        no_growth_trend=no_growth,
        trend_slack=trend_slack,
        all_at_least_one=at_least_one,
    )

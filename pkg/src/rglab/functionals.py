"""Wick-ordered local functionals and the discrete scale map acting on them.

The scale map sends F to the fluctuation average of F(zeta + dilated field).
Integrated Wick monomials are its eigenfunctions up to the volume change:
the map multiplies them by L^(d - m*phi_dim - n) and shrinks the region by
L.  Both an exact path (polynomial algebra on the ordering variance) and a
Monte Carlo path (lattice sampling) are provided, and the two are checked
against each other.

Lattice convention: a field argument of the map lives on a grid whose
spacing is 1/L times the spacing of the fluctuation grid.  Site index i at
spacing a/L sits at position (i*a)/L, exactly where the dilated field is
read off on the spacing-a grid, so the dilation is an index-preserving
relabeling and the eigenfunction identity holds without discretization
error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .kernels import CovarianceKernel, FieldDimension
from .fields import (
    LatticeField,
    LatticeGrid,
    multiscale_assemble,
    sample_gaussian,
)

__all__ = [
    "wick_order",
    "wick_eval",
    "reorder_wick",
    "gaussian_convolve_plain",
    "plain_to_wick",
    "wick_to_plain",
    "Region",
    "WickMonomial",
    "LocalPotential",
    "ScalingClass",
    "classify",
    "CovarianceSplit",
    "DecompositionError",
    "gradient_ordering_constant",
    "apply_TL_analytic",
    "apply_TL_mc",
    "MCEstimate",
    "semigroup_check",
    "SemigroupReport",
    "invariance_check",
    "InvarianceReport",
    "contraction_check",
    "CharacteristicFunctional",
]

MARGINAL_TOL = 1e-12


# ---------------------------------------------------------------------------
# Wick polynomials in one variable


def wick_order(m: int, variance: float) -> np.ndarray:
    """Plain-power coefficients (ascending) of the Wick monomial :phi^m: at the given variance.

    Defined by the recursion :phi^m: = phi * :phi^(m-1): - (m-1) * variance * :phi^(m-2):
    with :phi^0: = 1, which makes the Gaussian expectation of :phi^m: vanish
    for every m >= 1.
    """
    if m < 0 or int(m) != m:
        raise ValueError("monomial degree must be a nonnegative integer")
    if variance < 0:
        raise ValueError("ordering variance must be nonnegative")
    prev = np.array([1.0])
    if m == 0:
        return prev
    cur = np.array([0.0, 1.0])
    for k in range(1, m):
        nxt = np.zeros(k + 2)
        nxt[1:] = cur
        nxt[: k] -= k * variance * prev
        prev, cur = cur, nxt
    return cur


def wick_eval(coeffs: np.ndarray, x):
    """Evaluate an ascending-coefficient polynomial (vectorized)."""
    return np.polynomial.polynomial.polyval(np.asarray(x, dtype=float), coeffs)


def wick_to_plain(wick_coeffs: Sequence[float], variance: float) -> np.ndarray:
    """Plain-power coefficients of sum_k a_k :phi^k: at the given ordering variance."""
    wick_coeffs = np.asarray(wick_coeffs, dtype=float)
    out = np.zeros(len(wick_coeffs))
    for k, a in enumerate(wick_coeffs):
        if a == 0.0:
            continue
        col = wick_order(k, variance)
        out[: len(col)] += a * col
    return out


def plain_to_wick(plain_coeffs: Sequence[float], variance: float) -> np.ndarray:
    """Invert wick_to_plain by back-substitution from the top degree."""
    residual = np.array(plain_coeffs, dtype=float)
    out = np.zeros_like(residual)
    for k in range(len(residual) - 1, -1, -1):
        a = residual[k]
        out[k] = a
        if a != 0.0:
            col = wick_order(k, variance)
            residual[: len(col)] -= a * col
    return out


def reorder_wick(wick_coeffs: Sequence[float], c1: float, c2: float) -> np.ndarray:
    """Re-express a polynomial given in the Wick basis at variance c1 in the basis at c2."""
    return plain_to_wick(wick_to_plain(wick_coeffs, c1), c2)


def gaussian_convolve_plain(plain_coeffs: Sequence[float], gamma: float) -> np.ndarray:
    """Average a plain polynomial over a mean-zero Gaussian shift of variance gamma.

    E[(phi + zeta)^j] expands through the even moments (i-1)!! gamma^(i/2);
    averaging a Wick polynomial this way lowers its ordering variance by
    gamma, which is the identity the analytic scale map rests on.
    """
    plain_coeffs = np.asarray(plain_coeffs, dtype=float)
    out = np.zeros_like(plain_coeffs)
    for j, cj in enumerate(plain_coeffs):
        if cj == 0.0:
            continue
        for i in range(0, j + 1, 2):
            moment = math.prod(range(1, i, 2)) * gamma ** (i // 2) if i else 1.0
            out[j - i] += cj * math.comb(j, i) * moment
    return out


# ---------------------------------------------------------------------------
# regions and local functionals


@dataclass(frozen=True)
class Region:
    """Subset of lattice sites carrying the grid geometry of its ambient torus."""

    grid: LatticeGrid
    sites: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        if len(self.sites) != self.grid.d:
            raise ValueError("need one index array per axis")
        sites = tuple(np.ascontiguousarray(np.asarray(s, dtype=np.intp)) for s in self.sites)
        n = len(sites[0])
        if any(len(s) != n for s in sites):
            raise ValueError("index arrays must have equal length")
        object.__setattr__(self, "sites", sites)

    @classmethod
    def box(cls, grid: LatticeGrid, lo: Sequence[int], hi: Sequence[int]) -> "Region":
        """Half-open box [lo, hi) of lattice sites."""
        ranges = [np.arange(int(a), int(b)) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*ranges, indexing="ij")
        return cls(grid, tuple(m.reshape(-1) % grid.extent for m in mesh))

    @property
    def n_sites(self) -> int:
        return len(self.sites[0])

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume

    def scaled(self, L: float) -> "Region":
        """Same site indices on the grid contracted by L (spacing divided by L)."""
        new_grid = LatticeGrid(self.grid.d, self.grid.extent, self.grid.spacing / L)
        return Region(new_grid, self.sites)

    def values_at(self, fields: np.ndarray) -> np.ndarray:
        """Field values at the region's sites; fields may carry leading batch axes."""
        idx = (Ellipsis,) + self.sites
        return fields[idx]


def _forward_gradient_sq(fields: np.ndarray, region: Region) -> np.ndarray:
    """Sum over axes of the squared forward difference, evaluated at region sites."""
    d = region.grid.d
    h = region.grid.spacing
    axes = tuple(range(fields.ndim - d, fields.ndim))
    total = None
    for k, ax in enumerate(axes):
        diff = (np.roll(fields, -1, axis=ax) - fields) / h
        vals = region.values_at(diff)
        total = vals * vals if total is None else total + vals * vals
    return total


@dataclass(frozen=True)
class WickMonomial:
    """Integrated local monomial: the Riemann sum of :phi^m: (or :|grad phi|^2:) over a region.

    For n_derivs = 0 the ordering variance is the single-site variance of
    the ordering covariance; for n_derivs = 2 (which requires m = 2) it is
    the lattice expectation of |grad phi|^2 under that covariance at the
    region's spacing.
    """

    m: int
    n_derivs: int
    ordering_variance: float
    region: Region

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("need at least one field power")
        if self.n_derivs not in (0, 2):
            raise ValueError("derivative count must be 0 or 2")
        if self.n_derivs == 2 and self.m != 2:
            raise ValueError("the derivative monomial is carried only as :|grad phi|^2:")
        if self.ordering_variance < 0:
            raise ValueError("ordering variance must be nonnegative")

    def evaluate_batch(self, fields: np.ndarray) -> np.ndarray:
        vol = self.region.cell_volume
        if self.n_derivs == 0:
            coeffs = wick_order(self.m, self.ordering_variance)
            vals = wick_eval(coeffs, self.region.values_at(fields))
        else:
            vals = _forward_gradient_sq(fields, self.region) - self.ordering_variance
        return vol * np.sum(vals, axis=-1)

    def __call__(self, fields: np.ndarray) -> np.ndarray:
        return self.evaluate_batch(fields)


@dataclass(frozen=True)
class LocalPotential:
    """Local potential xi :|grad phi|^2: + g :phi^4: + mu :phi^2: summed over a region.

    Additivity over regions with disjoint interiors is exact because the
    value is a plain sum over sites (and intra-region bonds for the
    gradient term).  Ordering constants default to zero, i.e. plain
    monomials.
    """

    xi: float
    g: float
    mu: float
    phi_variance: float = 0.0
    grad_constant: float = 0.0

    def __post_init__(self) -> None:
        if self.g < 0:
            raise ValueError("quartic coupling must be nonnegative")

    def evaluate_batch(self, fields: np.ndarray, region: Region) -> np.ndarray:
        vol = region.cell_volume
        phi = region.values_at(fields)
        c = self.phi_variance
        total = self.mu * (phi * phi - c)
        total = total + self.g * (phi ** 4 - 6.0 * c * phi * phi + 3.0 * c * c)
        out = np.sum(total, axis=-1)
        if self.xi != 0.0:
            grad = _forward_gradient_sq(fields, region) - self.grad_constant
            out = out + self.xi * np.sum(grad, axis=-1)
        return vol * out

    def rescaled(self, L: float, dim: FieldDimension) -> "LocalPotential":
        """Couplings of the dilated potential read on the contracted grid."""
        d, p = dim.d, dim.phi_dim
        return LocalPotential(
            xi=self.xi * L ** (d - 2 * p - 2),
            g=self.g * L ** (d - 4 * p),
            mu=self.mu * L ** (d - 2 * p),
            phi_variance=self.phi_variance * L ** (2 * p),
            grad_constant=self.grad_constant * L ** (2 * p + 2),
        )


# ---------------------------------------------------------------------------
# scaling classification


@dataclass(frozen=True)
class ScalingClass:
    exponent: float
    label: str


def classify(m: int, n_derivs: int, dim: FieldDimension) -> ScalingClass:
    """Scaling exponent d - m*phi_dim - n and its sign class."""
    exponent = dim.d - m * dim.phi_dim - n_derivs
    if abs(exponent) <= MARGINAL_TOL:
        label = "marginal"
    elif exponent > 0:
        label = "relevant"
    else:
        label = "irrelevant"
    return ScalingClass(float(exponent), label)


# ---------------------------------------------------------------------------
# the covariance split backing the analytic path


class DecompositionError(RuntimeError):
    pass


def gradient_ordering_constant(kernel: CovarianceKernel, grid: LatticeGrid) -> float:
    """Lattice expectation of |grad phi|^2 for forward differences at the grid spacing."""
    h = grid.spacing
    return 2.0 * grid.d * (kernel.at(0.0) - kernel.at(h)) / h ** 2


@dataclass(frozen=True)
class CovarianceSplit:
    """A unit-cutoff kernel with its fluctuation part at scale L."""

    C: CovarianceKernel
    fluctuation: CovarianceKernel
    L: float

    def __post_init__(self) -> None:
        if self.C.kind != "unit_cutoff":
            raise ValueError("C must be the unit-cutoff kernel")
        if self.fluctuation.kind not in ("fluctuation", "rescaled_fluctuation"):
            raise ValueError("fluctuation kernel required")
        if self.C.dim != self.fluctuation.dim:
            raise ValueError("kernels carry different field dimensions")
        if self.fluctuation.L is None or abs(self.fluctuation.L - self.L) > 1e-12 * self.L:
            raise ValueError("fluctuation kernel scale does not match L")

    @property
    def dim(self) -> FieldDimension:
        return self.C.dim

    def residual(self, radii) -> float:
        radii = np.asarray(radii, dtype=float)
        res = self.C.at(radii) - self.fluctuation.at(radii) \
            - self.L ** (-self.C.beta) * self.C.at(radii / self.L)
        return float(np.max(np.abs(res)))

    def require_tight(self, radii, tol: float = 1e-10) -> None:
        res = self.residual(radii)
        if res > tol:
            raise DecompositionError(
                f"covariance split residual {res:.3e} exceeds {tol:.1e}; "
                "the eigenfunction identity depends on the split"
            )


# ---------------------------------------------------------------------------
# analytic scale map


def apply_TL_analytic(
    P: WickMonomial, L: float, split: CovarianceSplit, tol: float = 1e-10
) -> tuple[float, WickMonomial]:
    """Exact action of the scale map on an integrated Wick monomial.

    Returns the volume-scaling prefactor L^(d - m*phi_dim - n) and the
    monomial on the contracted region, re-ordered with respect to the full
    covariance.  The two steps (fluctuation average lowering the ordering
    variance, dilation restoring it) are verified numerically against the
    split before the prefactor is trusted.
    """
    dim = split.dim
    if P.region.grid.d != dim.d:
        raise ValueError("monomial region dimension does not match the split")
    a = P.region.grid.spacing
    split.require_tight(np.array([0.0, a, a / L, 1.0, float(L)]), tol)

    c0 = split.C.at(0.0)
    lam_beta = float(L) ** (-dim.beta)
    if P.n_derivs == 0:
        if abs(P.ordering_variance - c0) > tol * max(1.0, abs(c0)):
            raise ValueError("monomial is not ordered with respect to the full covariance")
        gamma = split.fluctuation.at(0.0)
        # fluctuation average: ordering variance drops by gamma
        conv = gaussian_convolve_plain(wick_order(P.m, c0), gamma)
        expected = wick_order(P.m, c0 - gamma)
        if not np.allclose(conv, expected, rtol=1e-10, atol=1e-12 * max(1.0, abs(c0)) ** P.m):
            raise DecompositionError("Gaussian-average reordering check failed")
        # dilation: variance scales back up by L^(2*phi_dim)
        restored = (c0 - gamma) / lam_beta
        if abs(restored - c0) > tol * max(1.0, abs(c0)):
            raise DecompositionError(
                f"ordering variance after the map is {restored!r}, expected {c0!r}"
            )
        target_variance = c0
    else:
        g_c = gradient_ordering_constant(split.C, P.region.grid)
        if abs(P.ordering_variance - g_c) > tol * max(1.0, abs(g_c)):
            raise ValueError("gradient monomial is not ordered with respect to the full covariance")
        g_gamma = gradient_ordering_constant(split.fluctuation, P.region.grid)
        contracted = P.region.scaled(L)
        target_variance = gradient_ordering_constant(split.C, contracted.grid)
        restored = (g_c - g_gamma) / (lam_beta / L ** 2)
        if abs(restored - target_variance) > tol * max(1.0, abs(target_variance)):
            raise DecompositionError("gradient ordering constant does not transport across the split")

    exponent = dim.d - P.m * dim.phi_dim - P.n_derivs
    factor = float(L) ** exponent
    transformed = WickMonomial(
        m=P.m,
        n_derivs=P.n_derivs,
        ordering_variance=float(target_variance),
        region=P.region.scaled(L),
    )
    return factor, transformed


# ---------------------------------------------------------------------------
# Monte Carlo scale map


@dataclass(frozen=True)
class MCEstimate:
    mean: complex | float
    stderr: float
    count: int

    def z_against(self, reference: complex | float, ref_stderr: float = 0.0) -> float:
        se = math.hypot(self.stderr, ref_stderr)
        if se == 0.0:
            return 0.0 if self.mean == reference else math.inf
        diff = self.mean - reference
        if isinstance(diff, complex):
            return max(abs(diff.real), abs(diff.imag)) / se
        return abs(diff) / se


def _evaluate_functional(F, fields: np.ndarray) -> np.ndarray:
    if hasattr(F, "evaluate_batch"):
        return F.evaluate_batch(fields)
    return np.array([F(f) for f in fields])


def _mc_stats(samples: np.ndarray) -> MCEstimate:
    n = len(samples)
    mean = np.mean(samples)
    if np.iscomplexobj(samples):
        var = np.var(samples.real, ddof=1) + np.var(samples.imag, ddof=1)
        return MCEstimate(complex(mean), float(np.sqrt(var / n)), n)
    return MCEstimate(float(mean), float(np.std(samples, ddof=1) / np.sqrt(n)), n)


def _scaled_argument(
    phi: LatticeField | None, L: float, grid: LatticeGrid, phi_dim: float
) -> np.ndarray | float:
    """Values of the dilated field on the fluctuation grid (0 when phi is None)."""
    if phi is None:
        return 0.0
    if phi.grid.d != grid.d or phi.grid.extent != grid.extent:
        raise ValueError("field argument must match the fluctuation grid extent")
    ratio = grid.spacing / phi.grid.spacing
    if abs(ratio - L) > 1e-9 * L:
        raise ValueError(
            "dilation is not grid-representable: the field argument must live at "
            f"spacing {grid.spacing}/L; admissible L for this pair is {ratio!r}"
        )
    return phi.values * L ** (-phi_dim)


def apply_TL_mc(
    F,
    L: float,
    fluctuation: CovarianceKernel,
    grid: LatticeGrid,
    seed: int,
    count: int,
    phi: LatticeField | None = None,
) -> MCEstimate:
    """Monte Carlo estimate of the scale map: average of F(zeta + dilated phi)."""
    psi = _scaled_argument(phi, L, grid, fluctuation.dim.phi_dim)
    ensemble = sample_gaussian(fluctuation, grid, seed, count)
    samples = _evaluate_functional(F, ensemble.values + psi)
    return _mc_stats(samples)


@dataclass(frozen=True)
class CharacteristicFunctional:
    """F(phi) = exp(i t phi(x0)), whose Gaussian average is available in closed form."""

    t: float
    site: tuple[int, ...]

    def evaluate_batch(self, fields: np.ndarray) -> np.ndarray:
        idx = (Ellipsis,) + tuple(int(s) for s in self.site)
        return np.exp(1j * self.t * fields[idx])


# ---------------------------------------------------------------------------
# semigroup, invariance and contraction checks


@dataclass(frozen=True)
class SemigroupReport:
    composite: MCEstimate | float
    direct: MCEstimate | float
    z: float
    exact: bool


def semigroup_check(
    F,
    u,
    dim: FieldDimension,
    L: float,
    n: int,
    grid: LatticeGrid,
    seeds: tuple[int, int, int],
    count: int,
    phi: LatticeField | None = None,
) -> SemigroupReport:
    """Compare the composed maps at scales (L, L^n) with the single map at L^(n+1).

    For Wick monomials the check is exact exponent arithmetic; otherwise the
    two sides are independent Monte Carlo estimates whose discrepancy is
    reported in combined standard errors.
    """
    from .kernels import fluctuation_covariance

    if isinstance(F, WickMonomial):
        e = dim.d - F.m * dim.phi_dim - F.n_derivs
        composite = float(L) ** e * float(L ** n) ** e
        direct = float(L ** (n + 1)) ** e
        z = 0.0 if math.isclose(composite, direct, rel_tol=1e-12) else math.inf
        return SemigroupReport(composite, direct, z, exact=True)

    if n < 1:
        raise ValueError("need n >= 1 for a nontrivial composition")
    Ln = float(L) ** n
    inner_grid = grid
    outer_grid = LatticeGrid(grid.d, grid.extent, grid.spacing / Ln)
    gamma_inner = fluctuation_covariance(u, dim, Ln)
    gamma_outer = fluctuation_covariance(u, dim, L)
    gamma_direct = fluctuation_covariance(u, dim, float(L) ** (n + 1))
    for g, k in ((inner_grid, gamma_inner), (outer_grid, gamma_outer), (inner_grid, gamma_direct)):
        if not g.fits_kernel(k.range):
            raise ValueError(
                f"grid period {g.period} cannot hold a kernel of range {k.range}"
            )
    psi = _scaled_argument(phi, float(L) ** (n + 1), inner_grid, dim.phi_dim)
    inner = sample_gaussian(gamma_inner, inner_grid, seeds[0], count)
    outer = sample_gaussian(gamma_outer, outer_grid, seeds[1], count)
    combined = inner.values + Ln ** (-dim.phi_dim) * outer.values + psi
    composite = _mc_stats(_evaluate_functional(F, combined))
    direct_samples = sample_gaussian(gamma_direct, inner_grid, seeds[2], count)
    direct = _mc_stats(_evaluate_functional(F, direct_samples.values + psi))
    z = composite.z_against(direct.mean, direct.stderr)
    return SemigroupReport(composite, direct, z, exact=False)


def _multiscale_field(u, dim, L, grid, seed, count, n_scales):
    """Samples of the partial multiscale sum (scales 0..n_scales) on the grid."""
    from .kernels import rescaled_fluctuation

    ensembles = []
    for k in range(n_scales + 1):
        kern = rescaled_fluctuation(u, dim, L, k)
        if not grid.fits_kernel(kern.range):
            raise ValueError(
                f"grid period {grid.period} cannot hold scale index {k} "
                f"(range {kern.range}); reduce n_scales or enlarge the grid"
            )
        ensembles.append(sample_gaussian(kern, grid, seed, count, scale_index=k))
        seed = seed + 1
    return multiscale_assemble(ensembles)


@dataclass(frozen=True)
class InvarianceReport:
    lhs: MCEstimate
    rhs: MCEstimate
    z: float
    truncation_scales: int


def invariance_check(
    F,
    u,
    dim: FieldDimension,
    L: float,
    grid: LatticeGrid,
    seed: int,
    count: int,
    n_scales: int,
) -> InvarianceReport:
    """Full-measure invariance: average of the mapped functional against the plain average.

    The infinite-range covariance cannot be periodized exactly, so the
    stationary measure is approximated by the finite multiscale partial sum
    through scale index n_scales; the truncation bias decays geometrically
    like L^(-2*phi_dim*(n_scales+1)) and must be kept below the statistical
    resolution by the caller's choice of n_scales.
    """
    from .kernels import fluctuation_covariance

    small_grid = LatticeGrid(grid.d, grid.extent, grid.spacing / L)
    phi_small = _multiscale_field(u, dim, L, small_grid, seed + 100, count, n_scales)
    gamma = fluctuation_covariance(u, dim, L)
    if not grid.fits_kernel(gamma.range):
        raise ValueError("grid too small for the fluctuation kernel")
    zeta = sample_gaussian(gamma, grid, seed, count)
    lhs_fields = zeta.values + float(L) ** (-dim.phi_dim) * phi_small.values
    lhs = _mc_stats(_evaluate_functional(F, lhs_fields))
    phi_big = _multiscale_field(u, dim, L, grid, seed + 500, count, n_scales)
    rhs = _mc_stats(_evaluate_functional(F, phi_big.values))
    z = lhs.z_against(rhs.mean, rhs.stderr)
    return InvarianceReport(lhs, rhs, z, n_scales)


def contraction_check(
    F,
    u,
    dim: FieldDimension,
    L: float,
    grid: LatticeGrid,
    seed: int,
    count: int,
    inner_count: int,
    n_scales: int,
) -> tuple[MCEstimate, MCEstimate, float]:
    """One-sided L^2 contraction test: E|T F|^2 <= E|F|^2 under the stationary measure.

    The squared inner mean is debiased by the inner-sample variance so the
    left side is an unbiased estimator of |T F|^2.
    """
    from .kernels import fluctuation_covariance

    small_grid = LatticeGrid(grid.d, grid.extent, grid.spacing / L)
    phi_small = _multiscale_field(u, dim, L, small_grid, seed + 100, count, n_scales)
    gamma = fluctuation_covariance(u, dim, L)
    lam = float(L) ** (-dim.phi_dim)
    estimates = np.empty(count)
    for i in range(count):
        zeta = sample_gaussian(gamma, grid, seed + 10_000 + i, inner_count)
        vals = _evaluate_functional(F, zeta.values + lam * phi_small.values[i])
        mean = np.mean(vals)
        var = np.var(vals, ddof=1) / inner_count
        estimates[i] = abs(mean) ** 2 - var
    lhs = _mc_stats(estimates)
    phi_big = _multiscale_field(u, dim, L, grid, seed + 500, count, n_scales)
    rhs_vals = np.abs(_evaluate_functional(F, phi_big.values)) ** 2
    rhs = _mc_stats(rhs_vals)
    margin = (lhs.mean - rhs.mean) / math.hypot(lhs.stderr, rhs.stderr)
    return lhs, rhs, float(margin)

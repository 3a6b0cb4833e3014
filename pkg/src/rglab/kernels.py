"""Finite-range mollifiers and the multiscale decomposition of a cutoff covariance.

A mollifier of range 1 is built as the self-convolution of a compactly
supported radial bump. The unit-cutoff covariance, its finite-range
fluctuation part, and all dilations are then radial tables obtained from
exact piecewise integrals of the tabulated mollifier spline, so the
splitting identity

    C(x) = Gamma_L(x) + L^(-2*phi_dim) * C(x/L)

holds to roundoff rather than to a quadrature tolerance.  Kernels are
immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "TABLE_MARGIN",
    "TOL_PD_FACTOR",
    "FieldDimension",
    "MollifierU",
    "CovarianceKernel",
    "PositiveDefiniteReport",
    "bump_profile",
    "build_mollifier",
    "unit_cutoff_covariance",
    "fluctuation_covariance",
    "scale_kernel",
    "rescaled_fluctuation",
    "verify_scaling_decomposition",
    "radial_grid",
    "min_gram_eigenvalue",
    "check_positive_definite",
    "kernel_to_csv",
    "kernel_from_csv",
]

# Tables extend 5% past the declared range; entries beyond the range are exact zeros.
TABLE_MARGIN = 1.05
# Positive-definiteness noise floor, relative to the Gram trace.
TOL_PD_FACTOR = 1e-10


@dataclass(frozen=True)
class FieldDimension:
    """Spatial dimension together with the scaling dimension of the field."""

    d: int
    phi_dim: float

    def __post_init__(self) -> None:
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"spatial dimension must be a positive integer, got {self.d}")
        if not self.phi_dim > 0:
            raise ValueError(f"phi_dim must be positive, got {self.phi_dim}")

    @classmethod
    def from_alpha(cls, d: int, alpha: float) -> "FieldDimension":
        """Dimension pair with phi_dim = (d - alpha)/2, 0 < alpha <= 2."""
        if not 0 < alpha <= 2:
            raise ValueError(f"alpha must lie in (0, 2], got {alpha}")
        return cls(d, (d - alpha) / 2.0)

    @classmethod
    def canonical(cls, d: int) -> "FieldDimension":
        """Massless free-field value phi_dim = (d - 2)/2 (requires d > 2)."""
        if d <= 2:
            raise ValueError("canonical dimension is positive only for d > 2")
        return cls(d, (d - 2) / 2.0)

    @classmethod
    def epsilon_model(cls, epsilon: float) -> "FieldDimension":
        """d = 3 with phi_dim = (3 - epsilon)/4, the weakly non-Gaussian setting."""
        if not 0 < epsilon < 3:
            raise ValueError(f"epsilon must lie in (0, 3), got {epsilon}")
        return cls(3, (3.0 - epsilon) / 4.0)

    @property
    def beta(self) -> float:
        """Decay exponent 2*phi_dim of the covariance scaling."""
        return 2.0 * self.phi_dim


def bump_profile(r):
    """Default mollifier seed (1/4 - r^2)_+^4, a C^3 radial bump of range 1/2."""
    r = np.asarray(r, dtype=float)
    inside = np.abs(r) < 0.5
    vals = np.where(inside, (0.25 - r * r) ** 4, 0.0)
    if vals.ndim == 0:
        return float(vals)
    return vals


def radial_grid(range_: float, step: float) -> np.ndarray:
    """Uniform radial table nodes on [0, TABLE_MARGIN * range_]."""
    if step <= 0:
        raise ValueError("grid step must be positive")
    n = int(math.ceil(TABLE_MARGIN * range_ / step)) + 1
    return step * np.arange(n + 1, dtype=float)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


def _fingerprint(r: np.ndarray, values: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(r.tobytes())
    h.update(values.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class MollifierU:
    """Radial table of a positive definite mollifier of finite range.

    The profile vanishes identically for r >= range; within the table it is
    evaluated by a clamped cubic spline.
    """

    r: np.ndarray
    values: np.ndarray
    range: float
    d: int
    smoothness_order: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "r", _readonly(self.r))
        object.__setattr__(self, "values", _readonly(self.values))
        spline = CubicSpline(self.r, self.values, bc_type=((1, 0.0), (1, 0.0)))
        object.__setattr__(self, "_spline", spline)
        object.__setattr__(self, "_fp", _fingerprint(self.r, self.values))

    @property
    def resolution(self) -> float:
        return float(self.r[1] - self.r[0])

    @property
    def fingerprint(self) -> str:
        return self._fp  # type: ignore[attr-defined]

    def at(self, r):
        """Profile value at radius r; exact zero for r >= range."""
        r = np.abs(np.asarray(r, dtype=float))
        out = np.zeros_like(r)
        inside = r < self.range
        if np.any(inside):
            out[inside] = self._spline(r[inside])  # type: ignore[attr-defined]
        if out.ndim == 0:
            return float(out)
        return out


# ---------------------------------------------------------------------------
# mollifier construction: d-dimensional self-convolution of a radial profile


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gl_nodes(n: int) -> tuple[np.ndarray, np.ndarray]:
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _panel_nodes(lo: float, hi: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = _gl_nodes(n)
    mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return mid + half * x, half * w


def _split_panels(lo: float, hi: float, breaks: Sequence[float]) -> list[tuple[float, float]]:
    pts = sorted({lo, hi, *[b for b in breaks if lo < b < hi]})
    return [(pts[i], pts[i + 1]) for i in range(len(pts) - 1) if pts[i + 1] > pts[i]]


def _sphere_area(k: int) -> float:
    """Surface measure of the unit k-sphere embedded in R^(k+1)."""
    return 2.0 * math.pi ** ((k + 1) / 2.0) / math.gamma((k + 1) / 2.0)


def _conv_at_zero(g: Callable, half_range: float, d: int) -> float:
    nodes, w = _panel_nodes(0.0, half_range, 48)
    gv = np.asarray(g(nodes), dtype=float)
    if d == 1:
        return 2.0 * float(np.sum(w * gv * gv))
    return _sphere_area(d - 1) * float(np.sum(w * nodes ** (d - 1) * gv * gv))


def _conv_1d(g: Callable, r: float, half_range: float) -> float:
    lo, hi = r - half_range, half_range
    if lo >= hi:
        return 0.0
    total = 0.0
    for a, b in _split_panels(lo, hi, [0.0]):
        y, w = _panel_nodes(a, b, 24)
        total += float(np.sum(w * np.asarray(g(np.abs(y))) * np.asarray(g(np.abs(r - y)))))
    return total


def _conv_radial(g: Callable, r: float, half_range: float, d: int) -> float:
    """Self-convolution of the radial profile g at radius r in dimension d >= 2.

    The angular integral is split exactly at the support boundary of g, so
    every quadrature panel sees an analytic integrand.
    """
    if r >= 2.0 * half_range:
        return 0.0
    s_lo = max(0.0, r - half_range)
    panels = _split_panels(s_lo, half_range, [r - half_range, half_range - r, r])
    area = _sphere_area(d - 2)
    n_theta = 48
    total = 0.0
    for a, b in panels:
        s, ws = _panel_nodes(a, b, 32)
        t_lo = np.abs(r - s)
        t_hi = r + s
        live = t_lo < half_range
        if not np.any(live):
            continue
        s, ws, t_hi = s[live], ws[live], t_hi[live]
        cos_cut = (r * r + s * s - half_range * half_range) / (2.0 * r * s)
        theta_hi = np.where(t_hi <= half_range, math.pi, np.arccos(np.clip(cos_cut, -1.0, 1.0)))
        x, wt = _gl_nodes(n_theta)
        theta = 0.5 * theta_hi[:, None] * (x[None, :] + 1.0)
        wth = 0.5 * theta_hi[:, None] * wt[None, :]
        t = np.sqrt(np.maximum(r * r + s[:, None] ** 2 - 2.0 * r * s[:, None] * np.cos(theta), 0.0))
        inner = np.sum(wth * np.sin(theta) ** (d - 2) * np.asarray(g(t)), axis=1)
        total += float(np.sum(ws * s ** (d - 1) * np.asarray(g(s)) * inner))
    return area * total


def build_mollifier(
    profile_g: Callable,
    grid_resolution: float = 1.0 / 512.0,
    d: int = 3,
    smoothness_order: int = 3,
) -> MollifierU:
    """Self-convolve a nonnegative radial profile of range 1/2 into a range-1 mollifier.

    The result is positive definite because its Fourier transform is the
    square of the profile's.  The input must vanish identically beyond
    radius 1/2; any nonzero tail value is rejected.
    """
    if grid_resolution <= 0:
        raise ValueError("grid_resolution must be positive")
    probe = np.linspace(0.5, 1.5, 257)
    tail = np.asarray(profile_g(probe), dtype=float)
    if np.any(tail != 0.0):
        raise ValueError("profile must vanish identically beyond radius 1/2")
    body = np.asarray(profile_g(np.linspace(0.0, 0.5, 257)), dtype=float)
    if np.any(body < 0.0):
        raise ValueError("profile must be nonnegative")

    r = radial_grid(1.0, grid_resolution)
    vals = np.zeros_like(r)
    for i, ri in enumerate(r):
        if ri >= 1.0:
            vals[i] = 0.0
        elif ri == 0.0:
            vals[i] = _conv_at_zero(profile_g, 0.5, d)
        elif d == 1:
            vals[i] = _conv_1d(profile_g, ri, 0.5)
        else:
            vals[i] = _conv_radial(profile_g, ri, 0.5, d)
    return MollifierU(r=r, values=vals, range=1.0, d=d, smoothness_order=smoothness_order)


# ---------------------------------------------------------------------------
# exact piecewise moments of the mollifier spline
#
# Every kernel below is a dilation-weighted average of the mollifier and
# reduces to the moment function M(t) = int_0^t u(rho) rho^(beta-1) drho:
#
#   value(r) = r^(-beta) * [ M(min(r, R)) - M(min(r/L, R)) ]
#
# with R the mollifier range (lower divisor absent for the unit-cutoff
# kernel).  M is integrated in closed form piece by piece over the cubic
# spline, so the construction carries no quadrature error of its own.


class _SplineMoment:
    def __init__(self, u: MollifierU, beta: float):
        if beta <= 0:
            raise ValueError("beta = 2*phi_dim must be positive")
        self.beta = float(beta)
        self.upper = float(u.range)
        spline = u._spline  # type: ignore[attr-defined]
        knots = np.asarray(spline.x, dtype=float)
        c = np.asarray(spline.c, dtype=float)  # (4, npieces), descending local powers
        npieces = c.shape[1]
        # expand each local cubic about rho = 0:  p(rho) = sum_i a[j, i] rho^i
        a = np.zeros((npieces, 4))
        for j in range(npieces):
            xj = knots[j]
            asc = c[::-1, j]  # ascending local powers in (rho - xj)
            for k in range(4):
                ck = asc[k]
                if ck == 0.0:
                    continue
                for i in range(k + 1):
                    a[j, i] += ck * math.comb(k, i) * (-xj) ** (k - i)
        self.knots = knots
        self.a = a
        # cumulative moment at each knot
        powers = self.beta + np.arange(4)
        full = np.zeros(npieces)
        for j in range(npieces):
            lo, hi = knots[j], knots[j + 1]
            full[j] = np.sum(self.a[j] * (hi ** powers - lo ** powers) / powers)
        self.cum = np.concatenate([[0.0], np.cumsum(full)])
        self.total = self.moment(self.upper)

    def moment(self, t) -> np.ndarray:
        """M(t) = int_0^t u(rho) rho^(beta-1) drho, clipped to the mollifier range."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.upper)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        j = np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.a) - 1)
        powers = self.beta + np.arange(4)
        lo = self.knots[j]
        part = np.sum(self.a[j] * (t[:, None] ** powers - lo[:, None] ** powers) / powers, axis=1)
        out = self.cum[j] + part
        return float(out[0]) if scalar else out

    def band(self, r, lo_frac: float = 0.0) -> np.ndarray:
        """Kernel value r^(-beta) * [M(min(r, R)) - M(min(lo_frac*r, R))].

        Small radii are evaluated through the series of the first spline
        piece, which is free of the 0/0 cancellation of the direct form.
        """
        r = np.asarray(r, dtype=float)
        scalar = r.ndim == 0
        r = np.atleast_1d(r).astype(float)
        out = np.zeros_like(r)
        first = self.knots[1]
        powers = self.beta + np.arange(4)
        small = r <= first
        if np.any(small):
            rs = r[small][:, None]
            terms = self.a[0] * rs ** np.arange(4) * (1.0 - lo_frac ** powers) / powers
            out[small] = np.sum(terms, axis=1)
        big = ~small
        if np.any(big):
            rb = r[big]
            upper_part = self.moment(rb)
            lower_part = self.moment(lo_frac * rb) if lo_frac > 0.0 else 0.0
            out[big] = rb ** (-self.beta) * (upper_part - lower_part)
        return float(out[0]) if scalar else out


# ---------------------------------------------------------------------------
# covariance kernels


@dataclass(frozen=True)
class CovarianceKernel:
    """Radial covariance table with scale metadata.

    kind is one of "unit_cutoff", "fluctuation", "rescaled_fluctuation" or
    "scaled" (a dilated unit-cutoff kernel).  Finite-range kernels evaluate
    to exact zero beyond their range; infinite-range kernels continue past
    the table with the exact power tail coef * r^(-2*phi_dim), which is a
    scaling identity of the construction rather than an approximation.
    """

    r: np.ndarray
    values: np.ndarray
    kind: str
    dim: FieldDimension
    L: float | None = None
    n: int | None = None
    range: float | None = None
    tail_coef: float | None = None
    tail_start: float | None = None
    source_id: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("unit_cutoff", "fluctuation", "rescaled_fluctuation", "scaled"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "r", _readonly(self.r))
        object.__setattr__(self, "values", _readonly(self.values))
        if self.range is None:
            # the table's outer stretch already follows the power tail; match its slope
            end_slope = -self.dim.beta * float(self.values[-1]) / float(self.r[-1])
        else:
            end_slope = 0.0
        spline = CubicSpline(self.r, self.values, bc_type=((1, 0.0), (1, end_slope)))
        object.__setattr__(self, "_spline", spline)

    @property
    def beta(self) -> float:
        return self.dim.beta

    def at(self, r):
        """Kernel value at radius r (vectorized)."""
        r = np.abs(np.asarray(r, dtype=float))
        scalar = r.ndim == 0
        r = np.atleast_1d(r)
        out = np.zeros_like(r)
        if self.range is not None:
            inside = r < self.range
            if np.any(inside):
                out[inside] = self._spline(r[inside])  # type: ignore[attr-defined]
        else:
            start = self.tail_start if self.tail_start is not None else float(self.r[-1])
            inside = r <= start
            if np.any(inside):
                out[inside] = self._spline(r[inside])  # type: ignore[attr-defined]
            beyond = ~inside
            if np.any(beyond):
                coef = self.tail_coef
                if coef is None:
                    coef = float(self.values[-1] * self.r[-1] ** self.beta)
                out[beyond] = coef * r[beyond] ** (-self.beta)
        return float(out[0]) if scalar else out

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "L": self.L,
            "n": self.n,
            "d": self.dim.d,
            "phi_dim": self.dim.phi_dim,
            "range": self.range,
            "source_id": self.source_id,
        }


def unit_cutoff_covariance(
    u: MollifierU, dim: FieldDimension, grid: np.ndarray | None = None
) -> CovarianceKernel:
    """Covariance with the short-distance singularity removed at scale 1.

    Beyond the mollifier range the kernel is the pure power
    M(range) * r^(-2*phi_dim); the table stores that tail explicitly up to
    TABLE_MARGIN times the range.
    """
    if dim.phi_dim <= 0:
        raise ValueError("phi_dim must be positive; the scale integral diverges otherwise")
    if u.d != dim.d:
        raise ValueError(f"mollifier built for d={u.d} but dim.d={dim.d}")
    moment = _SplineMoment(u, dim.beta)
    if grid is None:
        grid = radial_grid(u.range, u.resolution)
    values = moment.band(grid, 0.0)
    return CovarianceKernel(
        r=grid,
        values=values,
        kind="unit_cutoff",
        dim=dim,
        range=None,
        tail_coef=float(moment.total),
        tail_start=float(u.range),
        source_id=u.fingerprint,
    )


def fluctuation_covariance(
    u: MollifierU, dim: FieldDimension, L: float, grid: np.ndarray | None = None
) -> CovarianceKernel:
    """Finite-range part of the cutoff covariance between scales 1 and L."""
    if not L > 1.0:
        raise ValueError(f"scale factor L must exceed 1, got {L}")
    if u.d != dim.d:
        raise ValueError(f"mollifier built for d={u.d} but dim.d={dim.d}")
    moment = _SplineMoment(u, dim.beta)
    rng = float(L * u.range)
    if grid is None:
        grid = radial_grid(rng, u.resolution)
    values = moment.band(grid, 1.0 / L)
    return CovarianceKernel(
        r=grid,
        values=values,
        kind="fluctuation",
        dim=dim,
        L=float(L),
        n=None,
        range=rng,
        source_id=u.fingerprint,
    )


def _integer_power_of(sigma: float, base: float) -> int | None:
    if base is None or base <= 1.0:
        return None
    m = math.log(sigma) / math.log(base)
    mr = round(m)
    if mr >= 1 and abs(sigma - base ** mr) <= 1e-9 * sigma:
        return mr
    return None


def scale_kernel(k: CovarianceKernel, L: float) -> CovarianceKernel:
    """Apply the dilation value(r) -> L^(-2*phi_dim) value(r/L) by exact re-tabulation.

    The table grid stretches by L and the values carry the multiplicative
    factor, so iterated dilations compose exactly on the grid.
    """
    if not L > 1.0:
        raise ValueError(f"scale factor L must exceed 1, got {L}")
    factor = float(L) ** (-k.beta)
    new_r = k.r * float(L)
    new_v = k.values * factor
    if k.kind in ("unit_cutoff", "scaled"):
        total = float(L) * (k.L if k.L is not None else 1.0)
        return CovarianceKernel(
            r=new_r,
            values=new_v,
            kind="scaled",
            dim=k.dim,
            L=total,
            n=None,
            range=None,
            tail_coef=k.tail_coef,
            tail_start=(k.tail_start or 1.0) * float(L),
            source_id=k.source_id,
        )
    m = _integer_power_of(float(L), k.L or 0.0)
    n_new = None
    if m is not None:
        n_new = (k.n or 0) + m
    return CovarianceKernel(
        r=new_r,
        values=new_v,
        kind="rescaled_fluctuation",
        dim=k.dim,
        L=k.L,
        n=n_new,
        range=(k.range or 0.0) * float(L),
        source_id=k.source_id,
    )


def rescaled_fluctuation(
    u: MollifierU, dim: FieldDimension, L: float, n: int, grid: np.ndarray | None = None
) -> CovarianceKernel:
    """Fluctuation kernel at scale index n: the base kernel dilated by L^n.

    n = 0 reproduces the base fluctuation kernel bit for bit.
    """
    if n < 0 or int(n) != n:
        raise ValueError(f"scale index n must be a nonnegative integer, got {n}")
    base = fluctuation_covariance(u, dim, L, grid=grid)
    if n == 0:
        return CovarianceKernel(
            r=base.r,
            values=base.values,
            kind="rescaled_fluctuation",
            dim=dim,
            L=float(L),
            n=0,
            range=base.range,
            source_id=base.source_id,
        )
    sigma = float(L) ** n
    return CovarianceKernel(
        r=base.r * sigma,
        values=base.values * sigma ** (-dim.beta),
        kind="rescaled_fluctuation",
        dim=dim,
        L=float(L),
        n=int(n),
        range=float(base.range) * sigma,
        source_id=base.source_id,
    )


def verify_scaling_decomposition(
    C: CovarianceKernel, gamma: CovarianceKernel, L: float, grid: np.ndarray | None = None
) -> float:
    """Max pointwise residual of C(r) - Gamma_L(r) - L^(-2*phi_dim) C(r/L).

    Kernels must share the field dimension and (when known) the generating
    mollifier; the check grid defaults to the union of both tables.
    """
    if C.kind != "unit_cutoff":
        raise ValueError("first kernel must be the unit-cutoff covariance")
    if gamma.kind not in ("fluctuation", "rescaled_fluctuation"):
        raise ValueError("second kernel must be a fluctuation kernel")
    if C.dim != gamma.dim:
        raise ValueError("kernels carry different field dimensions")
    if gamma.L is None or abs(gamma.L - L) > 1e-12 * L:
        raise ValueError(f"fluctuation kernel was built for L={gamma.L}, asked to verify L={L}")
    if C.source_id and gamma.source_id and C.source_id != gamma.source_id:
        raise ValueError("kernels derive from different mollifiers")
    if grid is None:
        grid = np.unique(np.concatenate([C.r, gamma.r]))
    resid = C.at(grid) - gamma.at(grid) - float(L) ** (-C.beta) * C.at(grid / float(L))
    return float(np.max(np.abs(resid)))


# ---------------------------------------------------------------------------
# positive definiteness


@dataclass(frozen=True)
class PositiveDefiniteReport:
    min_eigenvalue: float
    trace: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.min_eigenvalue >= -self.tolerance


def min_gram_eigenvalue(radial_eval: Callable, points: np.ndarray) -> tuple[float, float]:
    """Smallest eigenvalue and trace of the Gram matrix k(|x_i - x_j|)."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    gram = np.asarray(radial_eval(dist), dtype=float)
    w = np.linalg.eigvalsh(gram)
    return float(w[0]), float(np.trace(gram))


def check_positive_definite(
    obj: MollifierU | CovarianceKernel,
    points: np.ndarray,
    tol_factor: float = TOL_PD_FACTOR,
) -> PositiveDefiniteReport:
    if len(np.asarray(points)) > 100:
        raise ValueError("positive-definiteness probe is specified for point sets of size <= 100")
    min_eig, trace = min_gram_eigenvalue(obj.at, points)
    return PositiveDefiniteReport(min_eig, trace, tol_factor * abs(trace))


# ---------------------------------------------------------------------------
# CSV export / import


def _fmt(x: float) -> str:
    return "%.17g" % x


def kernel_to_csv(kernel: CovarianceKernel, path) -> None:
    """Write `r,value` rows under a metadata header; lossless at 17 significant digits."""
    if kernel.kind == "rescaled_fluctuation" and kernel.n is None:
        raise ValueError("kernel scale is not an integer power of its base; not representable in CSV metadata")
    header = (
        f"# kind={kernel.kind} L={_fmt(kernel.L) if kernel.L is not None else 'None'}"
        f" n={kernel.n if kernel.n is not None else 'None'}"
        f" d={kernel.dim.d} phi_dim={_fmt(kernel.dim.phi_dim)}"
    )
    lines = [header, "r,value"]
    for ri, vi in zip(kernel.r, kernel.values):
        lines.append(f"{_fmt(ri)},{_fmt(vi)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def kernel_from_csv(path) -> CovarianceKernel:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError("missing kernel metadata header")
    meta: dict[str, str] = {}
    for tok in lines[0].lstrip("#").split():
        key, _, val = tok.partition("=")
        meta[key] = val
    kind = meta["kind"]
    L = None if meta.get("L") in (None, "None") else float(meta["L"])
    n = None if meta.get("n") in (None, "None") else int(meta["n"])
    dim = FieldDimension(int(meta["d"]), float(meta["phi_dim"]))
    body = lines[1:]
    if body and body[0].lower().startswith("r,"):
        body = body[1:]
    data = np.array([[float(t) for t in ln.split(",")] for ln in body])
    r, values = data[:, 0], data[:, 1]
    rng: float | None
    if kind == "fluctuation":
        rng = float(L)  # type: ignore[arg-type]
    elif kind == "rescaled_fluctuation":
        rng = float(L) ** (n + 1)  # type: ignore[operator]
    else:
        rng = None
    tail_coef = tail_start = None
    if rng is None:
        tail_start = float(r[-1])
        tail_coef = float(values[-1] * r[-1] ** dim.beta)
    return CovarianceKernel(
        r=r,
        values=values,
        kind=kind,
        dim=dim,
        L=L,
        n=n,
        range=rng,
        tail_coef=tail_coef,
        tail_start=tail_start,
        source_id=None,
    )

"""Second-order coupling flow: coefficient derivation, integration, critical tuning.

The closed system integrated here is

    dg/dt  = e_g * g  - a * g^2
    dmu/dt = e_mu * mu - b * g^2
    dxi/dt = e_xi * xi + c * g^2

with linear exponents e_g = d - 4*phi_dim, e_mu = d - 2*phi_dim,
e_xi = d - 2*phi_dim - 2 (the xi line vanishes identically at the
canonical dimension) and positive nonlinear coefficients a, b, c obtained
from Wick-contracting the quartic vertex against itself and localizing the
result: a and b from the quartic and quadratic channels, c from the
second-moment (Taylor) localization of the gradient remainder of the
quadratic channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .kernels import CovarianceKernel, FieldDimension, MollifierU, _panel_nodes, _sphere_area

__all__ = [
    "FlowCoefficients",
    "CouplingState",
    "FlowTrajectory",
    "FlowDivergenceError",
    "BracketError",
    "wick_contraction_channels",
    "derive_coefficients",
    "flow_rhs",
    "integrate_flow",
    "fixed_point",
    "FixedPointReport",
    "critical_mass",
    "critical_mass_shooting",
    "tuned_mass_trajectory",
    "cutoff_schedule",
    "dimensionless_couplings",
]


class FlowDivergenceError(RuntimeError):
    def __init__(self, message: str, t_blowup: float):
        super().__init__(message)
        self.t_blowup = t_blowup


class BracketError(ValueError):
    pass


def wick_contraction_channels(p: int = 3, q: int = 3) -> dict[int, int]:
    """Pairing multiplicities of :phi^p(x)::phi^q(y): by number of cross contractions.

    k cross pairings can be laid down in C(p,k) * C(q,k) * k! ways; for the
    cubic-cubic product this gives {0: 1, 1: 9, 2: 18, 3: 6} with kernels
    C^k attached.
    """
    return {k: math.comb(p, k) * math.comb(q, k) * math.factorial(k)
            for k in range(min(p, q) + 1)}


@dataclass(frozen=True)
class FlowCoefficients:
    a: float
    b: float
    c: float
    e_g: float
    e_mu: float
    e_xi: float
    dim: FieldDimension
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        # derived coefficient sets are strictly positive; a = 0 is admitted here
        # so frozen-flow oracles remain constructible
        if self.a < 0 or self.b < 0 or self.c < 0:
            raise ValueError("nonlinear flow coefficients must not be negative")

    @classmethod
    def from_couplings(cls, dim: FieldDimension, a: float, b: float, c: float,
                       metadata: dict | None = None) -> "FlowCoefficients":
        d, p = dim.d, dim.phi_dim
        return cls(a=a, b=b, c=c,
                   e_g=d - 4.0 * p, e_mu=d - 2.0 * p, e_xi=d - 2.0 * p - 2.0,
                   dim=dim, metadata=metadata or {})


def _radial_integral(u: MollifierU, weight, d: int) -> float:
    """S_{d-1} * int_0^range u(r) * weight(r) * r^(d-1) dr on the mollifier's knots."""
    area = _sphere_area(d - 1)
    knots = u.r[u.r <= u.range]
    total = 0.0
    for j in range(len(knots) - 1):
        x, w = _panel_nodes(float(knots[j]), float(knots[j + 1]), 8)
        total += float(np.sum(w * u.at(x) * weight(x) * x ** (d - 1)))
    return area * total


def derive_coefficients(u: MollifierU, C: CovarianceKernel, dim: FieldDimension) -> FlowCoefficients:
    """Flow coefficients from the mollifier and the unit-cutoff covariance.

    Channel factors come from the exhaustive pairing count of the
    cubic-cubic Wick product; each local part then carries a compactly
    supported radial integral because the mollifier truncates the range.
    The quartic-free channels (the six-field term and the field-independent
    constant) are recorded in the metadata and deliberately not fed into
    the flow.
    """
    if u.d != dim.d or C.dim != dim:
        raise ValueError("mollifier, covariance and dimension must agree")
    if C.source_id and u.fingerprint != C.source_id:
        raise ValueError("covariance was not built from this mollifier")
    mult = wick_contraction_channels(3, 3)
    integrals = {}
    for name, weight in (
        ("uC", lambda r: C.at(r)),
        ("uC2", lambda r: C.at(r) ** 2),
        ("uC2r2", lambda r: C.at(r) ** 2 * r ** 2),
        ("u", lambda r: np.ones_like(r)),
        ("uC3", lambda r: C.at(r) ** 3),
    ):
        coarse = _radial_integral(u, weight, dim.d)
        # refine by halving the panels once; the knot-aligned rule is already
        # near-exact so any disagreement signals a broken input table
        fine = _refined_radial_integral(u, weight, dim.d)
        if abs(fine - coarse) > 1e-10 * max(abs(fine), 1e-300):
            raise RuntimeError(
                f"radial quadrature for {name} did not converge: "
                f"refinement residual {abs(fine - coarse):.3e}"
            )
        integrals[name] = fine
    prefactor = 8.0  # (1/2) of the squared-derivative weight 16 of the quartic vertex
    a = prefactor * mult[1] * integrals["uC"]
    b = prefactor * mult[2] * integrals["uC2"]
    c = 0.5 * prefactor * mult[2] * integrals["uC2r2"] / dim.d
    if not (a > 0 and b > 0 and c > 0):
        raise RuntimeError("derived flow coefficients must be strictly positive")
    metadata = {
        "channel_multiplicities": mult,
        "integrals": integrals,
        "six_field_rate": prefactor * mult[0] * integrals["u"],
        "constant_rate": prefactor * mult[3] * integrals["uC3"],
        "note": "six-field and constant channels recorded only; not part of the flow",
    }
    return FlowCoefficients.from_couplings(dim, a, b, c, metadata)


def _refined_radial_integral(u: MollifierU, weight, d: int) -> float:
    area = _sphere_area(d - 1)
    knots = u.r[u.r <= u.range]
    total = 0.0
    for j in range(len(knots) - 1):
        lo, hi = float(knots[j]), float(knots[j + 1])
        mid = 0.5 * (lo + hi)
        for a_, b_ in ((lo, mid), (mid, hi)):
            x, w = _panel_nodes(a_, b_, 8)
            total += float(np.sum(w * u.at(x) * weight(x) * x ** (d - 1)))
    return area * total


# ---------------------------------------------------------------------------
# the ODE system


@dataclass(frozen=True)
class CouplingState:
    t: float
    g: float
    mu: float
    xi: float

    def __post_init__(self) -> None:
        for name in ("t", "g", "mu", "xi"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def flow_rhs(state: CouplingState, coeff: FlowCoefficients) -> tuple[float, float, float]:
    g, mu, xi = state.g, state.mu, state.xi
    return (
        coeff.e_g * g - coeff.a * g * g,
        coeff.e_mu * mu - coeff.b * g * g,
        coeff.e_xi * xi + coeff.c * g * g,
    )


@dataclass(frozen=True)
class FlowTrajectory:
    ts: np.ndarray
    gs: np.ndarray
    mus: np.ndarray
    xis: np.ndarray
    step: float
    coefficients: FlowCoefficients

    def __post_init__(self) -> None:
        dt = np.diff(self.ts)
        if len(dt) and (np.any(dt <= 0) or np.max(np.abs(dt - self.step)) > 1e-9 * self.step):
            raise ValueError("trajectory times must increase by the uniform step")

    def state(self, i: int) -> CouplingState:
        return CouplingState(float(self.ts[i]), float(self.gs[i]),
                             float(self.mus[i]), float(self.xis[i]))

    @property
    def final(self) -> CouplingState:
        return self.state(len(self.ts) - 1)


_BLOWUP = 1e12


def _rk4_step(y: np.ndarray, h: float, rhs) -> np.ndarray:
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_flow(
    initial: CouplingState, coeff: FlowCoefficients, horizon: float, step: float
) -> FlowTrajectory:
    """Integrate the coupling flow with the classical fourth-order scheme."""
    if step <= 0 or horizon < step:
        raise ValueError("need 0 < step <= horizon")

    def rhs(y: np.ndarray) -> np.ndarray:
        g, mu, xi = y
        return np.array([
            coeff.e_g * g - coeff.a * g * g,
            coeff.e_mu * mu - coeff.b * g * g,
            coeff.e_xi * xi + coeff.c * g * g,
        ])

    n = int(round(horizon / step))
    ts = initial.t + step * np.arange(n + 1)
    out = np.empty((n + 1, 3))
    out[0] = (initial.g, initial.mu, initial.xi)
    for i in range(n):
        out[i + 1] = _rk4_step(out[i], step, rhs)
        if not np.all(np.isfinite(out[i + 1])) or np.max(np.abs(out[i + 1])) > _BLOWUP:
            raise FlowDivergenceError(
                f"trajectory diverged near t = {ts[i + 1]:.6g}", t_blowup=float(ts[i + 1])
            )
    return FlowTrajectory(ts=ts, gs=out[:, 0], mus=out[:, 1], xis=out[:, 2],
                          step=step, coefficients=coeff)


@dataclass(frozen=True)
class FixedPointReport:
    g_star: float
    stability_exponent: float


def fixed_point(coeff: FlowCoefficients) -> FixedPointReport:
    """Nontrivial root of the g flow when the linear exponent is expanding, else 0.

    The stability exponent is the derivative of the right side at the root:
    -e_g at the nontrivial point, e_g at the Gaussian one.
    """
    if coeff.e_g > 0:
        g_star = coeff.e_g / coeff.a
        return FixedPointReport(g_star, coeff.e_g - 2.0 * coeff.a * g_star)
    return FixedPointReport(0.0, coeff.e_g)


def _require_bounded_g(g0: float, coeff: FlowCoefficients) -> None:
    if g0 < 0:
        raise ValueError("negative initial quartic coupling gives an unbounded trajectory")
    if coeff.e_g > 0 and g0 == 0:
        return


def critical_mass(
    g0: float,
    coeff: FlowCoefficients,
    horizon: float = 40.0,
    step: float = 2e-3,
    tail_tol: float = 1e-12,
    max_horizon: float = 400.0,
) -> float:
    """Initial quadratic coupling on the bounded manifold:
    b * int_0^inf exp(-e_mu s) g_s^2 ds.

    The quadrature rides on the integrated g trajectory and stops once the
    analytic tail bound b * exp(-e_mu T) * sup g^2 / e_mu falls below
    tail_tol.
    """
    _require_bounded_g(g0, coeff)
    if coeff.e_mu <= 0:
        raise ValueError("the quadratic exponent must be expanding for critical tuning")

    def rhs(t: float, y: np.ndarray) -> np.ndarray:
        g, J = y
        return np.array([
            coeff.e_g * g - coeff.a * g * g,
            coeff.b * math.exp(-coeff.e_mu * t) * g * g,
        ])

    t = 0.0
    y = np.array([g0, 0.0])
    g_star = fixed_point(coeff).g_star
    while True:
        target = min(horizon, max_horizon)
        n = int(round((target - t) / step))
        for _ in range(n):
            k1 = rhs(t, y)
            k2 = rhs(t + 0.5 * step, y + 0.5 * step * k1)
            k3 = rhs(t + 0.5 * step, y + 0.5 * step * k2)
            k4 = rhs(t + step, y + step * k3)
            y = y + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += step
            if not np.all(np.isfinite(y)) or abs(y[0]) > _BLOWUP:
                raise FlowDivergenceError("g trajectory diverged", t_blowup=t)
        sup_g = max(abs(y[0]), abs(g_star))
        tail = coeff.b * math.exp(-coeff.e_mu * t) * sup_g ** 2 / coeff.e_mu
        if tail < tail_tol or t >= max_horizon:
            return float(y[1])
        horizon = min(max_horizon, 2.0 * t)


def tuned_mass_trajectory(
    g0: float,
    coeff: FlowCoefficients,
    ts: Sequence[float],
    step: float = 2e-3,
    tail_tol: float = 1e-12,
) -> np.ndarray:
    """Critically tuned quadratic coupling evaluated through its integral form.

    mu_t = b * int_0^inf exp(-e_mu s) g_{t+s}^2 ds is bounded by
    b * sup g^2 / e_mu for every t, unlike the forward-integrated
    trajectory, whose initial-value roundoff is amplified by exp(e_mu t)
    and overtakes any fixed bound once exp(e_mu t) * ulp(mu_0) does.
    """
    ts = np.asarray(ts, dtype=float)
    if np.any(ts < 0):
        raise ValueError("times must be nonnegative")
    g_star = fixed_point(coeff).g_star
    horizon = float(ts.max())
    tail = horizon
    sup_g = max(abs(g0), abs(g_star))
    while coeff.b * math.exp(-coeff.e_mu * tail) * sup_g ** 2 / coeff.e_mu > tail_tol:
        tail += 10.0
    bare = FlowCoefficients(a=coeff.a, b=0.0, c=0.0, e_g=coeff.e_g,
                            e_mu=coeff.e_mu, e_xi=coeff.e_xi, dim=coeff.dim)
    traj = integrate_flow(CouplingState(0.0, g0, 0.0, 0.0), bare, horizon + tail, step)
    from scipy.integrate import simpson

    out = np.empty(len(ts))
    for i, t in enumerate(ts):
        mask = traj.ts >= t - 1e-12
        s = traj.ts[mask] - t
        vals = coeff.b * np.exp(-coeff.e_mu * s) * traj.gs[mask] ** 2
        out[i] = simpson(vals, x=s)
    return out


def _mu_sign_at_horizon(
    g0: float, mu0: float, coeff: FlowCoefficients, horizon: float, step: float
) -> float:
    """Sign of mu at the horizon, short-circuiting once |mu| overflows the scale."""
    y = np.array([g0, mu0])
    t = 0.0
    n = int(round(horizon / step))

    def rhs(y: np.ndarray) -> np.ndarray:
        g, mu = y
        return np.array([coeff.e_g * g - coeff.a * g * g,
                         coeff.e_mu * mu - coeff.b * g * g])

    for _ in range(n):
        y = _rk4_step(y, step, rhs)
        t += step
        if abs(y[1]) > 1e8:
            return math.copysign(1.0, y[1])
        if not np.all(np.isfinite(y)):
            raise FlowDivergenceError("shooting trajectory lost", t_blowup=t)
    return math.copysign(1.0, y[1]) if y[1] != 0.0 else 0.0


def critical_mass_shooting(
    g0: float,
    coeff: FlowCoefficients,
    horizon: float,
    bracket: tuple[float, float],
    step: float = 2e-3,
    width: float = 1e-12,
) -> float:
    """Bisect the initial quadratic coupling between diverging branches.

    The bracket endpoints must drive mu to opposite signs at the horizon;
    the midpoint sequence narrows to the stated width.
    """
    _require_bounded_g(g0, coeff)
    lo, hi = float(bracket[0]), float(bracket[1])
    if not lo < hi:
        raise BracketError("bracket must satisfy lo < hi")
    s_lo = _mu_sign_at_horizon(g0, lo, coeff, horizon, step)
    s_hi = _mu_sign_at_horizon(g0, hi, coeff, horizon, step)
    if not (s_lo < 0 < s_hi):
        raise BracketError(
            f"bracket endpoints do not separate the diverging branches "
            f"(signs {s_lo:+.0f}, {s_hi:+.0f})"
        )
    while hi - lo > width:
        mid = 0.5 * (lo + hi)
        if mid == lo or mid == hi:
            break
        if _mu_sign_at_horizon(g0, mid, coeff, horizon, step) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# dimensional schedule for cutoff removal


def cutoff_schedule(
    couplings: Sequence[float], dim: FieldDimension, N: int, L: float
) -> tuple[float, float, float]:
    """Bare couplings at cutoff scale L^(-N) from dimensionless ones.

    With eps = L^(-N):  xi_bare = eps^(2p - d + 2) xi,
    g_bare = eps^(4p - d) g, mu_bare = eps^(2p - d) mu.
    """
    if N < 0 or int(N) != N:
        raise ValueError("N must be a nonnegative integer")
    xi, g, mu = (float(x) for x in couplings)
    p, d = dim.phi_dim, dim.d
    eps = float(L) ** (-N)
    return (
        eps ** (2 * p - d + 2) * xi,
        eps ** (4 * p - d) * g,
        eps ** (2 * p - d) * mu,
    )


def dimensionless_couplings(
    bare: Sequence[float], dim: FieldDimension, N: int, L: float
) -> tuple[float, float, float]:
    """Inverse of cutoff_schedule."""
    if N < 0 or int(N) != N:
        raise ValueError("N must be a nonnegative integer")
    xi_b, g_b, mu_b = (float(x) for x in bare)
    p, d = dim.phi_dim, dim.d
    eps = float(L) ** (-N)
    return (
        eps ** (-(2 * p - d + 2)) * xi_b,
        eps ** (-(4 * p - d)) * g_b,
        eps ** (-(2 * p - d)) * mu_b,
    )

"""Polymer representation of the partition density on desk-scale volumes.

A volume is a set of closed unit blocks on a periodic lattice; a connected
polymer is a subset that is connected under closed-set adjacency, i.e.
blocks sharing a face, edge or corner count as neighbouring.  The
partition density is parametrized by a local potential and a polymer
activity, and one coarsening step of the representation combines
activities and per-block fluctuation remainders into larger-scale
activities before the fluctuation average and the dilation.

Two different disjointness notions appear, both exact consequences of the
construction: collections inside the partition density are block-disjoint
(touching allowed), while the coarse polymers produced by the reblocking
are closed-set disjoint components and therefore non-adjacent, which is
what lets the fluctuation average factorize across them when the
fluctuation kernel has finite range.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .fields import FieldEnsemble, LatticeGrid
from .functionals import (
    LocalPotential,
    Region,
    WickMonomial,
    classify,
)
from .kernels import FieldDimension

__all__ = [
    "Block",
    "blocks_adjacent",
    "is_connected",
    "enumerate_polymers",
    "l_closure",
    "BlockLattice",
    "PolymerActivity",
    "constant_activity",
    "monomial_activity",
    "potential_value",
    "partition_density",
    "p_fluctuation",
    "map_B",
    "rg_step_polymer",
    "RGStepResult",
    "TestFieldFamily",
    "stability_bound_check",
    "StabilityReport",
    "polymer_norm",
    "norm_aggregate",
    "extract_relevant_linear",
    "ExtractionReport",
    "ProjectionConditionError",
]

Block = tuple[int, ...]


def blocks_adjacent(b1: Block, b2: Block) -> bool:
    """Closed-set adjacency: the blocks share at least a corner."""
    return max(abs(x - y) for x, y in zip(b1, b2)) <= 1


def is_connected(blocks: Iterable[Block]) -> bool:
    blocks = [tuple(b) for b in blocks]
    if not blocks:
        return False
    seen = {blocks[0]}
    frontier = [blocks[0]]
    rest = set(blocks[1:])
    while frontier:
        cur = frontier.pop()
        hit = [b for b in rest if blocks_adjacent(cur, b)]
        for b in hit:
            rest.discard(b)
            seen.add(b)
            frontier.append(b)
    return not rest


def enumerate_polymers(volume: Iterable[Block], size_cap: int | None = None) -> list[frozenset]:
    """All connected polymers in the volume up to size_cap blocks.

    Grown breadth-first from singletons; every connected set of size k+1
    contains a connected subset of size k, so the growth is complete, and
    set-valued dedup keeps it duplicate-free.
    """
    vol = sorted({tuple(b) for b in volume})
    if not vol:
        return []
    cap = len(vol) if size_cap is None else max(0, min(int(size_cap), len(vol)))
    current = {frozenset([b]) for b in vol}
    out: list[frozenset] = sorted(current, key=sorted)
    for _ in range(1, cap):
        nxt: set[frozenset] = set()
        for poly in current:
            for b in vol:
                if b not in poly and any(blocks_adjacent(b, p) for p in poly):
                    nxt.add(poly | {b})
        out.extend(sorted(nxt, key=sorted))
        current = nxt
    return out if cap >= 1 else []


def l_closure(blocks: Iterable[Block], L: int) -> frozenset:
    """Smallest union of side-L blocks containing the given unit blocks."""
    if L < 2 or int(L) != L:
        raise ValueError("L must be an integer >= 2")
    return frozenset(tuple(x // L for x in b) for b in blocks)


# ---------------------------------------------------------------------------
# block geometry on a periodic lattice


@dataclass(frozen=True)
class BlockLattice:
    """Paving of a periodic lattice into unit blocks of sites_per_block^d sites."""

    d: int
    blocks_per_axis: int
    sites_per_block: int

    def __post_init__(self) -> None:
        if self.sites_per_block < 2:
            raise ValueError("need at least two sites per block for gradients")

    @property
    def grid(self) -> LatticeGrid:
        return LatticeGrid(self.d, self.blocks_per_axis * self.sites_per_block,
                           1.0 / self.sites_per_block)

    @property
    def spacing(self) -> float:
        return 1.0 / self.sites_per_block

    def contracted(self, L: int) -> "BlockLattice":
        """Geometry after one dilation step: unit blocks gain a factor L of sites."""
        if self.blocks_per_axis % L:
            raise ValueError("volume is not aligned to side-L blocks")
        return BlockLattice(self.d, self.blocks_per_axis // L, self.sites_per_block * L)

    def block_region(self, blocks: Iterable[Block]) -> Region:
        """Sites of a union of blocks, as a Region on the ambient grid."""
        s = self.sites_per_block
        per_block = []
        for b in blocks:
            if len(b) != self.d:
                raise ValueError("block index has wrong dimension")
            ranges = [np.arange(bi * s, (bi + 1) * s) % self.grid.extent for bi in b]
            mesh = np.meshgrid(*ranges, indexing="ij")
            per_block.append(tuple(m.reshape(-1) for m in mesh))
        sites = tuple(np.concatenate([p[ax] for p in per_block]) for ax in range(self.d))
        return Region(self.grid, sites)

    def all_blocks(self) -> list[Block]:
        return [tuple(b) for b in itertools.product(range(self.blocks_per_axis), repeat=self.d)]

    def unit_blocks_of(self, coarse: Block, L: int) -> list[Block]:
        return [tuple(L * c + o for c, o in zip(coarse, off))
                for off in itertools.product(range(L), repeat=self.d)]


def potential_value(
    pot: LocalPotential, lattice: BlockLattice, blocks: Iterable[Block], fields: np.ndarray
) -> np.ndarray:
    """V over a union of blocks, a plain sum over the blocks' sites.

    Site-based sums make additivity over disjoint block sets exact and the
    dilation act as a pure coupling transform.  The gradient term uses
    periodic forward differences, so it reads one site past the region; the
    resulting fringe correlation across well-separated polymers is of the
    order of the fluctuation kernel's ninth-order tangency at its range and
    sits far below every statistical tolerance used here.

    fields may carry leading batch axes; the result drops the site axes.
    """
    region = lattice.block_region(sorted({tuple(b) for b in blocks}))
    return pot.evaluate_batch(fields, region)


# ---------------------------------------------------------------------------
# activities


@dataclass(frozen=True)
class PolymerActivity:
    """Field-dependent weight attached to connected polymers.

    The evaluator receives (polymer, fields, lattice) and must depend only
    on field values inside the polymer; disconnected or oversized arguments
    evaluate to zero without consulting it.
    """

    evaluator: Callable[[frozenset, np.ndarray, BlockLattice], np.ndarray]
    support_cap: int
    name: str = ""

    def __call__(self, polymer: frozenset, fields: np.ndarray, lattice: BlockLattice):
        polymer = frozenset(tuple(b) for b in polymer)
        if len(polymer) > self.support_cap or not is_connected(polymer):
            batch_shape = fields.shape[: fields.ndim - lattice.d]
            return np.zeros(batch_shape)
        return self.evaluator(polymer, fields, lattice)


def constant_activity(values: Mapping[frozenset, float] | float, support_cap: int = 1,
                      name: str = "constant") -> PolymerActivity:
    """Field-independent activity: per-polymer table, or one value on all single blocks."""
    if isinstance(values, Mapping):
        table = {frozenset(k): float(v) for k, v in values.items()}
        cap = max((len(k) for k in table), default=1)

        def ev(polymer, fields, lattice):
            batch_shape = fields.shape[: fields.ndim - lattice.d]
            return np.full(batch_shape, table.get(polymer, 0.0))

        return PolymerActivity(ev, max(cap, support_cap), name)
    k = float(values)

    def ev_single(polymer, fields, lattice):
        batch_shape = fields.shape[: fields.ndim - lattice.d]
        return np.full(batch_shape, k if len(polymer) == 1 else 0.0)

    return PolymerActivity(ev_single, 1, name)


def monomial_activity(
    delta: float, m: int, n_derivs: int, block: Block, lattice: BlockLattice,
    ordering_variance: float = 0.0, name: str = "monomial",
) -> PolymerActivity:
    """delta times an integrated Wick monomial supported on one block."""
    block = tuple(block)
    region = lattice.block_region([block])
    mono = WickMonomial(m=m, n_derivs=n_derivs, ordering_variance=ordering_variance, region=region)

    def ev(polymer, fields, lat):
        batch_shape = fields.shape[: fields.ndim - lat.d]
        if polymer != frozenset([block]):
            return np.zeros(batch_shape)
        return delta * mono.evaluate_batch(fields)

    return PolymerActivity(ev, 1, name)


# ---------------------------------------------------------------------------
# partition density


def _disjoint_collections(polymers: Sequence[frozenset]):
    """Yield every unordered collection of pairwise block-disjoint polymers."""

    def rec(start: int, used: frozenset, acc: tuple):
        yield acc
        for i in range(start, len(polymers)):
            p = polymers[i]
            if used & p:
                continue
            yield from rec(i + 1, used | p, acc + (p,))

    yield from rec(0, frozenset(), ())


def partition_density(
    V: LocalPotential,
    K: PolymerActivity,
    volume: Iterable[Block],
    lattice: BlockLattice,
    fields: np.ndarray,
) -> np.ndarray:
    """Sum over block-disjoint polymer collections of exp(-V(complement)) * prod K.

    Unordered collections are visited once, which absorbs the 1/N! of the
    ordered form.  fields may carry leading batch axes.
    """
    volume = sorted({tuple(b) for b in volume})
    batch_shape = fields.shape[: fields.ndim - lattice.d]
    block_weight = {b: np.exp(-potential_value(V, lattice, [b], fields)) for b in volume}
    polymers = enumerate_polymers(volume, min(K.support_cap, len(volume)))
    k_values = {p: np.asarray(K(p, fields, lattice)) for p in polymers}
    live = [p for p in polymers if np.any(k_values[p] != 0.0)]
    total = np.zeros(batch_shape)
    for collection in _disjoint_collections(live):
        used = frozenset().union(*collection) if collection else frozenset()
        term = np.ones(batch_shape)
        for p in collection:
            term = term * k_values[p]
        for b in volume:
            if b not in used:
                term = term * block_weight[b]
        total = total + term
    return total


def p_fluctuation(
    V: LocalPotential,
    V_ref: LocalPotential,
    block: Block,
    lattice: BlockLattice,
    zeta: np.ndarray,
    phi: np.ndarray,
) -> np.ndarray:
    """Per-block fluctuation remainder exp(-V(block, zeta+phi)) - exp(-V_ref(block, phi))."""
    return (np.exp(-potential_value(V, lattice, [block], zeta + phi))
            - np.exp(-potential_value(V_ref, lattice, [block], phi)))


# ---------------------------------------------------------------------------
# the reblocking map


def map_B(
    K: PolymerActivity,
    V: LocalPotential,
    V_ref: LocalPotential,
    L: int,
    Y: Iterable[Block],
    lattice: BlockLattice,
    zeta: np.ndarray,
    phi: np.ndarray,
) -> np.ndarray:
    """Coarse activity on a connected side-L polymer Y.

    Sums over block-disjoint polymer collections and distinct remainder
    blocks whose closure is exactly Y, weighting untouched blocks with the
    fluctuation-independent reference potential.  The remainder sum is
    performed in closed form per coarse block: the closure constraint is
    the statement that every coarse block holds at least one occupied unit
    block, so it factorizes.
    """
    Y = frozenset(tuple(b) for b in Y)
    if L < 2 or int(L) != L:
        raise ValueError("L must be an integer >= 2")
    if not is_connected(Y):
        raise ValueError("Y must be a connected side-L polymer")
    unit_blocks = sorted(b for c in Y for b in lattice.unit_blocks_of(c, L))
    coarse_of = {b: tuple(x // L for x in b) for b in unit_blocks}

    combined = zeta + phi
    batch_shape = combined.shape[: combined.ndim - lattice.d]
    ref_weight = {b: np.exp(-potential_value(V_ref, lattice, [b], phi)) for b in unit_blocks}
    p_val = {b: p_fluctuation(V, V_ref, b, lattice, zeta, phi) for b in unit_blocks}

    polymers = enumerate_polymers(unit_blocks, min(K.support_cap, len(unit_blocks)))
    k_values = {p: np.asarray(K(p, combined, lattice)) for p in polymers}
    live = [p for p in polymers if np.any(k_values[p] != 0.0)]

    total = np.zeros(batch_shape)
    for collection in _disjoint_collections(live):
        used = frozenset().union(*collection) if collection else frozenset()
        occupied_coarse = {coarse_of[b] for b in used}
        term = np.ones(batch_shape)
        for p in collection:
            term = term * k_values[p]
        for c in sorted(Y):
            free = [b for b in unit_blocks if coarse_of[b] == c and b not in used]
            if not free and c not in occupied_coarse:
                term = term * 0.0
                break
            prod_mixed = np.ones(batch_shape)
            prod_ref = np.ones(batch_shape)
            for b in free:
                prod_mixed = prod_mixed * (ref_weight[b] + p_val[b])
                prod_ref = prod_ref * ref_weight[b]
            if c in occupied_coarse:
                term = term * prod_mixed
            else:
                term = term * (prod_mixed - prod_ref)
        total = total + term
    return total


@dataclass(frozen=True)
class RGStepResult:
    potential: LocalPotential
    activity: PolymerActivity
    lattice: BlockLattice


def rg_step_polymer(
    V: LocalPotential,
    K: PolymerActivity,
    V_ref: LocalPotential | None,
    L: int,
    volume: Iterable[Block],
    lattice: BlockLattice,
    ensemble: FieldEnsemble,
    dim: FieldDimension,
) -> RGStepResult:
    """One representation step: reblock, fluctuation-average, dilate.

    The returned activity evaluates coarse polymers Z as the ensemble mean
    of the reblocked activity on L*Z with the dilated field argument; the
    returned potential carries the dilated couplings on the contracted
    geometry.  Batched evaluation against sub-ensembles is exposed through
    the activity's ``batch_means`` attribute for error estimation.
    """
    if V_ref is None:
        V_ref = V
    volume = sorted({tuple(b) for b in volume})
    closures = l_closure(volume, L)
    if set(volume) != {b for c in closures for b in lattice.unit_blocks_of(c, L)}:
        raise ValueError("volume must be a union of side-L blocks")
    if ensemble.grid != lattice.grid:
        raise ValueError("fluctuation ensemble lives on a different grid")
    contracted = lattice.contracted(L)
    v_scaled = V_ref.rescaled(L, dim)
    lam = float(L) ** (-dim.phi_dim)

    def coarse_eval(polymer: frozenset, fields: np.ndarray, lat: BlockLattice) -> np.ndarray:
        coarse_poly = frozenset(tuple(int(x) for x in b) for b in polymer)
        big_phi = lam * fields  # index-preserving relabeling onto the fine geometry
        vals = map_B(K, V, V_ref, L, coarse_poly, lattice, ensemble.values, big_phi)
        return np.mean(vals, axis=0)

    def batch_means(polymer: frozenset, fields: np.ndarray, n_batches: int) -> np.ndarray:
        coarse_poly = frozenset(tuple(int(x) for x in b) for b in polymer)
        big_phi = lam * fields
        vals = map_B(K, V, V_ref, L, coarse_poly, lattice, ensemble.values, big_phi)
        return np.array([np.mean(chunk, axis=0) for chunk in np.array_split(vals, n_batches)])

    activity = PolymerActivity(coarse_eval, support_cap=len(closures), name="rg_step")
    object.__setattr__(activity, "batch_means", batch_means)
    return RGStepResult(potential=v_scaled, activity=activity, lattice=contracted)


# ---------------------------------------------------------------------------
# norms, the stability bound, extraction


@dataclass(frozen=True)
class TestFieldFamily:
    """Documented family of probe fields with the growth weight exp(kappa * sum phi^2).

    The family: the zero field, constants of either sign, single-site
    spikes (one per block), and one low-frequency mode per axis.
    """

    __test__ = False  # not a pytest case despite the domain name

    lattice: BlockLattice
    fields: tuple[tuple[str, np.ndarray], ...]
    kappa: float = 0.5

    @classmethod
    def default(cls, lattice: BlockLattice, volume: Iterable[Block],
                kappa: float = 0.5, spike_amplitude: float = 2.0) -> "TestFieldFamily":
        shape = lattice.grid.shape
        entries: list[tuple[str, np.ndarray]] = [("zero", np.zeros(shape))]
        for amp in (1.0, -1.0):
            entries.append((f"const{amp:+g}", np.full(shape, amp)))
        s = lattice.sites_per_block
        for b in sorted({tuple(x) for x in volume}):
            spike = np.zeros(shape)
            spike[tuple(bi * s + s // 2 for bi in b)] = spike_amplitude
            entries.append((f"spike{b}", spike))
        extent = lattice.grid.extent
        coords = np.arange(extent) * lattice.spacing
        for ax in range(lattice.d):
            mode = np.cos(2.0 * math.pi * coords / lattice.grid.period)
            shape_ax = [1] * lattice.d
            shape_ax[ax] = extent
            entries.append((f"mode{ax}", np.broadcast_to(mode.reshape(shape_ax), shape).copy()))
        return cls(lattice, tuple(entries), kappa)

    def growth_weight(self, values: np.ndarray, region: Region) -> float:
        phi = region.values_at(values)
        return float(np.exp(self.kappa * region.cell_volume * np.sum(phi * phi)))


def polymer_norm(K: PolymerActivity, polymer: frozenset, family: TestFieldFamily) -> float:
    """sup over the family of |K(X, phi)| / G(phi), the desk-scale activity norm."""
    region = family.lattice.block_region(sorted(polymer))
    best = 0.0
    for _, values in family.fields:
        val = float(K(polymer, values, family.lattice))
        best = max(best, abs(val) / family.growth_weight(values, region))
    return best


def norm_aggregate(
    K: PolymerActivity,
    L: float,
    volume: Iterable[Block],
    family: TestFieldFamily,
    size_cap: int | None = None,
) -> float:
    """sup over blocks of sum over containing polymers of L^((d+2)|X|) ||K(X)||."""
    volume = sorted({tuple(b) for b in volume})
    d = family.lattice.d
    cap = min(size_cap or K.support_cap, len(volume))
    polymers = enumerate_polymers(volume, cap)
    norms = {p: polymer_norm(K, p, family) for p in polymers}
    best = 0.0
    for b in volume:
        total = sum(float(L) ** ((d + 2) * len(p)) * norms[p] for p in polymers if b in p)
        best = max(best, total)
    return best


@dataclass(frozen=True)
class StabilityReport:
    norm_value: float
    bound: float
    worst_field: str

    @property
    def ok(self) -> bool:
        return self.norm_value <= self.bound


def stability_bound_check(
    V: LocalPotential, family: TestFieldFamily, Y: Iterable[Block]
) -> StabilityReport:
    """Weighted sup of exp(-V(Y)) against 2^|Y|."""
    blocks = sorted({tuple(b) for b in Y})
    region = family.lattice.block_region(blocks)
    best, worst = 0.0, ""
    for name, values in family.fields:
        val = float(np.exp(-potential_value(V, family.lattice, blocks, values)))
        weighted = val / family.growth_weight(values, region)
        if weighted > best:
            best, worst = weighted, name
    return StabilityReport(best, 2.0 ** len(blocks), worst)


# ---------------------------------------------------------------------------
# linear extraction of expanding parts


class ProjectionConditionError(RuntimeError):
    def __init__(self, message: str, condition_number: float):
        super().__init__(message)
        self.condition_number = condition_number


@dataclass(frozen=True)
class ExtractionReport:
    coefficients: dict[tuple[int, int], float]
    condition_number: float
    basis_signatures: tuple[tuple[int, int], ...]


def _extraction_family(
    lattice: BlockLattice, ordering_variance: float, n_hermite: int = 16,
    probe_amplitude: float = 0.05,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Probe fields and weights making Wick monomials orthogonal on constants.

    Constant fields at Gauss-Hermite nodes scaled by the ordering standard
    deviation carry the Gaussian weights, under which Wick monomials of
    different degree are exactly orthogonal up to the quadrature degree;
    small-amplitude mode pairs identify the gradient direction while
    staying numerically orthogonal to the field powers.
    """
    shape = lattice.grid.shape
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_hermite)
    sigma = math.sqrt(max(ordering_variance, 1e-12))
    fields = [np.full(shape, sigma * x) for x in nodes]
    w = list(weights / np.sum(weights))
    extent = lattice.grid.extent
    coords = np.arange(extent) * lattice.spacing
    probe_w = 0.5 * min(w)
    for ax in range(lattice.d):
        mode = np.cos(2.0 * math.pi * coords / lattice.grid.period)
        shape_ax = [1] * lattice.d
        shape_ax[ax] = extent
        base = np.broadcast_to(mode.reshape(shape_ax), shape).copy()
        for amp in (probe_amplitude, -probe_amplitude):
            fields.append(amp * base)
            w.append(probe_w)
    return fields, np.asarray(w)


def extract_relevant_linear(
    K_tilde: PolymerActivity,
    V_tilde: LocalPotential,
    lattice: BlockLattice,
    block: Block,
    dim: FieldDimension,
    ordering_variance: float,
    grad_constant: float = 0.0,
    cond_limit: float = 1e12,
) -> tuple[LocalPotential, PolymerActivity, ExtractionReport]:
    """Move the expanding single-block part of the activity into the potential.

    Projects K(block, .) onto the potential-representable signatures whose
    scaling exponent is nonnegative and shifts the (uniform) couplings by
    the result; since the potential is uniform, the compensating
    reference-weighted subtraction is applied on every single block, which
    presumes the single-block activity is translation covariant (as the
    coarsening step produces on uniform volumes).  Per block the change of
    exp(-V) + K is exp(-V)*(exp(q) - 1 - q) with q the projection term, so
    the partition density moves only at second order in the activity.
    """
    block = tuple(block)
    if dim.d != lattice.d:
        raise ValueError("scaling dimension and lattice dimension must agree")
    # coupling shifts are exact only when the potential's monomials share the
    # basis ordering constants; a mismatch would leak a term linear in the
    # activity into the partition density
    if abs(V_tilde.phi_variance - ordering_variance) > 1e-12 * max(1.0, abs(ordering_variance)):
        raise ValueError("potential and extraction basis must share the ordering variance")
    if abs(V_tilde.grad_constant - grad_constant) > 1e-12 * max(1.0, abs(grad_constant)):
        raise ValueError("potential and extraction basis must share the gradient constant")
    region = lattice.block_region([block])
    signatures = [(2, 0), (4, 0), (2, 2)]
    relevant = [s for s in signatures if classify(s[0], s[1], dim).exponent >= -1e-12]
    if not relevant:
        return V_tilde, K_tilde, ExtractionReport({}, 1.0, ())

    fields, weights = _extraction_family(lattice, ordering_variance)
    basis = []
    for m, n in relevant:
        ov = ordering_variance if n == 0 else grad_constant
        basis.append(WickMonomial(m=m, n_derivs=n, ordering_variance=ov, region=region))
    design = np.array([[float(mono.evaluate_batch(f)) for mono in basis] for f in fields])
    y = np.array([float(K_tilde(frozenset([block]), f, lattice)) for f in fields])
    sw = np.sqrt(weights)
    a_mat = design * sw[:, None]
    cond = float(np.linalg.cond(a_mat))
    if cond > cond_limit:
        raise ProjectionConditionError(
            f"extraction projection is ill-conditioned (condition number {cond:.3e})", cond
        )
    beta, *_ = np.linalg.lstsq(a_mat, y * sw, rcond=None)
    coeffs = dict(zip(relevant, (float(b) for b in beta)))

    v_prime = replace(
        V_tilde,
        mu=V_tilde.mu - coeffs.get((2, 0), 0.0),
        g=V_tilde.g - coeffs.get((4, 0), 0.0),
        xi=V_tilde.xi - coeffs.get((2, 2), 0.0),
    )

    def evaluator(polymer, fields_, lat):
        base = K_tilde(polymer, fields_, lat)
        if len(polymer) != 1:
            return base
        blk = next(iter(polymer))
        reg = lat.block_region([blk])
        ref = np.exp(-potential_value(V_tilde, lat, [blk], fields_))
        proj = 0.0
        for (m, n), coef in coeffs.items():
            ov = ordering_variance if n == 0 else grad_constant
            mono = WickMonomial(m=m, n_derivs=n, ordering_variance=ov, region=reg)
            proj = proj + coef * mono.evaluate_batch(fields_)
        return base - ref * proj

    k_prime = PolymerActivity(evaluator, K_tilde.support_cap, name="extracted")
    return v_prime, k_prime, ExtractionReport(coeffs, cond, tuple(relevant))

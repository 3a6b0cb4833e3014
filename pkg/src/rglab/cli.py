"""Command line runner: builds artifacts, runs checks, writes CSV + figures + manifests.

Exit codes: 0 when every check passes, 1 when a numerical check fails,
2 on invalid input or configuration.  All randomness derives from the
single --seed value: task k of a subcommand uses SeedSequence([seed, k]),
and sample i inside an ensemble uses SeedSequence([task_seed, i]).

A configuration file (flat ``key = value`` lines, '#' comments) supplies
defaults; command line flags override it.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .reporting import (
    CheckRow,
    StopWatch,
    load_manifests,
    save_check_figure,
    save_line_figure,
    write_check_csv,
    write_csv,
    write_manifest,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_BAD_INPUT = 2


class ConfigError(ValueError):
    pass


def _parse_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _floats(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(",", " ").split()]


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.replace(",", " ").split()]


def _task_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# subcommands


def cmd_decompose(opts) -> int:
    from .kernels import (
        FieldDimension,
        build_mollifier,
        bump_profile,
        check_positive_definite,
        fluctuation_covariance,
        kernel_to_csv,
        unit_cutoff_covariance,
        verify_scaling_decomposition,
    )

    dims = _ints(opts.dims)
    scales = _floats(opts.scales)
    phis = _floats(opts.phi_dims)
    if any(L <= 1.0 for L in scales):
        raise ConfigError("every scale factor must exceed 1")
    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    checks: list[CheckRow] = []
    artifacts: list[str] = []
    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 0]))
    with StopWatch() as timer:
        for d in dims:
            u = build_mollifier(bump_profile, opts.resolution, d=d)
            pts = rng.uniform(-1.5, 1.5, size=(50, d))
            pd_rep = check_positive_definite(u, pts)
            checks.append(CheckRow(
                name=f"mollifier_pd_d{d}",
                value=pd_rep.min_eigenvalue,
                reference=0.0,
                tolerance=pd_rep.tolerance,
                status=pd_rep.ok,
                kind="positive_definite",
            ))
            for phi in phis:
                dim = FieldDimension(d, phi)
                C = unit_cutoff_covariance(u, dim)
                for L in scales:
                    gamma = fluctuation_covariance(u, dim, L)
                    resid = verify_scaling_decomposition(C, gamma, L)
                    name = f"split_d{d}_phi{phi:g}_L{L:g}"
                    checks.append(CheckRow(
                        name=name, value=resid, reference=0.0,
                        tolerance=opts.tolerance, status=resid <= opts.tolerance,
                        kind="scale_split",
                    ))
                    if d == dims[0] and phi == phis[0]:
                        csv_path = out / f"kernel_fluctuation_d{d}_phi{phi:g}_L{L:g}.csv"
                        kernel_to_csv(gamma, csv_path)
                        artifacts.append(csv_path.name)
                if phi == phis[0]:
                    csv_path = out / f"kernel_unit_cutoff_d{d}_phi{phi:g}.csv"
                    kernel_to_csv(C, csv_path)
                    artifacts.append(csv_path.name)
        # figure: the split at the first configuration
        d, phi, L = dims[0], phis[0], scales[0]
        u = build_mollifier(bump_profile, opts.resolution, d=d)
        dim = FieldDimension(d, phi)
        C = unit_cutoff_covariance(u, dim)
        gamma = fluctuation_covariance(u, dim, L)
        r = np.linspace(0.0, float(L) * 1.04, 400)
        fig = out / "decomposition.png"
        save_line_figure(
            fig, r,
            {
                "C": C.at(r),
                "fluctuation": gamma.at(r),
                "dilated C": float(L) ** (-C.beta) * C.at(r / L),
                "residual": np.abs(C.at(r) - gamma.at(r) - float(L) ** (-C.beta) * C.at(r / L)),
            },
            "r", "kernel value", f"scale split d={d} phi_dim={phi:g} L={L:g}",
        )
        artifacts.append(fig.name)
    rows = write_check_csv(out / "decompose_checks.csv",
                           {"subcommand": "decompose", "seed": opts.seed}, checks)
    artifacts.append(rows.name)
    write_manifest(out, "decompose", _echo_config(opts), checks, artifacts, timer.elapsed)
    return EXIT_OK if all(c.status for c in checks) else EXIT_CHECK_FAILED


def cmd_sample(opts) -> int:
    from .kernels import FieldDimension, build_mollifier, bump_profile, fluctuation_covariance
    from .fields import LatticeGrid, empirical_covariance, sample_gaussian, save_ensemble

    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    dim = FieldDimension(opts.d, opts.phi_dim)
    with StopWatch() as timer:
        u = build_mollifier(bump_profile, opts.resolution, d=opts.d)
        gamma = fluctuation_covariance(u, dim, opts.scale)
        grid = LatticeGrid(opts.d, opts.extent, opts.spacing)
        if not grid.fits_kernel(gamma.range):
            raise ConfigError(
                f"grid period {grid.period} must exceed twice the kernel range {gamma.range}"
            )
        ens = sample_gaussian(gamma, grid, _task_seed(opts.seed, 1), opts.count)
        save_ensemble(ens, out / "ensemble")
        checks: list[CheckRow] = []
        rows = []
        max_h = grid.extent // 2
        for h in sorted({0, 1, 2, max(1, max_h // 4), max(2, max_h // 2)}):
            disp = (h,) + (0,) * (opts.d - 1)
            mean, se = empirical_covariance(ens, disp)
            ref = float(gamma.at(grid.displacement_distance(disp)))
            z = abs(mean - ref) / se if se > 0 else 0.0
            rows.append((h, grid.displacement_distance(disp), mean, se, ref, z))
            checks.append(CheckRow(
                name=f"covariance_h{h}", value=mean, stderr=se,
                reference=ref, tolerance=3.0, zscore=z, status=z <= 3.0,
                kind="covariance",
            ))
        csv_path = write_csv(
            out / "covariance.csv",
            {"subcommand": "sample", "seed": opts.seed, "count": opts.count,
             "L": opts.scale, "d": opts.d, "phi_dim": opts.phi_dim},
            ["h", "distance", "empirical", "stderr", "kernel", "zscore"],
            rows,
        )
        fig = save_line_figure(
            out / "covariance.png",
            [r[1] for r in rows],
            {"empirical": [r[2] for r in rows], "kernel": [r[4] for r in rows]},
            "distance", "covariance", "sampled vs kernel covariance",
        )
    write_manifest(out, "sample", _echo_config(opts), checks,
                   [csv_path.name, fig.name, "ensemble"], timer.elapsed)
    return EXIT_OK if all(c.status for c in checks) else EXIT_CHECK_FAILED


def cmd_rgcheck(opts) -> int:
    from .kernels import FieldDimension, build_mollifier, bump_profile, fluctuation_covariance, unit_cutoff_covariance
    from .fields import LatticeGrid, LatticeField
    from .functionals import (
        CharacteristicFunctional,
        CovarianceSplit,
        Region,
        WickMonomial,
        apply_TL_analytic,
        apply_TL_mc,
        gradient_ordering_constant,
        invariance_check,
        semigroup_check,
    )

    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    dim = FieldDimension(opts.d, opts.phi_dim)
    L = opts.scale
    checks: list[CheckRow] = []
    with StopWatch() as timer:
        u = build_mollifier(bump_profile, opts.resolution, d=opts.d)
        C = unit_cutoff_covariance(u, dim)
        gamma = fluctuation_covariance(u, dim, L)
        split = CovarianceSplit(C, gamma, L)
        grid = LatticeGrid(opts.d, opts.extent, opts.spacing)
        lo = (grid.extent // 4,) * opts.d
        hi = (grid.extent // 4 + grid.extent // 2,) * opts.d
        region = Region.box(grid, lo, hi)
        small = LatticeGrid(opts.d, opts.extent, opts.spacing / L)
        xs = np.arange(grid.extent) * small.spacing
        phi_vals = 0.3 * np.cos(2.0 * math.pi * xs / small.period)
        mesh = phi_vals
        for _ in range(opts.d - 1):
            mesh = np.multiply.outer(mesh, np.ones(grid.extent))
        phi = LatticeField(mesh, small)
        for m in (1, 2, 3, 4):
            mono = WickMonomial(m, 0, C.at(0.0), region)
            factor, mapped = apply_TL_analytic(mono, L, split)
            expect = float(L) ** (dim.d - m * dim.phi_dim)
            checks.append(CheckRow(
                name=f"eigen_factor_m{m}", value=factor, reference=expect,
                tolerance=1e-12, status=abs(factor - expect) <= 1e-12 * abs(expect),
                kind="eigenfunction",
            ))
            est = apply_TL_mc(mono, L, gamma, grid, _task_seed(opts.seed, 10 + m),
                              opts.count, phi=phi)
            ref = factor * float(mapped.evaluate_batch(phi.values[None])[0])
            z = est.z_against(ref)
            checks.append(CheckRow(
                name=f"eigen_mc_m{m}", value=float(np.real(est.mean)), stderr=est.stderr,
                reference=ref, tolerance=3.0, zscore=z, status=z <= 3.0,
                kind="eigenfunction",
            ))
        grad = WickMonomial(2, 2, gradient_ordering_constant(C, grid), region)
        factor, mapped = apply_TL_analytic(grad, L, split)
        est = apply_TL_mc(grad, L, gamma, grid, _task_seed(opts.seed, 20), opts.count, phi=phi)
        ref = factor * float(mapped.evaluate_batch(phi.values[None])[0])
        z = est.z_against(ref)
        checks.append(CheckRow(
            name="eigen_mc_grad", value=float(np.real(est.mean)), stderr=est.stderr,
            reference=ref, tolerance=3.0, zscore=z, status=z <= 3.0,
            kind="eigenfunction",
        ))
        cf = CharacteristicFunctional(t=1.0 / math.sqrt(max(C.at(0.0), 1e-30)),
                                      site=(grid.extent // 3,) * opts.d)
        for n in (1, 2):
            rep = semigroup_check(cf, u, dim, L, n, grid,
                                  tuple(_task_seed(opts.seed, 30 + 3 * n + j) for j in range(3)),
                                  opts.count)
            checks.append(CheckRow(
                name=f"semigroup_n{n}", value=float(np.real(rep.composite.mean)),
                stderr=rep.composite.stderr, reference=float(np.real(rep.direct.mean)),
                tolerance=3.0, zscore=rep.z, status=rep.z <= 3.0,
                kind="semigroup",
            ))
        site = (grid.extent // 3,) * opts.d

        class _Pow:
            def __init__(self, p):
                self.p = p

            def evaluate_batch(self, fields):
                return fields[(Ellipsis,) + site] ** self.p

        for p, name in ((2, "invariance_phi2"), (4, "invariance_phi4")):
            rep = invariance_check(_Pow(p), u, dim, L, grid,
                                   _task_seed(opts.seed, 50 + p), opts.count, opts.n_scales)
            checks.append(CheckRow(
                name=name, value=float(rep.lhs.mean), stderr=rep.lhs.stderr,
                reference=float(rep.rhs.mean), tolerance=3.0, zscore=rep.z,
                status=rep.z <= 3.0, kind="invariance",
            ))
    csv_path = write_check_csv(out / "rgcheck.csv",
                               {"subcommand": "rgcheck", "seed": opts.seed,
                                "count": opts.count, "L": L}, checks)
    fig = save_check_figure(out / "rgcheck.png", checks, "scale map checks")
    write_manifest(out, "rgcheck", _echo_config(opts), checks,
                   [csv_path.name, fig.name], timer.elapsed)
    return EXIT_OK if all(c.status for c in checks) else EXIT_CHECK_FAILED


def cmd_flow(opts) -> int:
    from .kernels import FieldDimension, build_mollifier, bump_profile, unit_cutoff_covariance
    from .flow import CouplingState, critical_mass, derive_coefficients, integrate_flow

    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    if opts.epsilon is not None:
        dim = FieldDimension.epsilon_model(opts.epsilon)
    else:
        dim = FieldDimension(opts.d, opts.phi_dim)
    checks: list[CheckRow] = []
    with StopWatch() as timer:
        u = build_mollifier(bump_profile, opts.resolution, d=dim.d)
        C = unit_cutoff_covariance(u, dim)
        coeff = derive_coefficients(u, C, dim)
        mu0 = opts.mu0
        if opts.critical:
            mu0 = critical_mass(opts.g0, coeff, horizon=opts.horizon)
        traj = integrate_flow(CouplingState(0.0, opts.g0, mu0, opts.xi0),
                              coeff, opts.horizon, opts.step)
        rows = list(zip(traj.ts, traj.gs, traj.mus, traj.xis))
        csv_path = write_csv(
            out / "trajectory.csv",
            {"subcommand": "flow", "d": dim.d, "phi_dim": dim.phi_dim,
             "a": coeff.a, "b": coeff.b, "c": coeff.c, "g0": opts.g0,
             "mu0": mu0, "xi0": opts.xi0, "step": opts.step},
            ["t", "g", "mu", "xi"], rows,
        )
        mult = coeff.metadata["channel_multiplicities"]
        coeff_path = write_csv(
            out / "coefficients.csv",
            {"subcommand": "flow", "d": dim.d, "phi_dim": dim.phi_dim},
            ["a", "b", "c", "e_g", "e_mu", "e_xi", "channel_combinatorics"],
            [[coeff.a, coeff.b, coeff.c, coeff.e_g, coeff.e_mu, coeff.e_xi,
              ":".join(str(mult[k]) for k in sorted(mult))]],
        )
        for name, val in (("a", coeff.a), ("b", coeff.b), ("c", coeff.c)):
            checks.append(CheckRow(name=f"coefficient_{name}_positive", value=val,
                                   reference=0.0, tolerance=0.0, status=val > 0.0,
                                   kind="flow"))
        if abs(coeff.e_g) < 1e-12:  # marginal line admits the closed-form decay
            exact = opts.g0 / (1.0 + coeff.a * opts.g0 * traj.ts)
            err = float(np.max(np.abs(traj.gs - exact)))
            checks.append(CheckRow(name="marginal_closed_form", value=err,
                                   reference=0.0, tolerance=1e-8, status=err <= 1e-8,
                                   kind="flow"))
        fig = save_line_figure(
            out / "trajectory.png", traj.ts,
            {"g": traj.gs, "mu": traj.mus, "xi": traj.xis},
            "t", "coupling", f"flow d={dim.d} phi_dim={dim.phi_dim:g}",
        )
    write_manifest(out, "flow", _echo_config(opts), checks,
                   [csv_path.name, coeff_path.name, fig.name], timer.elapsed)
    return EXIT_OK if all(c.status for c in checks) else EXIT_CHECK_FAILED


def cmd_fixedpoint(opts) -> int:
    from .kernels import FieldDimension, build_mollifier, bump_profile, unit_cutoff_covariance
    from .flow import CouplingState, derive_coefficients, fixed_point, integrate_flow

    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    if opts.epsilon is not None:
        dim = FieldDimension.epsilon_model(opts.epsilon)
    else:
        dim = FieldDimension(opts.d, opts.phi_dim)
    checks: list[CheckRow] = []
    with StopWatch() as timer:
        u = build_mollifier(bump_profile, opts.resolution, d=dim.d)
        C = unit_cutoff_covariance(u, dim)
        coeff = derive_coefficients(u, C, dim)
        rep = fixed_point(coeff)
        expect_g = coeff.e_g / coeff.a if coeff.e_g > 0 else 0.0
        expect_s = -coeff.e_g if coeff.e_g > 0 else coeff.e_g
        checks.append(CheckRow(name="g_star", value=rep.g_star, reference=expect_g,
                               tolerance=1e-12, kind="fixed_point",
                               status=abs(rep.g_star - expect_g) <= 1e-12 * max(1.0, abs(expect_g))))
        checks.append(CheckRow(name="stability_exponent", value=rep.stability_exponent,
                               reference=expect_s, tolerance=1e-12, kind="fixed_point",
                               status=abs(rep.stability_exponent - expect_s) <= 1e-12))
        csv_path = write_csv(
            out / "fixedpoint.csv",
            {"subcommand": "fixedpoint", "d": dim.d, "phi_dim": dim.phi_dim},
            ["g_star", "stability_exponent", "a", "e_g"],
            [[rep.g_star, rep.stability_exponent, coeff.a, coeff.e_g]],
        )
        gs = np.linspace(0.0, max(2.0 * rep.g_star, 1.0 / coeff.a), 200)
        fig = save_line_figure(
            out / "fixedpoint.png", gs,
            {"dg/dt": coeff.e_g * gs - coeff.a * gs ** 2},
            "g", "dg/dt", "quartic flow line",
        )
    write_manifest(out, "fixedpoint", _echo_config(opts), checks,
                   [csv_path.name, fig.name], timer.elapsed)
    return EXIT_OK if all(c.status for c in checks) else EXIT_CHECK_FAILED


def cmd_polymer(opts) -> int:
    from .kernels import FieldDimension, build_mollifier, bump_profile, fluctuation_covariance
    from .fields import load_ensemble, sample_gaussian
    from .functionals import LocalPotential
    from .polymers import (
        BlockLattice,
        TestFieldFamily,
        constant_activity,
        enumerate_polymers,
        map_B,
        partition_density,
        polymer_norm,
        potential_value,
        rg_step_polymer,
    )

    out = Path(opts.out)
    out.mkdir(parents=True, exist_ok=True)
    if opts.blocks % opts.scale:
        raise ConfigError("blocks must be a multiple of the scale factor")
    dim = FieldDimension(opts.d, opts.phi_dim)
    L = int(opts.scale)
    checks: list[CheckRow] = []
    with StopWatch() as timer:
        lat = BlockLattice(opts.d, max(4 * L, 2 * opts.blocks), opts.sites_per_block)
        volume = [(i,) + (0,) * (opts.d - 1) for i in range(opts.blocks)]
        u = build_mollifier(bump_profile, opts.resolution, d=opts.d)
        gamma = fluctuation_covariance(u, dim, L)
        if not lat.grid.fits_kernel(gamma.range):
            raise ConfigError("block volume too small for the fluctuation range")
        if opts.ensemble:
            ens = load_ensemble(opts.ensemble)
            if ens.grid != lat.grid:
                raise ConfigError(
                    f"stored ensemble grid {ens.grid} does not match the block "
                    f"lattice grid {lat.grid}"
                )
            meta = ens.kernel_meta
            if (meta.get("kind") != "fluctuation" or meta.get("L") != float(L)
                    or meta.get("d") != opts.d or meta.get("phi_dim") != opts.phi_dim):
                raise ConfigError(
                    "stored ensemble was sampled from a different fluctuation kernel: "
                    f"{meta}"
                )
        else:
            ens = sample_gaussian(gamma, lat.grid, _task_seed(opts.seed, 1), opts.count)
        V = LocalPotential(xi=opts.xi, g=opts.g, mu=opts.mu)
        K = constant_activity({frozenset([volume[0]]): 0.02,
                               frozenset([volume[1]]): -0.015,
                               frozenset(volume[:2]): 0.01})
        rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 2]))
        zeta0 = ens.values[:4]
        phi0 = 0.2 * rng.standard_normal(lat.grid.shape)
        lhs = partition_density(V, K, volume, lat, zeta0 + phi0)
        coarse = sorted({tuple(x // L for x in b) for b in volume})
        # exact reblocking identity when the volume is one coarse polymer
        if len(coarse) == 1:
            bk = map_B(K, V, V, L, coarse, lat, zeta0, np.broadcast_to(phi0, zeta0.shape))
            ident = np.exp(-float(potential_value(V, lat, volume, phi0))) + bk
            err = float(np.max(np.abs(lhs - ident)))
            checks.append(CheckRow(name="reblocking_identity", value=err, reference=0.0,
                                   tolerance=1e-12, status=err <= 1e-12, kind="polymer"))
        res = rg_step_polymer(V, K, None, L, volume, lat, ens, dim)
        clat = res.lattice
        phi_small = 0.25 * np.cos(
            2.0 * math.pi * np.arange(clat.grid.extent) * clat.spacing / clat.grid.period
        )
        mesh = phi_small
        for _ in range(opts.d - 1):
            mesh = np.multiply.outer(mesh, np.ones(clat.grid.extent))
        z_poly = float(partition_density(res.potential, res.activity, coarse, clat, mesh))
        ens2 = sample_gaussian(gamma, lat.grid, _task_seed(opts.seed, 3), opts.count)
        big_phi = float(L) ** (-dim.phi_dim) * mesh
        z_dir = partition_density(V, K, volume, lat, ens2.values + big_phi)
        m_dir = float(np.mean(z_dir))
        se_dir = float(np.std(z_dir, ddof=1) / math.sqrt(len(z_dir)))
        bm = res.activity.batch_means(frozenset(coarse[:1]), mesh, 20)
        e0 = math.exp(-float(potential_value(res.potential, clat, coarse, mesh)))
        if len(coarse) == 1:
            se_poly = float(np.std(e0 + bm, ddof=1) / math.sqrt(len(bm)))
        else:
            se_poly = float(np.std(bm, ddof=1) / math.sqrt(len(bm)))
        z = abs(z_poly - m_dir) / math.hypot(se_poly, se_dir)
        checks.append(CheckRow(name="representation_stability", value=z_poly,
                               stderr=se_poly, reference=m_dir, tolerance=3.0,
                               zscore=z, status=z <= 3.0, kind="polymer"))
        # per-polymer norm report on the input volume
        family = TestFieldFamily.default(lat, volume)
        rows = []
        for idx, poly in enumerate(enumerate_polymers(volume)):
            blocks_txt = "|".join("x".join(str(x) for x in b) for b in sorted(poly))
            rows.append([
                idx, blocks_txt, len(poly),
                polymer_norm(K, poly, family),
                float(L) ** ((opts.d + 2) * len(poly)),
            ])
        poly_csv = write_csv(out / "polymers.csv",
                             {"subcommand": "polymer", "L": L, "d": opts.d,
                              "kappa": family.kappa},
                             ["polymer_id", "blocks", "size", "activity_norm", "A_weight"],
                             rows)
        # step manifest linking the input and output couple
        step_manifest = {
            "input": {"potential": {"xi": V.xi, "g": V.g, "mu": V.mu},
                      "activity": "constant table on the input volume",
                      "ensemble_seed": ens.seed, "count": ens.count},
            "output": {"potential": {"xi": res.potential.xi, "g": res.potential.g,
                                     "mu": res.potential.mu},
                       "activity": "ensemble average of the reblocked input",
                       "coarse_blocks": [list(c) for c in coarse]},
        }
        with open(out / "rgstep.json", "w", encoding="utf-8") as fh:
            json.dump(step_manifest, fh, indent=2, sort_keys=True)
        csv_path = write_check_csv(out / "polymer.csv",
                                   {"subcommand": "polymer", "seed": opts.seed,
                                    "count": opts.count, "L": L}, checks)
        fig = save_check_figure(out / "polymer.png", checks, "polymer checks")
    write_manifest(out, "polymer", _echo_config(opts), checks,
                   [csv_path.name, fig.name, poly_csv.name, "rgstep.json"], timer.elapsed)
    return EXIT_OK if all(c.status for c in checks) else EXIT_CHECK_FAILED


def cmd_report(opts) -> int:
    run_dir = Path(opts.run_dir)
    if not run_dir.exists():
        print(f"error: no such directory {run_dir}", file=sys.stderr)
        return EXIT_BAD_INPUT
    manifests = load_manifests(run_dir)
    if not manifests:
        print(f"error: no manifests under {run_dir}", file=sys.stderr)
        return EXIT_BAD_INPUT
    rows = []
    checks: list[CheckRow] = []
    for man in manifests:
        for chk in man["checks"]:
            name = f"{man['subcommand']}:{chk['name']}"
            rows.append([
                name, chk["value"], chk.get("reference", ""),
                chk.get("tolerance", ""), chk["status"],
            ])
            checks.append(CheckRow(
                name=name,
                value=float(chk["value"]),
                reference=float(chk.get("reference") or 0.0),
                tolerance=float(chk.get("tolerance") or 0.0),
                zscore=chk.get("zscore"),
                status=chk["status"] == "pass",
                kind=man["subcommand"],
            ))
    out = Path(opts.out) if opts.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    csv_path = write_csv(out / "summary.csv", {"subcommand": "report", "runs": len(manifests)},
                         ["name", "value", "reference", "tolerance", "status"],
                         rows)
    save_check_figure(out / "summary.png", checks, "consolidated checks")
    n_fail = sum(1 for c in checks if not c.status)
    for row in rows:
        print(f"{row[0]:<44s} value={row[1]!s:<24s} status={row[4]}")
    print(f"{len(rows)} checks, {n_fail} failing; table written to {csv_path}")
    return EXIT_OK if n_fail == 0 else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------
# argument plumbing


def _echo_config(opts) -> dict:
    skip = {"func", "config"}
    return {k: v for k, v in sorted(vars(opts).items()) if k not in skip}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key=value configuration file")
    p.add_argument("--seed", type=int, default=2024, help="top-level seed; all streams derive from it")
    p.add_argument("--out", default="runs/out", help="output directory")
    p.add_argument("--resolution", type=float, default=1.0 / 256.0,
                   help="mollifier table step")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rglab",
        description="multiscale covariance decompositions, scale-map checks, "
                    "coupling flows and polymer representation experiments",
    )
    parser.add_argument("--version", action="version", version=f"rglab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompose", help="build kernels and verify the scale split")
    _add_common(p)
    p.add_argument("--dims", default="1,2,3", help="comma list of spatial dimensions")
    p.add_argument("--scales", default="2,2.718281828459045,10", help="comma list of L values")
    p.add_argument("--phi-dims", dest="phi_dims", default="0.5,0.725")
    p.add_argument("--tolerance", type=float, default=1e-10)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("sample", help="sample lattice fields and test the covariance")
    _add_common(p)
    p.add_argument("--d", type=int, default=1, help="spatial dimension")
    p.add_argument("--phi-dim", dest="phi_dim", type=float, default=0.5, help="field scaling dimension")
    p.add_argument("--scale", type=float, default=2.0, help="fluctuation scale factor L")
    p.add_argument("--extent", type=int, default=64, help="lattice points per axis")
    p.add_argument("--spacing", type=float, default=0.25, help="lattice spacing")
    p.add_argument("--count", type=int, default=2000, help="Monte Carlo sample count")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("rgcheck", help="eigenfunction, semigroup and invariance checks")
    _add_common(p)
    p.add_argument("--d", type=int, default=1, help="spatial dimension")
    p.add_argument("--phi-dim", dest="phi_dim", type=float, default=0.725, help="field scaling dimension")
    p.add_argument("--scale", type=float, default=2.0, help="scale factor L")
    p.add_argument("--extent", type=int, default=512, help="lattice points per axis")
    p.add_argument("--spacing", type=float, default=0.5, help="lattice spacing")
    p.add_argument("--count", type=int, default=2000, help="Monte Carlo sample count")
    p.add_argument("--n-scales", dest="n_scales", type=int, default=4,
                   help="multiscale truncation index for the stationary measure")
    p.set_defaults(func=cmd_rgcheck)

    p = sub.add_parser("flow", help="integrate the coupling flow")
    _add_common(p)
    p.add_argument("--d", type=int, default=4, help="spatial dimension")
    p.add_argument("--phi-dim", dest="phi_dim", type=float, default=1.0, help="field scaling dimension")
    p.add_argument("--epsilon", type=float, default=None,
                   help="use the d=3 epsilon parametrization instead of --d/--phi-dim")
    p.add_argument("--g0", type=float, default=0.5, help="initial quartic coupling")
    p.add_argument("--mu0", type=float, default=0.0, help="initial quadratic coupling")
    p.add_argument("--xi0", type=float, default=0.0, help="initial gradient coupling")
    p.add_argument("--critical", action="store_true", help="tune mu0 to the bounded manifold")
    p.add_argument("--horizon", type=float, default=10.0, help="integration horizon")
    p.add_argument("--step", type=float, default=0.005, help="integration step")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("fixedpoint", help="fixed point and stability of the quartic flow")
    _add_common(p)
    p.add_argument("--d", type=int, default=3, help="spatial dimension")
    p.add_argument("--phi-dim", dest="phi_dim", type=float, default=0.725, help="field scaling dimension")
    p.add_argument("--epsilon", type=float, default=0.1, help="distance from the marginal exponent")
    p.set_defaults(func=cmd_fixedpoint)

    p = sub.add_parser("polymer", help="polymer representation checks")
    _add_common(p)
    p.add_argument("--d", type=int, default=1, help="spatial dimension")
    p.add_argument("--phi-dim", dest="phi_dim", type=float, default=0.5, help="field scaling dimension")
    p.add_argument("--scale", type=int, default=2, help="coarse block side L (integer)")
    p.add_argument("--blocks", type=int, default=2, help="unit blocks in the volume")
    p.add_argument("--sites-per-block", dest="sites_per_block", type=int, default=4,
                   help="lattice sites per unit block per axis")
    p.add_argument("--count", type=int, default=2000, help="fluctuation sample count")
    p.add_argument("--g", type=float, default=0.02, help="quartic coupling")
    p.add_argument("--mu", type=float, default=0.05, help="quadratic coupling")
    p.add_argument("--xi", type=float, default=0.01, help="gradient coupling")
    p.add_argument("--ensemble", default=None,
                   help="directory of a stored fluctuation ensemble to reuse")
    p.set_defaults(func=cmd_polymer)

    p = sub.add_parser("report", help="consolidate manifests into one summary table")
    p.add_argument("run_dir", help="directory containing run manifests")
    p.add_argument("--out", default=None, help="where to write the summary (defaults to run_dir)")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise ConfigError("--config requires a path")
    cfg = _parse_config_file(argv[idx + 1])
    # config keys become defaults for the chosen subparser; flags still win
    command = argv[0] if argv and not argv[0].startswith("-") else None
    for action in parser._subparsers._group_actions:  # type: ignore[union-attr]
        if command and command in action.choices:
            subparser = action.choices[command]
            known = {a.dest for a in subparser._actions}
            unknown = set(cfg) - known
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            typed = {}
            for key, val in cfg.items():
                act = next(a for a in subparser._actions if a.dest == key)
                if isinstance(act, argparse._StoreTrueAction):
                    typed[key] = val.lower() in ("1", "true", "yes")
                elif act.type is not None:
                    typed[key] = act.type(val)
                else:
                    typed[key] = val
            subparser.set_defaults(**typed)
    return argv


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_defaults(parser, argv)
        opts = parser.parse_args(argv)
        return opts.func(opts)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())

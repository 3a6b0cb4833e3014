import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from rglab.kernels import (
    CovarianceKernel,
    FieldDimension,
    build_mollifier,
    bump_profile,
    check_positive_definite,
    fluctuation_covariance,
    kernel_from_csv,
    kernel_to_csv,
    min_gram_eigenvalue,
    rescaled_fluctuation,
    scale_kernel,
    unit_cutoff_covariance,
    verify_scaling_decomposition,
)

from conftest import RESOLUTION


class TestFieldDimension:
    def test_from_alpha(self):
        dim = FieldDimension.from_alpha(3, 2.0)
        assert dim.phi_dim == 0.5

    def test_alpha_range_enforced(self):
        with pytest.raises(ValueError):
            FieldDimension.from_alpha(3, 2.5)

    def test_nonpositive_phi_rejected(self):
        with pytest.raises(ValueError):
            FieldDimension(2, 0.0)

    def test_epsilon_model(self):
        dim = FieldDimension.epsilon_model(0.1)
        assert dim.d == 3
        assert math.isclose(dim.phi_dim, (3 - 0.1) / 4)


class TestMollifier:
    def test_range_one_exact(self, u1):
        # unit range by construction of the self-convolution
        r = np.linspace(1.0, 3.0, 57)
        assert np.all(u1.at(r) == 0.0)
        assert np.all(u1.values[u1.r >= 1.0] == 0.0)

    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_origin_is_squared_norm(self, mollifiers, d):
        u = mollifiers[d]
        area = 2.0 if d == 1 else 2.0 * math.pi ** (d / 2) / math.gamma(d / 2)
        ref, _ = integrate.quad(lambda s: s ** (d - 1) * bump_profile(s) ** 2, 0.0, 0.5)
        ref *= area
        assert u.at(0.0) > 0.0
        assert math.isclose(u.at(0.0), ref, rel_tol=1e-10)

    def test_gram_positive_definite_d3(self, u3):
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1.2, 1.2, size=(50, 3))
        min_eig, trace = min_gram_eigenvalue(u3.at, pts)
        assert min_eig >= -1e-10 * trace

    def test_tail_rejected(self):
        with pytest.raises(ValueError, match="vanish"):
            build_mollifier(lambda r: np.exp(-np.asarray(r) ** 2), 1 / 64, d=1)

    def test_negative_profile_rejected(self):
        def g(r):
            r = np.asarray(r, dtype=float)
            return np.where(np.abs(r) < 0.5, -1.0 + 0.0 * r, 0.0)

        with pytest.raises(ValueError, match="nonnegative"):
            build_mollifier(g, 1 / 64, d=1)

    def test_bad_resolution_rejected(self):
        with pytest.raises(ValueError):
            build_mollifier(bump_profile, 0.0, d=1)


class TestUnitCutoff:
    def test_origin_closed_form(self, u3, dim3_half):
        # at the origin the scale integral collapses to u(0)/(2 phi_dim)
        C = unit_cutoff_covariance(u3, dim3_half)
        assert math.isclose(C.at(0.0), u3.at(0.0), rel_tol=1e-13)

    def test_everywhere_finite(self, u3, dim3_half):
        C = unit_cutoff_covariance(u3, dim3_half)
        r = np.linspace(0.0, 50.0, 1001)
        vals = C.at(r)
        assert np.all(np.isfinite(vals))
        assert np.all(vals > 0.0)

    def test_matches_independent_quadrature(self, u3, dim3_half):
        C = unit_cutoff_covariance(u3, dim3_half)
        beta = dim3_half.beta
        for x in (0.3, 0.75, 2.0):
            ref, err = integrate.quad(
                lambda l: l ** (-1.0 - beta) * u3.at(x / l), max(1.0, x), np.inf, limit=400
            )
            assert math.isclose(C.at(x), ref, rel_tol=1e-8)

    def test_dimension_mismatch_rejected(self, u3):
        with pytest.raises(ValueError, match="d="):
            unit_cutoff_covariance(u3, FieldDimension(2, 0.5))

    def test_power_tail_is_exact_scaling(self, u1, dim1_half):
        # beyond the mollifier range the kernel is a pure power of the radius
        C = unit_cutoff_covariance(u1, dim1_half)
        for r in (1.0, 1.7, 4.0, 25.0):
            assert math.isclose(C.at(r) * r ** dim1_half.beta, C.at(1.0), rel_tol=1e-12)


class TestFluctuation:
    def test_small_L_limit(self, u1, dim1_half):
        # the scale band collapses, so the kernel vanishes uniformly
        g = fluctuation_covariance(u1, dim1_half, 1.0 + 1e-8)
        assert np.max(np.abs(g.values)) < 1e-7 * u1.at(0.0)

    def test_finite_range_bit_zero(self, u1, dim1_half):
        g = fluctuation_covariance(u1, dim1_half, 2.0)
        r = np.linspace(2.0, 6.0, 101)
        assert np.all(g.at(r) == 0.0)
        assert np.all(g.values[g.r >= 2.0] == 0.0)

    def test_origin_closed_form(self, u1, dim1_half):
        L = 3.0
        g = fluctuation_covariance(u1, dim1_half, L)
        expect = u1.at(0.0) * (1.0 - L ** (-dim1_half.beta)) / dim1_half.beta
        assert math.isclose(g.at(0.0), expect, rel_tol=1e-13)

    def test_L_at_most_one_rejected(self, u1, dim1_half):
        with pytest.raises(ValueError):
            fluctuation_covariance(u1, dim1_half, 1.0)


class TestScaleKernel:
    def test_origin_value(self, u1, dim1_half):
        C = unit_cutoff_covariance(u1, dim1_half)
        s = scale_kernel(C, 2.0)
        assert math.isclose(s.at(0.0), 2.0 ** (-dim1_half.beta) * C.at(0.0), rel_tol=1e-14)

    @given(L=st.floats(min_value=1.1, max_value=6.0))
    def test_group_law(self, u1, dim1_half, L):
        C = unit_cutoff_covariance(u1, dim1_half)
        twice = scale_kernel(scale_kernel(C, L), L)
        once = scale_kernel(C, L * L)
        assert np.allclose(twice.r, once.r, rtol=1e-12, atol=0.0)
        assert np.allclose(twice.values, once.values, rtol=1e-12, atol=0.0)

    def test_dilated_fluctuation_support(self, u1, dim1_half):
        L = 2.0
        g = fluctuation_covariance(u1, dim1_half, L)
        s = scale_kernel(g, L)
        assert s.range == L * L
        assert s.n == 1
        # the dilated kernel carries the scale integral over [L, L^2]: its
        # support radius is exactly L^2 and it is live just below
        assert s.at(L * L) == 0.0
        assert s.at(L * L - 0.05) != 0.0


class TestRescaledFluctuation:
    def test_n_zero_identity(self, u1, dim1_half):
        g = fluctuation_covariance(u1, dim1_half, 2.0)
        g0 = rescaled_fluctuation(u1, dim1_half, 2.0, 0)
        assert np.array_equal(g.values, g0.values)
        assert np.array_equal(g.r, g0.r)

    def test_origin_scaling(self, u1, dim1_half):
        L, n = 2.0, 3
        g = fluctuation_covariance(u1, dim1_half, L)
        gn = rescaled_fluctuation(u1, dim1_half, L, n)
        assert math.isclose(gn.at(0.0), L ** (-2 * n * dim1_half.phi_dim) * g.at(0.0),
                            rel_tol=1e-13)
        assert gn.range == L ** (n + 1)

    def test_partial_sums_tail(self, u1, dim1_half):
        L, N = 2.0, 5
        C = unit_cutoff_covariance(u1, dim1_half)
        total = sum(rescaled_fluctuation(u1, dim1_half, L, n).at(0.0) for n in range(N + 1))
        tail = u1.at(0.0) * L ** (-dim1_half.beta * (N + 1)) / dim1_half.beta
        assert math.isclose(abs(total - C.at(0.0)), tail, rel_tol=1e-10)

    def test_negative_index_rejected(self, u1, dim1_half):
        with pytest.raises(ValueError):
            rescaled_fluctuation(u1, dim1_half, 2.0, -1)


class TestScalingDecomposition:
    @pytest.mark.parametrize("L", [2.0, math.e, 10.0])
    @pytest.mark.parametrize("phi", [0.5, 0.725])
    def test_residual_within_tolerance(self, mollifiers, L, phi):
        for d in (1, 2, 3):
            dim = FieldDimension(d, phi)
            C = unit_cutoff_covariance(mollifiers[d], dim)
            g = fluctuation_covariance(mollifiers[d], dim, L)
            assert verify_scaling_decomposition(C, g, L) <= 1e-10

    def test_zeroed_fluctuation_breaks_identity(self, u1, dim1_half):
        L = 2.0
        C = unit_cutoff_covariance(u1, dim1_half)
        g = fluctuation_covariance(u1, dim1_half, L)
        zero = CovarianceKernel(r=g.r, values=np.zeros_like(g.values), kind="fluctuation",
                                dim=g.dim, L=L, range=g.range, source_id=g.source_id)
        resid = verify_scaling_decomposition(C, zero, L)
        grid = np.unique(np.concatenate([C.r, zero.r]))
        expect = np.max(np.abs(C.at(grid) - L ** (-C.beta) * C.at(grid / L)))
        assert resid == pytest.approx(expect)
        assert resid > 1e3 * 1e-10 * u1.at(0.0)

    def test_residual_stays_at_quadrature_floor_under_refinement(self, dim1_half):
        # exact piecewise moments pin the residual at roundoff, so refining
        # the table must keep it below tolerance rather than merely shrink it
        for res in (1 / 128, 1 / 256):
            u = build_mollifier(bump_profile, res, d=1)
            C = unit_cutoff_covariance(u, dim1_half)
            g = fluctuation_covariance(u, dim1_half, 2.0)
            assert verify_scaling_decomposition(C, g, 2.0) <= 1e-12

    def test_metadata_mismatch_rejected(self, u1, u3, dim1_half, dim3_half):
        C1 = unit_cutoff_covariance(u1, dim1_half)
        g3 = fluctuation_covariance(u3, dim3_half, 2.0)
        with pytest.raises(ValueError):
            verify_scaling_decomposition(C1, g3, 2.0)

    def test_wrong_L_rejected(self, u1, dim1_half):
        C = unit_cutoff_covariance(u1, dim1_half)
        g = fluctuation_covariance(u1, dim1_half, 2.0)
        with pytest.raises(ValueError):
            verify_scaling_decomposition(C, g, 3.0)

    def test_different_mollifier_rejected(self, u1, dim1_half):
        other = build_mollifier(lambda r: bump_profile(r) * 2.0, RESOLUTION, d=1)
        C = unit_cutoff_covariance(u1, dim1_half)
        g = fluctuation_covariance(other, dim1_half, 2.0)
        with pytest.raises(ValueError, match="mollifier"):
            verify_scaling_decomposition(C, g, 2.0)


class TestPositiveDefiniteness:
    @pytest.mark.parametrize("phi", [0.5, 0.725])
    def test_kernels_positive_definite(self, mollifiers, phi):
        rng = np.random.default_rng(7)
        for d in (1, 2, 3):
            dim = FieldDimension(d, phi)
            C = unit_cutoff_covariance(mollifiers[d], dim)
            g = fluctuation_covariance(mollifiers[d], dim, 2.0)
            gn = rescaled_fluctuation(mollifiers[d], dim, 2.0, 2)
            for kernel in (C, g, gn):
                pts = rng.uniform(-2.0, 2.0, size=(40, d))
                rep = check_positive_definite(kernel, pts)
                assert rep.ok, f"min eig {rep.min_eigenvalue} below floor for d={d}"

    def test_probe_size_capped(self, u1, dim1_half):
        C = unit_cutoff_covariance(u1, dim1_half)
        with pytest.raises(ValueError):
            check_positive_definite(C, np.zeros((101, 1)))


class TestCSVRoundTrip:
    @pytest.mark.parametrize("kind", ["unit_cutoff", "fluctuation", "rescaled"])
    def test_lossless(self, tmp_path, u1, dim1_half, kind):
        if kind == "unit_cutoff":
            k = unit_cutoff_covariance(u1, dim1_half)
        elif kind == "fluctuation":
            k = fluctuation_covariance(u1, dim1_half, 2.0)
        else:
            k = rescaled_fluctuation(u1, dim1_half, 2.0, 2)
        path = tmp_path / "kernel.csv"
        kernel_to_csv(k, path)
        back = kernel_from_csv(path)
        assert np.array_equal(back.r, k.r)
        assert np.array_equal(back.values, k.values)
        assert back.kind == k.kind and back.L == k.L and back.n == k.n
        assert back.dim == k.dim
        # a second export reproduces the file byte for byte
        path2 = tmp_path / "kernel2.csv"
        kernel_to_csv(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_header_format(self, tmp_path, u1, dim1_half):
        k = fluctuation_covariance(u1, dim1_half, 2.0)
        path = tmp_path / "kernel.csv"
        kernel_to_csv(k, path)
        header = path.read_text().splitlines()[0]
        assert header.startswith("# kind=fluctuation L=2 n=None d=1 phi_dim=0.5")

    def test_imported_kernel_evaluates_consistently(self, tmp_path, u1, dim1_half):
        C = unit_cutoff_covariance(u1, dim1_half)
        path = tmp_path / "c.csv"
        kernel_to_csv(C, path)
        back = kernel_from_csv(path)
        r = np.linspace(0.0, 5.0, 333)
        assert np.allclose(back.at(r), C.at(r), rtol=1e-9, atol=1e-20)

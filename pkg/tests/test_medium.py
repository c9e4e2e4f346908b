"""Kernel, Green-function, and incident-field tests for the medium module."""

import numpy as np
import pytest

from smallbody.errors import InvariantViolation, SingularEvaluationError
from smallbody.medium import (
    BackgroundMedium,
    ComplexField,
    Grid,
    background_green,
    background_green_grad,
    free_kernel,
    free_kernel_grad_y,
    free_kernel_hess_xy,
    incident_field,
    lemma_bounds_check,
    trilinear_interpolate,
)

ORIGIN = np.zeros(3)


def make_medium(k=1.0, n=9, n0=1.0, lo=(0, 0, 0), hi=(1, 1, 1)):
    return BackgroundMedium(k, Grid(lo, hi, (n, n, n)), n0)


class TestFreeKernel:
    def test_static_unit_distance(self):
        val = free_kernel(ORIGIN, np.array([1.0, 0, 0]), 0.0)
        assert val == pytest.approx(1.0 / (4 * np.pi), rel=1e-14)

    def test_phase_pi(self):
        val = free_kernel(ORIGIN, np.array([np.pi, 0, 0]), 1.0)
        assert val == pytest.approx(-1.0 / (4 * np.pi ** 2), rel=1e-13)
        assert abs(val.imag) < 1e-16

    def test_coincident_points_raise(self):
        with pytest.raises(SingularEvaluationError):
            free_kernel(ORIGIN, ORIGIN, 1.0)

    def test_matrix_shape(self):
        x = np.random.default_rng(1).random((4, 3))
        y = np.random.default_rng(2).random((5, 3)) + 2.0
        assert free_kernel(x, y, 1.5).shape == (4, 5)


class TestKernelDerivatives:
    def test_static_gradient(self):
        y = np.array([0.0, 1.0, 0.0])
        grad = free_kernel_grad_y(ORIGIN, y, 0.0)
        expected = -(y - ORIGIN) / (4 * np.pi)
        np.testing.assert_allclose(grad, expected, rtol=1e-14)

    @pytest.mark.parametrize("k", [0.7, 2.3])
    def test_gradient_matches_finite_differences(self, k):
        rng = np.random.default_rng(3)
        x = rng.random(3)
        y = x + np.array([0.9, -0.4, 0.6])
        r = np.linalg.norm(x - y)
        h = 1e-5 * r
        grad = free_kernel_grad_y(x, y, k)
        for p in range(3):
            e = np.zeros(3)
            e[p] = h
            fd = (free_kernel(x, y + e, k) - free_kernel(x, y - e, k)) / (2 * h)
            assert abs(grad[p] - fd) <= 1e-6 * abs(grad[p])

    def test_hessian_matches_finite_differences(self):
        k = 1.1
        x = np.array([0.1, 0.2, -0.3])
        y = np.array([1.0, -0.5, 0.8])
        h = 1e-4
        hess = free_kernel_hess_xy(x, y, k)
        for q in range(3):
            for p in range(3):
                eq = np.zeros(3)
                eq[q] = h
                fd = (free_kernel_grad_y(x + eq, y, k)[p]
                      - free_kernel_grad_y(x - eq, y, k)[p]) / (2 * h)
                assert abs(hess[q, p] - fd) <= 2e-6 * max(abs(hess).max(), 1.0)

    def test_gradient_bound_sweep(self):
        # |grad_y g| stays below c * max(k/d, 1/d^2) across a d sweep
        k = 1.0
        rng = np.random.default_rng(7)
        consts = []
        for d in (0.5, 1.0, 2.0, 4.0):
            worst = 0.0
            for _ in range(200):
                x = rng.random(3)
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                y = x + direction * d * (1 + rng.random())
                gnorm = np.linalg.norm(free_kernel_grad_y(x, y, k))
                dist = np.linalg.norm(x - y)
                worst = max(worst, gnorm / max(k / dist, 1.0 / dist ** 2))
            consts.append(worst)
        assert max(consts) < 1.0  # actual constant is ~1/(2*pi)
        assert max(consts) / min(consts) < 3.0


class TestBackgroundGreen:
    def test_free_medium_reduces_to_g(self):
        med = make_medium()
        x = np.array([0.3, 0.4, 0.1])
        y = np.array([2.0, 1.0, -0.5])
        assert background_green(med, x, y) == pytest.approx(free_kernel(x, y, med.k), rel=1e-14)

    def test_reciprocity(self):
        med = make_medium(k=1.2, n=9, n0=1.3)
        rng = np.random.default_rng(11)
        for _ in range(4):
            x = rng.random(3) * 0.9 + 0.04
            y = rng.random(3) * 0.9 + 0.06
            gxy = background_green(med, x, y)
            gyx = background_green(med, y, x)
            assert abs(gxy - gyx) <= 1e-8 * max(abs(gxy), 1.0)

    def test_born_consistency_second_order(self):
        # G - (g - eps * int g g) = O(eps^2): halving eps shrinks the defect >= 3.5x
        k = 1.0
        x = np.array([-0.8, 0.5, 0.5])
        y = np.array([1.9, 0.55, 0.45])
        fine = Grid((0, 0, 0), (1, 1, 1), (17, 17, 17))
        zf = fine.nodes
        wf = fine.delta ** 3
        born_kernel = (free_kernel(x[None, :], zf, k)[0] * free_kernel(zf, y[None, :], k)[:, 0]).sum() * wf

        def defect(eps):
            med = make_medium(k=k, n=9, n0=1.0 - eps / k ** 2)
            g = free_kernel(x, y, k)
            return abs(background_green(med, x, y) - (g - eps * born_kernel))

        d1, d2 = defect(0.4), defect(0.2)
        assert d1 / d2 >= 3.5

    def test_radiation_decay(self):
        med = make_medium(k=1.0)
        y = np.array([0.1, 0.05, 0.08])
        for r in (50.0, 200.0):
            x = np.array([r, 0.0, 0.0])
            val = r * abs(background_green(med, x, y))
            assert abs(val - 1 / (4 * np.pi)) / (1 / (4 * np.pi)) <= 2.0 / (med.k * r)


class TestBackgroundGreenGrad:
    def test_static_free_gradient(self):
        med = make_medium(k=1e-9)  # k > 0 required; effectively static
        x = ORIGIN
        y = np.array([0.0, 0.0, 1.0])
        grad = background_green_grad(med, x, y)
        np.testing.assert_allclose(grad, -(y - x) / (4 * np.pi), atol=1e-9)

    def test_gradient_fd_oracle_with_potential(self):
        med = make_medium(k=1.1, n=7, n0=1.2)
        x = np.array([-0.5, 0.6, 0.4])
        y = np.array([1.7, 0.52, 0.41])
        grad = background_green_grad(med, x, y)
        h = 1e-5
        for p in range(3):
            e = np.zeros(3)
            e[p] = h
            fd = (background_green(med, x, y + e) - background_green(med, x, y - e)) / (2 * h)
            assert abs(grad[p] - fd) <= 1e-5 * np.linalg.norm(grad)


class TestIncidentField:
    def test_plane_wave_free_medium(self):
        med = make_medium()
        alpha = np.array([0.0, 0.0, 1.0])
        pts = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, np.pi / med.k]])
        fld = incident_field(med, alpha, pts)
        assert fld.values[0] == pytest.approx(1.0 + 0j, abs=1e-15)
        assert fld.values[1] == pytest.approx(-1.0 + 0j, abs=1e-12)

    def test_nonunit_alpha_rejected(self):
        med = make_medium()
        with pytest.raises(InvariantViolation):
            incident_field(med, np.array([0.0, 0.0, 2.0]), np.zeros((1, 3)))

    def test_absorptive_slab_attenuates(self):
        # wide flat absorptive box; compare against the 1-D slab transfer matrix
        k = 2.0
        sigma = 2.0
        lo, hi = (-2.0, -2.0, 0.0), (2.0, 2.0, 0.5)
        grid = Grid(lo, hi, (16, 16, 2))
        med = BackgroundMedium(k, grid, n0=1.0 + 1j * sigma / k ** 2)  # q0 = -i*sigma
        alpha = np.array([0.0, 0.0, 1.0])
        probe = np.array([[0.0, 0.0, 1.0]])
        u = incident_field(med, alpha, probe).values[0]
        assert abs(u) < 1.0

        # transfer-matrix transmission through the slab 0 <= z <= 0.5
        kp = np.sqrt(k ** 2 + 1j * sigma)
        z1 = 0.5
        m11 = np.cos(kp * z1) - 0j
        m12 = np.sin(kp * z1) / kp
        m21 = -kp * np.sin(kp * z1)
        m22 = np.cos(kp * z1) - 0j
        t_coeff = 2j * k * np.exp(-1j * k * z1) / (1j * k * (m11 + m22) + k ** 2 * m12 - m21)
        # finite transverse extent: agreement on the attenuation depth is loose
        assert abs(u) == pytest.approx(abs(t_coeff), rel=0.25)


class TestLemmaBounds:
    def test_ratio_bounded(self):
        med = make_medium(k=1.0)
        rep = lemma_bounds_check(med, a=1e-3, d=1e-1, sample_count=1000)
        assert rep.max_ratio_g <= 5.0
        assert rep.max_ratio_green <= 5.0

    def test_shrinking_a_keeps_ratio_stable(self):
        med = make_medium(k=1.0)
        diffs = []
        ratios = []
        for a in (4e-3, 2e-3, 1e-3, 5e-4):
            rep = lemma_bounds_check(med, a=a, d=0.2, sample_count=500, seed=5)
            diffs.append(rep.max_diff_g)
            ratios.append(rep.max_ratio_g)
        # differences vanish linearly with a while the normalized ratio is flat
        assert diffs[0] > diffs[1] > diffs[2] > diffs[3]
        slope = np.polyfit(np.log([4e-3, 2e-3, 1e-3, 5e-4]), np.log(ratios), 1)[0]
        assert abs(slope) <= 0.1

    def test_doubling_d_decreases_difference(self):
        med = make_medium(k=1.0)
        r1 = lemma_bounds_check(med, a=1e-3, d=0.1, sample_count=500, seed=9)
        r2 = lemma_bounds_check(med, a=1e-3, d=0.2, sample_count=500, seed=9)
        assert r2.max_diff_g < r1.max_diff_g

    def test_requires_separation(self):
        med = make_medium()
        with pytest.raises(InvariantViolation):
            lemma_bounds_check(med, a=0.05, d=0.1)


class TestMediumInvariants:
    def test_q0_n0_round_trip(self):
        med = make_medium(k=1.7, n=5, n0=1.25 + 0.3j)
        n0_back = 1.0 - med.q0 / med.k ** 2
        np.testing.assert_allclose(n0_back, med.n0, rtol=1e-15)

    def test_gain_medium_rejected(self):
        # Im n0 < 0 means Im q0 > 0: active medium, not allowed
        with pytest.raises(InvariantViolation):
            make_medium(n0=1.0 - 0.2j)

    def test_nonpositive_k_rejected(self):
        with pytest.raises(InvariantViolation):
            make_medium(k=0.0)

    def test_complex_field_validation(self):
        with pytest.raises(InvariantViolation):
            ComplexField(points=np.zeros((2, 3)), values=np.zeros(3),
                         incident_direction=np.array([0, 0, 1.0]))
        with pytest.raises(InvariantViolation):
            ComplexField(points=np.zeros((1, 3)), values=np.zeros(1),
                         incident_direction=np.array([0, 0, 0.5]))

    def test_nonuniform_spacing_rejected(self):
        with pytest.raises(ValueError):
            Grid((0, 0, 0), (1, 1, 2), (4, 4, 4))


class TestTrilinear:
    def test_reproduces_linear_field(self):
        grid = Grid((0, 0, 0), (1, 1, 1), (6, 6, 6))
        vals = grid.nodes @ np.array([1.0, -2.0, 0.5]) + 3.0
        pts = np.array([[0.31, 0.52, 0.44], [0.5, 0.5, 0.5], [0.12, 0.81, 0.66]])
        got = trilinear_interpolate(grid, vals, pts)
        np.testing.assert_allclose(got, pts @ np.array([1.0, -2.0, 0.5]) + 3.0, rtol=1e-12)

    def test_cell_lookup_outside_returns_default(self):
        grid = Grid((0, 0, 0), (1, 1, 1), (4, 4, 4))
        vals = np.ones(grid.size)
        out = grid.value_at_cells(vals, np.array([[2.0, 0.5, 0.5]]), outside=0.0)
        assert out[0] == 0.0


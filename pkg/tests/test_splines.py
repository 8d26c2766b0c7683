import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from clusterreg.splines import (
    check_phi,
    difference_penalty,
    eval_basis,
    identity_phi,
    make_knots,
    spline_eval,
    warp_eval,
)


def truncated_power_deriv(s, x, p, r):
    """r-th derivative in s of (s - x)_+^p."""
    if s <= x:
        return Fraction(0)
    return Fraction(math.factorial(p), math.factorial(p - r)) * (s - x) ** (p - r)


def divided_difference(ts, x, p):
    m = len(ts) - 1
    if ts[0] == ts[-1]:
        return truncated_power_deriv(ts[0], x, p, m) / math.factorial(m)
    return (divided_difference(ts[1:], x, p) - divided_difference(ts[:-1], x, p)) / (ts[-1] - ts[0])


def basis_by_divided_differences(full, degree, x):
    """B_j(x) = (t_{j+p+1} - t_j) [t_j..t_{j+p+1}] (. - x)_+^p in exact arithmetic."""
    full = [Fraction(v) for v in full]
    x = Fraction(x)
    nb = len(full) - degree - 1
    row = np.zeros(nb)
    for j in range(nb):
        ts = full[j:j + degree + 2]
        if ts[-1] == ts[0]:
            continue
        row[j] = float((ts[-1] - ts[0]) * divided_difference(ts, x, degree))
    return row


def random_knots(rng):
    degree = int(rng.integers(1, 5))
    lo = rng.uniform(-10, 0)
    hi = lo + rng.uniform(1, 20)
    n_int = int(rng.integers(0, 9))
    interior = np.sort(rng.uniform(lo, hi, n_int))
    if n_int > 2 and rng.random() < 0.3:
        interior[1] = interior[2]  # a double knot
    return make_knots((lo, hi), interior, degree)


class TestMakeKnots:
    def test_shape_study_knots(self):
        kv = make_knots((-6, 26), 31, span=(-5, 25))
        np.testing.assert_allclose(kv.interior, np.arange(-5, 26))
        assert kv.n_basis == 35
        assert np.all(kv.full[:4] == -6) and np.all(kv.full[-4:] == 26)

    def test_count_strictly_inside(self):
        kv = make_knots((0, 20), 3)
        np.testing.assert_allclose(kv.interior, [5, 10, 15])

    def test_no_interior_is_bernstein(self):
        kv = make_knots((0, 1), 0, degree=3)
        x = np.linspace(0, 1, 11)
        B = eval_basis(kv, x)
        binom = np.array([math.comb(3, j) for j in range(4)])
        expected = binom * x[:, None] ** np.arange(4) * (1 - x[:, None]) ** (3 - np.arange(4))
        np.testing.assert_allclose(B, expected, atol=1e-14)

    def test_growth_warp_knots(self):
        kv = make_knots((2, 18), [5.2, 8.2, 11.6, 14.8])
        assert kv.n_basis == 8
        np.testing.assert_array_equal(kv.full[4:8], [5.2, 8.2, 11.6, 14.8])

    @pytest.mark.parametrize("interior", [[3.0, 2.0], [0.0, 1.0], [1.0, 5.0]])
    def test_bad_positions(self, interior):
        with pytest.raises(ValueError):
            make_knots((0, 5), interior)

    def test_bad_domain(self):
        with pytest.raises(ValueError):
            make_knots((1, 1), 2)


class TestEvalBasis:
    def test_partition_of_unity_and_oracle(self):
        rng = np.random.default_rng(20240101)
        for _ in range(100):
            kv = random_knots(rng)
            x = rng.uniform(kv.lo, kv.hi, 15)
            B = eval_basis(kv, x)
            np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
            assert B.min() >= -1e-15 and B.max() <= 1 + 1e-12
            oracle = np.array([basis_by_divided_differences(kv.full, kv.degree, xi) for xi in x])
            np.testing.assert_allclose(B, oracle, atol=1e-10)

    def test_matches_scipy(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            kv = random_knots(rng)
            x = np.sort(rng.uniform(kv.lo, kv.hi, 30))
            ref = BSpline.design_matrix(x, kv.full, kv.degree).toarray()
            np.testing.assert_allclose(eval_basis(kv, x), ref, atol=1e-12)

    def test_endpoint_interpolation(self):
        kv = make_knots((0, 10), [2, 5, 7])
        B = eval_basis(kv, [0.0, 10.0])
        np.testing.assert_array_equal(B[0], np.eye(kv.n_basis)[0])
        np.testing.assert_array_equal(B[1], np.eye(kv.n_basis)[-1])

    def test_locality(self):
        kv = make_knots((0, 10), [1, 2, 4, 7, 8])
        x = np.linspace(0, 10, 57)
        B = eval_basis(kv, x)
        t = kv.full
        for p in range(kv.n_basis):
            outside = (x < t[p]) | (x > t[p + kv.degree + 1])
            assert np.all(B[outside, p] == 0)
        assert np.all((B != 0).sum(axis=1) <= kv.degree + 1)

    def test_out_of_domain(self):
        kv = make_knots((0, 1), 2)
        with pytest.raises(ValueError, match="outside"):
            eval_basis(kv, [1.5])
        B = eval_basis(kv, [1.5, -2], clamp=True)
        np.testing.assert_array_equal(B, eval_basis(kv, [1.0, 0.0]))

    def test_spline_eval_matches_basis_product(self):
        rng = np.random.default_rng(8)
        kv = make_knots((0, 20), 7)
        coef = rng.normal(size=kv.n_basis)
        x = rng.uniform(0, 20, 40)
        np.testing.assert_allclose(spline_eval(kv, coef, x), eval_basis(kv, x) @ coef, atol=1e-13)


class TestDifferencePenalty:
    def test_order2_dim3(self):
        S = difference_penalty(3, 2)
        th = np.array([0.3, -1.2, 2.5])
        xi = [th[0], th[1] - 2 * th[0], th[2] - 2 * th[1] + th[0]]
        assert th @ S @ th == pytest.approx(sum(v * v for v in xi), rel=1e-14)

    def test_order1_dim4(self):
        O = difference_penalty(4, 1)
        d = np.array([0.5, 0.1, -0.7, 0.2])
        brute = d[0] ** 2 + sum((d[q] - d[q - 1]) ** 2 for q in range(1, 4))
        assert d @ O @ d == pytest.approx(brute, rel=1e-14)

    @pytest.mark.parametrize("order", [1, 2])
    def test_quadratic_form_matches_increments(self, order):
        rng = np.random.default_rng(order)
        for dim in range(order + 1, 21):
            v = rng.normal(size=dim)
            padded = np.concatenate([np.zeros(order), v])
            incr = np.diff(padded, n=order)
            M = difference_penalty(dim, order)
            np.testing.assert_allclose(v @ M @ v, np.sum(incr ** 2), rtol=1e-12)

    @pytest.mark.parametrize("order", [1, 2])
    def test_positive_definite(self, order):
        for dim in range(order + 1, 51):
            M = difference_penalty(dim, order)
            np.testing.assert_array_equal(M, M.T)
            assert np.linalg.eigvalsh(M).min() > 0

    def test_small_dims_full_rank(self):
        np.testing.assert_array_equal(difference_penalty(1, 2), [[1.0]])
        np.testing.assert_array_equal(difference_penalty(2, 2), [[5.0, -2.0], [-2.0, 1.0]])
        with pytest.raises(ValueError):
            difference_penalty(0, 1)
        with pytest.raises(ValueError):
            difference_penalty(3, 3)


class TestWarps:
    def test_identity(self):
        for kv in [make_knots((0, 20), [5, 10, 15]), make_knots((2, 18), [5.2, 8.2, 11.6, 14.8]),
                   make_knots((0, 1), 0, degree=2)]:
            phi0 = identity_phi(kv)
            t = np.linspace(kv.lo, kv.hi, 101)
            np.testing.assert_allclose(warp_eval(kv, phi0, t), t, atol=1e-10)
            assert np.all(np.diff(phi0) > 0)

    def test_identity_equally_spaced(self):
        kv = make_knots((0, 12), 5, degree=1)
        np.testing.assert_allclose(identity_phi(kv), np.linspace(0, 12, 7))
        # cubic: linear in the middle where knot averages are evenly spaced
        phi0 = identity_phi(make_knots((0, 20), 9))
        np.testing.assert_allclose(np.diff(phi0[3:-3]), 2.0)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1))
    def test_monotone_for_ordered_phi(self, seed):
        rng = np.random.default_rng(seed)
        kv = make_knots((0, 20), [5, 10, 15])
        phi = np.sort(rng.uniform(-3, 23, kv.n_basis))
        t = np.linspace(0, 20, 2001)
        w = warp_eval(kv, phi, t, bounds=(-3, 23))
        assert np.all(np.diff(w) > 0)
        assert w.min() >= -3 and w.max() <= 23

    def test_upper_bound_reached(self):
        kv = make_knots((0, 20), [10])
        phi = np.array([0.0, 4.0, 10.0, 16.0, 25.0])
        w = warp_eval(kv, phi, [20.0], bounds=(-5, 25))
        assert w[0] <= 25.0

    def test_errors(self):
        kv = make_knots((0, 20), [10])
        with pytest.raises(ValueError, match="increasing"):
            warp_eval(kv, [0, 5, 4, 15, 20], [1.0])
        with pytest.raises(ValueError, match="lie in"):
            warp_eval(kv, [-1, 5, 10, 15, 20], [1.0], bounds=(0, 20))
        check_phi([0, 1, 2])

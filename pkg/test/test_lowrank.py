# SPDX-License-Identifier: LGPL-3.0-or-later

import unittest
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from tezo.common import (
    PerturbationMethod,
    CountOverflowError,
    ShapeMismatchError,
)
from tezo.lowrank import (
    CostModel,
    FactorSet,
    LayerShape,
    apply_rank_sum,
    count_elements,
    expand_separable,
    init_factors,
    materialize_perturbation,
    perturb_in_place,
)
from tezo.rng import make_generator


class FactorTest(unittest.TestCase):
    def test_layer_shape(self):
        LayerShape(4, 3, 3)
        for m, n, r in ((0, 3, 1), (4, 3, 0), (4, 3, 4)):
            with self.assertRaises(ValueError):
                LayerShape(m, n, r)

    def test_init_factors_replay(self):
        shape = LayerShape(7, 5, 3)
        a = init_factors(shape, 99, "W")
        b = init_factors(shape, 99, "W")
        assert_array_equal(a.u, b.u)
        assert_array_equal(a.v, b.v)
        self.assertEqual(a.shape, (7, 5))
        self.assertEqual(a.r, 3)
        self.assertEqual(a.seed, 99)
        c = init_factors(shape, 100, "W")
        self.assertFalse(np.array_equal(a.u, c.u))

    def test_full_rank(self):
        fs = init_factors(LayerShape(6, 6, 6), 1)
        self.assertEqual(fs.r, 6)

    def test_read_only(self):
        fs = init_factors(LayerShape(3, 3, 2), 1)
        with self.assertRaises(ValueError):
            fs.u[0, 0] = 1.0

    def test_factor_variance(self):
        fs = init_factors(LayerShape(10000, 10, 2), 8)
        for s in range(2):
            self.assertTrue(0.94 <= fs.u[:, s].var() <= 1.06)

    def test_mismatched_factors(self):
        with self.assertRaises(ShapeMismatchError):
            FactorSet(u=np.ones((3, 2)), v=np.ones((4, 3)))


class MaterializeTest(unittest.TestCase):
    def test_rank_one(self):
        fs = FactorSet(u=np.array([[1.0], [2.0]]), v=np.array([[3.0]]))
        Z = materialize_perturbation(fs, np.array([1.0]))
        assert_array_equal(Z, np.array([[3.0], [6.0]]))

    def test_zero_tau(self):
        fs = init_factors(LayerShape(4, 5, 3), 3)
        assert_array_equal(materialize_perturbation(fs, np.zeros(3)), np.zeros((4, 5)))

    def test_against_loop(self):
        fs = init_factors(LayerShape(5, 4, 3), 12)
        tau = make_generator(1).standard_normal(3)
        expected = np.zeros((5, 4))
        for i in range(5):
            for j in range(4):
                for s in range(3):
                    expected[i, j] += tau[s] * fs.u[i, s] * fs.v[j, s]
        assert_allclose(materialize_perturbation(fs, tau), expected, rtol=1e-12, atol=1e-12)

    def test_linear(self):
        fs = init_factors(LayerShape(6, 6, 2), 4)
        rng = make_generator(2)
        t1, t2 = rng.standard_normal(2), rng.standard_normal(2)
        assert_allclose(
            materialize_perturbation(fs, 2.0 * t1 - t2),
            2.0 * materialize_perturbation(fs, t1) - materialize_perturbation(fs, t2),
            atol=1e-12,
        )

    def test_tau_length(self):
        fs = init_factors(LayerShape(4, 4, 2), 4)
        with self.assertRaises(ShapeMismatchError):
            materialize_perturbation(fs, np.ones(3))

    def test_expand_separable(self):
        fs = init_factors(LayerShape(5, 3, 2), 6)
        coeffs = np.array([0.5, 2.0])
        expected = sum(
            coeffs[s] * np.outer(fs.u[:, s] ** 2, fs.v[:, s] ** 2) for s in range(2)
        )
        assert_allclose(expand_separable(fs, coeffs), expected, rtol=1e-12)


class PerturbTest(unittest.TestCase):
    def test_round_trip(self):
        rng = make_generator(2025)
        for trial in range(20):
            m, n = (int(x) for x in rng.integers(1, 65, size=2))
            r = int(rng.integers(1, min(m, n, 8) + 1))
            rho = (1e-3, 1e-2)[trial % 2]
            fs = init_factors(LayerShape(m, n, r), trial)
            W0 = rng.standard_normal((m, n))
            W = W0.copy()
            seed = 1000 + trial
            perturb_in_place(W, fs, rho, seed)
            perturb_in_place(W, fs, -2.0 * rho, seed)
            perturb_in_place(W, fs, rho, seed)
            assert_allclose(W, W0, rtol=1e-10, atol=1e-14)

    def test_matches_materialize(self):
        fs = init_factors(LayerShape(300, 20, 4), 5)
        W0 = make_generator(3).standard_normal((300, 20))
        W = W0.copy()
        tau = perturb_in_place(W, fs, 0.01, 77)
        assert_allclose(W - W0 - 0.01 * materialize_perturbation(fs, tau), 0.0, atol=1e-12)

    def test_zero_scale(self):
        fs = init_factors(LayerShape(8, 8, 2), 5)
        W0 = make_generator(3).standard_normal((8, 8))
        W = W0.copy()
        tau = perturb_in_place(W, fs, 0.0, 77)
        assert_array_equal(W, W0)
        self.assertEqual(tau.shape, (2,))

    def test_shape_mismatch(self):
        fs = init_factors(LayerShape(8, 8, 2), 5)
        with self.assertRaises(ShapeMismatchError):
            perturb_in_place(np.zeros((8, 7)), fs, 1.0, 0)
        with self.assertRaises(ShapeMismatchError):
            apply_rank_sum(np.zeros((7, 8)), fs.u, fs.v, np.ones(2), 1.0)


class CountTest(unittest.TestCase):
    def count(self, method, m, n, r, T):
        return count_elements(CostModel(method, m, n, r, T))

    def test_examples(self):
        self.assertEqual(self.count(PerturbationMethod.mezo, 1024, 1024, 1, 1000), 1048576000)
        self.assertEqual(self.count(PerturbationMethod.tezo, 1024, 1024, 8, 1000), 24384)
        self.assertEqual(self.count(PerturbationMethod.lozo, 1024, 1024, 8, 1000), 16384000)
        self.assertEqual(self.count(PerturbationMethod.subzo, 1024, 1024, 8, 1000), 16448000)

    def test_closed_forms(self):
        rng = make_generator(17)
        for _ in range(100):
            m, n, T = (int(x) for x in rng.integers(1, 5000, size=3))
            r = int(rng.integers(1, 65))
            self.assertEqual(self.count(PerturbationMethod.mezo, m, n, r, T), m * n * T)
            self.assertEqual(self.count(PerturbationMethod.subzo, m, n, r, T), (m + n + r) * r * T)
            self.assertEqual(self.count(PerturbationMethod.lozo, m, n, r, T), (m + n) * r * T)
            self.assertEqual(self.count(PerturbationMethod.tezo, m, n, r, T), (m + n + T) * r)

    def test_ordering(self):
        rng = make_generator(18)
        for _ in range(100):
            m, n = (int(x) for x in rng.integers(64, 2048, size=2))
            r = int(rng.integers(1, 17))
            T = int(rng.integers(64, 10000))
            counts = [
                self.count(method, m, n, r, T)
                for method in (
                    PerturbationMethod.tezo,
                    PerturbationMethod.lozo,
                    PerturbationMethod.subzo,
                    PerturbationMethod.mezo,
                )
            ]
            self.assertEqual(counts, sorted(counts))
            self.assertEqual(len(set(counts)), 4)

    def test_overflow(self):
        with self.assertRaises(CountOverflowError):
            self.count(PerturbationMethod.mezo, 2 ** 31, 2 ** 31, 1, 2 ** 10)

    def test_non_positive(self):
        with self.assertRaises(ValueError):
            self.count(PerturbationMethod.tezo, 4, 4, 0, 10)
        with self.assertRaises(ValueError):
            self.count(PerturbationMethod.tezo, 4, 4, 1, 0)

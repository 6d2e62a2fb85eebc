# SPDX-License-Identifier: LGPL-3.0-or-later

import unittest
import numpy as np
from numpy.testing import assert_allclose
from tezo.common import RankCriterion, ConfigError
from tezo.params import ModelParams, Parameter
from tezo.rank_select import (
    RankPolicy,
    matrix_rank,
    model_blocks,
    rank_table,
    select_ranks,
    singular_values,
)
from tezo.rng import make_generator


def with_spectrum(sigma, m, n, seed):
    rng = make_generator(seed)
    U, _ = np.linalg.qr(rng.standard_normal((m, len(sigma))))
    V, _ = np.linalg.qr(rng.standard_normal((n, len(sigma))))
    return (U * np.asarray(sigma)) @ V.T


def diag_rank(k, size=8):
    d = np.zeros(size)
    d[:k] = 1.0
    return np.diag(d)


class SingularValueTest(unittest.TestCase):
    def test_diagonal(self):
        assert_allclose(singular_values(np.diag([3.0, 2.0, 1.0]), 3), [3.0, 2.0, 1.0], rtol=1e-12)
        assert_allclose(singular_values(np.diag([1.0, 3.0, 2.0]), 2), [3.0, 2.0], rtol=1e-12)

    def test_rank_one(self):
        rng = make_generator(1)
        a, b = rng.standard_normal(12), rng.standard_normal(7)
        sigma = singular_values(np.outer(a, b), 7)
        self.assertAlmostEqual(sigma[0], np.linalg.norm(a) * np.linalg.norm(b), delta=1e-12 * sigma[0])
        self.assertLessEqual(sigma[1], 1e-8 * sigma[0])

    def test_random(self):
        W = make_generator(2).standard_normal((64, 48))
        expected = np.sqrt(np.linalg.eigvalsh(W.T @ W))[::-1]
        assert_allclose(singular_values(W, 48, "jacobi"), expected, rtol=1e-8)
        assert_allclose(singular_values(W.T, 48, "jacobi"), expected, rtol=1e-8)

    def test_methods_agree(self):
        W = make_generator(3).standard_normal((33, 17))
        assert_allclose(
            singular_values(W, 17, "jacobi"), singular_values(W, 17, "lapack"), rtol=1e-10
        )

    def test_bounds(self):
        W = np.ones((3, 4))
        self.assertEqual(singular_values(W, 0).shape, (0,))
        with self.assertRaises(ValueError):
            singular_values(W, 4)
        with self.assertRaises(ValueError):
            singular_values(W, -1)
        with self.assertRaises(ValueError):
            singular_values(np.ones(3), 1)


class MatrixRankTest(unittest.TestCase):
    def test_threshold(self):
        self.assertEqual(matrix_rank(np.diag([1.0, 0.5, 0.01]), RankPolicy(threshold_frac=0.25)), 2)

    def test_identity(self):
        for frac in (0.1, 0.5, 0.99):
            self.assertEqual(matrix_rank(np.eye(8), RankPolicy(threshold_frac=frac)), 8)

    def test_constructed_spectrum(self):
        W = with_spectrum([1.0, 0.31, 0.29, 0.1], 10, 9, 4)
        self.assertEqual(matrix_rank(W, RankPolicy(threshold_frac=0.30)), 2)

    def test_zero_matrix(self):
        self.assertEqual(matrix_rank(np.zeros((5, 4)), RankPolicy()), 1)

    def test_energy(self):
        W = np.diag([3.0, 2.0, 1.0])
        energy = RankCriterion.energy
        self.assertEqual(matrix_rank(W, RankPolicy(threshold_frac=0.5, criterion=energy)), 1)
        self.assertEqual(matrix_rank(W, RankPolicy(threshold_frac=0.9, criterion=energy)), 2)

    def test_monotone(self):
        rng = make_generator(5)
        for seed in range(10):
            W = with_spectrum(np.sort(rng.uniform(0.01, 1.0, 6))[::-1], 12, 8, seed)
            high = matrix_rank(W, RankPolicy(threshold_frac=0.5))
            low = matrix_rank(W, RankPolicy(threshold_frac=0.2))
            self.assertGreaterEqual(low, high)

    def test_policy_validation(self):
        for frac in (0.0, 1.0, -0.5):
            with self.assertRaises(ConfigError):
                RankPolicy(threshold_frac=frac)
        with self.assertRaises(ConfigError):
            RankPolicy(r_max=0)
        with self.assertRaises(ConfigError):
            RankPolicy(method="qr")


class SelectRanksTest(unittest.TestCase):
    def test_block_minimum(self):
        model = ModelParams([
            Parameter("W1", diag_rank(5)),
            Parameter("W2", diag_rank(3)),
            Parameter("W3", diag_rank(7)),
        ])
        self.assertEqual(select_ranks(model, RankPolicy()), {"W1": 3, "W2": 3, "W3": 3})

    def test_cap(self):
        model = ModelParams.single(np.eye(128))
        self.assertEqual(select_ranks(model, RankPolicy(r_max=64)), {"W": 64})

    def test_independent_blocks(self):
        model = ModelParams([
            Parameter("W1", diag_rank(5), block=0),
            Parameter("b1", np.ones(8), block=0),
            Parameter("W2", diag_rank(3), block=0),
            Parameter("W3", diag_rank(7), block=1),
        ])
        self.assertEqual(model_blocks(model), {0: ("W1", "W2"), 1: ("W3",)})
        self.assertEqual(select_ranks(model, RankPolicy()), {"W1": 3, "W2": 3, "W3": 7})
        table = rank_table(model, RankPolicy())
        self.assertEqual([row[0] for row in table], ["W1", "W2", "W3"])
        self.assertEqual([row[2] for row in table], [5, 3, 7])
        self.assertEqual(table[0][1], 1.0)

    def test_explicit_blocks(self):
        model = ModelParams([
            Parameter("W1", diag_rank(5)),
            Parameter("W2", diag_rank(3)),
            Parameter("W3", diag_rank(7)),
        ])
        policy = RankPolicy(blocks={0: ("W1", "W3"), 1: ("W2",)})
        self.assertEqual(select_ranks(model, policy), {"W1": 5, "W2": 3, "W3": 5})

    def test_randomized_layouts(self):
        rng = make_generator(6)
        for _ in range(20):
            count = int(rng.integers(1, 6))
            raw = [int(k) for k in rng.integers(1, 9, size=count)]
            labels = [int(b) for b in rng.integers(0, 3, size=count)]
            r_max = int(rng.integers(1, 9))
            model = ModelParams([
                Parameter(f"W{i}", diag_rank(k), block=b)
                for i, (k, b) in enumerate(zip(raw, labels))
            ])
            ranks = select_ranks(model, RankPolicy(r_max=r_max))
            for i, b in enumerate(labels):
                bound = min(k for k, lb in zip(raw, labels) if lb == b)
                self.assertEqual(ranks[f"W{i}"], min(bound, r_max))

    def test_bad_blocks(self):
        model = ModelParams([
            Parameter("W1", diag_rank(5)),
            Parameter("b1", np.ones(8)),
            Parameter("W2", diag_rank(3)),
        ])
        for blocks in (
            {0: ("W1", "W2"), 1: ()},
            {0: ("W1",)},
            {0: ("W1", "W2", "W9")},
            {0: ("W1", "W2", "b1")},
            {0: ("W1", "W2"), 1: ("W2",)},
            {0: ("W1", "W1", "W2")},
        ):
            with self.assertRaises(ConfigError):
                select_ranks(model, RankPolicy(blocks=blocks))

    def test_overlapping_blocks(self):
        model = ModelParams([
            Parameter("W1", diag_rank(4)),
            Parameter("W2", diag_rank(2)),
            Parameter("W3", diag_rank(6)),
        ])
        policy = RankPolicy(blocks={0: ("W1", "W2"), 1: ("W2", "W3"), 2: ("W1",)})
        with self.assertRaises(ConfigError) as cm:
            select_ranks(model, policy)
        self.assertEqual(cm.exception.key, "blocks")
        self.assertIn("W2", str(cm.exception))

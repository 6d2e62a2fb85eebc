# SPDX-License-Identifier: LGPL-3.0-or-later

import math
import unittest
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from tezo.estimators import delta_coefficient
from tezo.lowrank import LayerShape, init_factors
from tezo.objectives import CubicObjective
from tezo.params import ModelParams
from tezo.report import RunConfig
from tezo.rng import GaussianStream, SeedSchedule, make_generator
from tezo.verify import (
    MC_STREAM,
    accumulated_moment_error,
    convergence_race,
    cross_term,
    cross_term_stats,
    one_step_error,
    separable_term,
    theorem1_check,
    two_point_stats,
)


class EstimatorStatsTest(unittest.TestCase):
    def test_unbiased_and_variance(self):
        report = theorem1_check(4, 4, 2, 1000000, seed=1)
        self.assertLessEqual(report.max_z, 4.0)
        self.assertTrue(0.9 <= report.ratio <= 1.1, report.ratio)
        self.assertEqual(report.delta, 62.0)

    def test_larger_layer(self):
        report = theorem1_check(8, 8, 4, 1000000, seed=8)
        self.assertLessEqual(report.max_z, 4.0)
        self.assertTrue(0.9 <= report.ratio <= 1.1, report.ratio)
        self.assertEqual(report.delta, delta_coefficient(8, 8, 4))

    def test_scalar_case(self):
        report = theorem1_check(1, 1, 1, 1000000, seed=2)
        self.assertEqual(report.delta, 26.0)
        self.assertLess(abs(report.ratio - 1.0), max(0.1, 4.0 * report.ratio_se))
        self.assertLessEqual(report.max_z, 4.0)

    def test_zero_gradient(self):
        report = theorem1_check(4, 4, 2, 10000, seed=3, grad=np.zeros((4, 4)))
        assert_array_equal(report.mean, np.zeros((4, 4)))
        self.assertEqual(report.emp_var, 0.0)
        self.assertTrue(math.isnan(report.ratio))

    def test_two_point_quadratic(self):
        report = theorem1_check(3, 5, 2, 100000, seed=4, rho=1e-4)
        self.assertLessEqual(report.max_z, 4.0)

    def test_reproducible(self):
        a = theorem1_check(3, 3, 2, 5000, seed=5)
        b = theorem1_check(3, 3, 2, 5000, seed=5)
        assert_array_equal(a.mean, b.mean)
        self.assertEqual(a.emp_var, b.emp_var)
        self.assertEqual(len(a.rows()), 9)

    def test_bias_decay(self):
        obj = CubicObjective(A=np.eye(16), b=np.zeros(16), c=1.0)
        errors = []
        for rho in (1e-2, 1e-3):
            model = ModelParams.single(np.zeros((4, 4)))
            report = two_point_stats(obj, model, 2, rho, 2000, seed=6)
            assert_array_equal(report.grad, np.zeros((4, 4)))
            errors.append(float(np.linalg.norm(report.bias)))
        self.assertGreater(errors[0], errors[1])
        self.assertGreater(errors[0], 10.0 * errors[1])


class CrossTermTest(unittest.TestCase):
    def test_identity(self):
        fs = init_factors(LayerShape(7, 6, 4), 1)
        rng = make_generator(2)
        for _ in range(5):
            tau = rng.standard_normal(4)
            Z = (fs.u * tau) @ fs.v.T
            assert_allclose(separable_term(fs, tau) + cross_term(fs, tau), Z * Z, atol=1e-10)

    def test_rank_one(self):
        report = cross_term_stats(8, 8, 1, 1000, seed=1)
        assert_array_equal(report.mean, np.zeros((8, 8)))
        self.assertEqual(report.max_z, 0.0)

    def test_zero_mean(self):
        report = cross_term_stats(16, 16, 4, 100000, seed=2)
        self.assertLessEqual(report.max_z, 4.0)
        self.assertEqual(len(report.rows()), 256)


class MomentErrorTest(unittest.TestCase):
    def test_no_memory(self):
        m, n, r, T, seed = 6, 5, 3, 7, 11
        (trace,) = accumulated_moment_error([(m, n)], r, T, 0.0, [seed])
        fs = init_factors(LayerShape(m, n, r), seed)
        tau = GaussianStream(SeedSchedule(seed).substream(MC_STREAM).derive(T - 1)).sample(r)
        assert_allclose(trace.last_error, cross_term(fs, tau) / (m * n), atol=1e-10)
        self.assertEqual(trace.norms[0], 0.0)

    def test_identity_residual(self):
        (trace,) = accumulated_moment_error([(8, 8)], 3, 100, 0.99, [1], check_identity=True)
        self.assertLessEqual(trace.identity_residual, 1e-10)
        self.assertEqual(trace.norms.shape, (101,))

    def test_size_trend(self):
        traces = accumulated_moment_error([(32, 32), (128, 128)], 8, 1000, 0.99, range(5))
        small = np.mean([t.terminal for t in traces if t.m == 32])
        large = np.mean([t.terminal for t in traces if t.m == 128])
        self.assertLess(large, small)

    def test_one_step(self):
        small, large = one_step_error([(32, 32), (128, 128)], 8, 200, seed=1)
        self.assertLess(large.abs_error, small.abs_error)
        self.assertTrue(0.0 < small.rel_error < 1.0)


class ConvergenceRaceTest(unittest.TestCase):
    def test_race_with_factor_refresh(self):
        base = RunConfig(
            optimizer="tezo", objective="quad16", steps=50000, rank=4,
            factor_refresh=1, log_every=10,
        )
        results = convergence_race(
            base, {"tezo": 2.5e-4, "mezo": 1e-3}, seeds=[0, 1, 2], target_ratio=1e-3
        )
        self.assertEqual(len(results), 6)
        for res in results:
            self.assertEqual(res.status, "converged", res)
            self.assertIsNotNone(res.steps_to_target)
            self.assertLessEqual(res.final_ratio, 1e-3)
            expected = 1 if res.optimizer == "tezo" else None
            self.assertEqual(res.factor_refresh, expected)

    def test_fixed_factors_stall(self):
        base = RunConfig(
            optimizer="tezo", objective="quad16", steps=2000, rank=4, log_every=100,
        )
        (res,) = convergence_race(base, {"tezo": 2.5e-4}, seeds=[0], target_ratio=1e-3)
        self.assertEqual(res.status, "completed")
        self.assertIsNone(res.steps_to_target)
        self.assertIsNone(res.factor_refresh)
        self.assertGreater(res.final_ratio, 1e-3)
        self.assertLess(res.final_ratio, 1.0)

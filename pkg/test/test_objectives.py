# SPDX-License-Identifier: LGPL-3.0-or-later

import math
import unittest
import numpy as np
from numpy.testing import assert_allclose, assert_array_equal
from tezo.common import (
    Activation,
    ShapeMismatchError,
    UnexpectedTypeError,
)
from tezo.objectives import (
    Batch,
    CascadeMLP,
    CubicObjective,
    MLPObjective,
    QuadraticObjective,
    build_objective,
    cluster_data,
    cosine_matrix,
    finite_difference_grad,
    gradient_lipschitz,
    gradient_spectrum,
    objective_shapes,
    quad_eval,
    spd_matrix,
)
from tezo.params import ModelParams
from tezo.rank_select import singular_values
from tezo.rng import make_generator


class QuadraticTest(unittest.TestCase):
    def test_unit(self):
        W = np.array([[1.0, 0.0]])
        self.assertEqual(quad_eval(W, np.eye(2), np.zeros(2)), 0.5)
        obj = QuadraticObjective(A=np.eye(2), b=np.zeros(2))
        assert_array_equal(obj.exact_grad(ModelParams.single(W))["W"], W)

    def test_minimizer(self):
        A = spd_matrix(16, 1)
        b = make_generator(2).standard_normal(16)
        obj = QuadraticObjective(A=A, b=b)
        model = ModelParams.single(obj.minimizer().reshape(4, 4))
        assert_allclose(obj.exact_grad(model)["W"], 0.0, atol=1e-10)

    def test_spd(self):
        A = spd_matrix(9, 3, low=1.0, high=2.0)
        assert_allclose(A, A.T)
        assert_allclose(np.linalg.eigvalsh(A), np.linspace(1.0, 2.0, 9), atol=1e-10)

    def test_finite_difference(self):
        obj = QuadraticObjective(A=spd_matrix(16, 4), b=make_generator(5).standard_normal(16))
        model = ModelParams.single(make_generator(6).standard_normal((4, 4)))
        fd = finite_difference_grad(obj, model)
        assert_allclose(fd["W"], obj.exact_grad(model)["W"], rtol=1e-6, atol=1e-6)

    def test_cubic(self):
        obj = CubicObjective(A=spd_matrix(9, 4), b=np.zeros(9), c=2.0)
        model = ModelParams.single(make_generator(6).standard_normal((3, 3)))
        fd = finite_difference_grad(obj, model)
        assert_allclose(fd["W"], obj.exact_grad(model)["W"], rtol=1e-6, atol=1e-6)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeMismatchError):
            quad_eval(np.zeros((2, 2)), np.eye(3), np.zeros(4))
        with self.assertRaises(ShapeMismatchError):
            quad_eval(np.zeros((2, 2)), np.eye(4), np.zeros(3))

    def test_lipschitz(self):
        obj = QuadraticObjective(A=spd_matrix(16, 4), b=np.zeros(16))
        model = ModelParams.single(np.zeros((4, 4)))
        L = gradient_lipschitz(obj, model, pairs=16)
        self.assertTrue(1.0 - 1e-9 <= L <= 2.0 + 1e-9)
        assert_array_equal(model["W"].value, np.zeros((4, 4)))


class MLPTest(unittest.TestCase):
    def setUp(self):
        self.net = CascadeMLP(sizes=(8, 8, 2))
        self.data = cluster_data(64, 8, 2, 2, seed=3, noise=0.1)

    def test_zero_weights(self):
        model = self.net.zero_params()
        batch = Batch(x=self.data.x[:, :4], y=np.array([0, 1, 0, 1]))
        obj = MLPObjective(net=self.net, data=self.data)
        self.assertAlmostEqual(obj.eval(model, batch), math.log(2.0), places=12)

    def test_gradient(self):
        obj = MLPObjective(net=self.net, data=self.data)
        batch = Batch(x=self.data.x[:, :16], y=self.data.y[:16])
        for seed in range(10):
            model = self.net.init_params(seed)
            for p in model:
                p.value += 0.1 * make_generator(100 + seed).standard_normal(p.value.shape)
            exact = obj.exact_grad(model, batch)
            fd = finite_difference_grad(obj, model, batch)
            for name in model.names:
                err = np.linalg.norm(exact[name] - fd[name])
                self.assertLessEqual(err, 1e-5 * np.linalg.norm(exact[name]) + 1e-9, name)

    def test_single_sample_rank(self):
        obj = MLPObjective(net=CascadeMLP(sizes=(8, 6, 5, 3)), data=cluster_data(8, 8, 3, 4, 1))
        model = obj.net.init_params(2)
        batch = Batch(x=obj.data.x[:, :1], y=obj.data.y[:1])
        grads = obj.exact_grad(model, batch)
        for name in ("W1", "W2", "W3"):
            sigma = singular_values(grads[name], 2, "lapack")
            self.assertLessEqual(sigma[1], 1e-8 * sigma[0], name)

    def test_intrinsic_rank(self):
        data = cluster_data(128, 8, 2, 2, seed=4)
        obj = MLPObjective(net=self.net, data=data)
        model = self.net.init_params(5)
        g = obj.exact_grad(model)["W1"]
        sigma = singular_values(g, 3, "lapack")
        self.assertLessEqual(sigma[2], 1e-8 * sigma[0])

    def test_sample_batch(self):
        obj = MLPObjective(net=self.net, data=self.data, batch_size=8)
        a, b = obj.sample_batch(7), obj.sample_batch(7)
        assert_array_equal(a.x, b.x)
        self.assertEqual(a.size, 8)
        self.assertIs(MLPObjective(self.net, self.data, batch_size=0).sample_batch(7), self.data)

    def test_balanced_labels(self):
        data = cluster_data(30, 5, 3, 2, seed=1)
        self.assertEqual(np.bincount(data.y).tolist(), [10, 10, 10])
        with self.assertRaises(ValueError):
            cluster_data(30, 5, 3, 6, seed=1)

    def test_non_finite(self):
        net = CascadeMLP(sizes=(4, 4, 2), activation=Activation.identity)
        model = net.init_params(0, scale=1e300)
        data = cluster_data(8, 4, 2, 2, seed=1)
        with np.errstate(over="ignore", invalid="ignore"):
            self.assertTrue(math.isnan(MLPObjective(net, data).eval(model)))

    def test_blocks(self):
        model = CascadeMLP(sizes=(4, 4, 4, 4, 2), block_size=2).init_params(0)
        self.assertEqual(model.names, ["W1", "b1", "W2", "b2", "W3", "b3", "W4", "b4"])
        self.assertEqual([model[f"W{i}"].block for i in range(1, 5)], [0, 0, 1, 1])
        self.assertEqual(model["W2"].value.shape, (4, 4))
        self.assertEqual(model["W4"].value.shape, (2, 4))


class RegistryTest(unittest.TestCase):
    def test_quad(self):
        obj, model = build_objective("quad16", 0)
        self.assertEqual(model["W"].value.shape, (16, 16))
        self.assertEqual(obj.A.shape, (256, 256))
        obj2, model2 = build_objective("quad16", 0)
        assert_array_equal(model["W"].value, model2["W"].value)
        obj, model = build_objective("cubic4", 0)
        self.assertIsInstance(obj, CubicObjective)

    def test_mlp(self):
        obj, model = build_objective("mlp:8-16-2:relu", 1)
        self.assertEqual(len(model), 4)
        self.assertFalse(obj.smooth)
        self.assertTrue(build_objective("mlp:8-16-2", 1)[0].smooth)
        self.assertEqual(
            objective_shapes("mlp:8-16-2"), [(16, 8), (16,), (2, 16), (2,)]
        )

    def test_unknown(self):
        for spec in ("lasso4", "mlp:8", "quad"):
            with self.assertRaises(UnexpectedTypeError):
                build_objective(spec, 0)


class SpectrumTest(unittest.TestCase):
    def test_cosine(self):
        g = make_generator(0).standard_normal(20)
        assert_allclose(cosine_matrix(np.tile(g[:, None], (1, 4))), np.ones((4, 4)), atol=1e-12)
        grads = np.stack([g, np.zeros(20), -g], axis=1)
        cos = cosine_matrix(grads)
        self.assertTrue(np.all(np.isnan(cos[1])))
        self.assertAlmostEqual(cos[0, 2], -1.0, places=12)

    def test_spectrum(self):
        obj, model = build_objective("mlp:8-8-2", 0)
        report = gradient_spectrum(obj, model, steps=5, k=3, seed=1)
        self.assertEqual(report.spectra["W1"].shape, (5, 3))
        self.assertEqual(report.spectra["W2"].shape, (5, 3))
        self.assertEqual(report.spectra["W2"][0, 2], 0.0)
        self.assertEqual(report.cosine["W1"].shape, (5, 5))
        assert_allclose(np.diag(report.cosine["W1"]), 1.0)
        self.assertTrue(1 <= report.weight_rank["W1"] <= 8)
        self.assertTrue(1 <= report.grad_rank["W2"] <= 2)
        self.assertTrue(np.isfinite(report.mean_off_diagonal("W1")))
        with self.assertRaises(ValueError):
            gradient_spectrum(obj, model, steps=0, k=3)

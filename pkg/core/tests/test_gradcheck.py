import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from core.services import gradcheck
from core.services import tensor as T


class GradCheckTests(SimpleTestCase):
    def test_relative_error(self):
        self.assertEqual(gradcheck.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])), 0.0)
        self.assertAlmostEqual(gradcheck.relative_error(np.array([1.0]), np.array([3.0])), 0.5)
        self.assertEqual(gradcheck.relative_error(np.zeros(3), np.zeros(3)), 0.0)

    def test_roundoff_on_a_zero_gradient_passes(self):
        analytic = np.array([2e-15, -9e-16, 0.0, -1e-16])
        numeric = np.array([0.0, 3.6e-10, 0.0, 0.0])
        self.assertEqual(gradcheck.relative_error(analytic, numeric), 0.0)

    def test_step(self):
        self.assertEqual(gradcheck.STEP, 1e-4)

    def test_kink_inside_the_step_is_skipped(self):
        result = gradcheck.check_function("relu.kink", "tensor", T.relu, [np.array([[5e-5, 1.0, -2.0]])])
        self.assertTrue(result.passed, result.max_rel_error)
        self.assertEqual(result.skipped, 1)

    def test_scalar_outputs(self):
        result = gradcheck.check_function("mean", "tensor", lambda x: T.mean(T.mul(x, x)), [np.arange(6.0).reshape(2, 3)])
        self.assertTrue(result.passed, result.max_rel_error)

    def test_tensor_suite_passes(self):
        report = gradcheck.run_suite("tensor")
        self.assertTrue(report.passed, [(r.name, r.max_rel_error) for r in report.failures])

    def test_nn_suite_passes(self):
        report = gradcheck.run_suite("nn")
        self.assertTrue(report.passed, [(r.name, r.max_rel_error) for r in report.failures])
        self.assertIn("spectral_normalize.conv", [r.name for r in report.results])

    def test_block_suite_covers_every_shortcut(self):
        report = gradcheck.run_suite("blocks")
        self.assertTrue(report.passed, [(r.name, r.max_rel_error) for r in report.failures])
        names = [r.name for r in report.results]
        for kind in ("identity", "gated", "egs", "sog", "egsconv", "sogconv"):
            self.assertIn(f"block[{kind}]", names)

    def test_model_suite_includes_hinge_objective(self):
        report = gradcheck.run_suite("model")
        self.assertTrue(report.passed, [(r.name, r.max_rel_error) for r in report.failures])
        hinge = [r for r in report.results if r.name == "generator.hinge"]
        self.assertEqual(len(hinge), 1)
        self.assertEqual(hinge[0].tensors, 11)

    def test_wrong_rule_fails(self):
        with T.inject_backward_fault("sigmoid", 0.9):
            report = gradcheck.run_suite("tensor")
        self.assertEqual([r.name for r in report.failures], ["sigmoid"])

    def test_unknown_module(self):
        with self.assertRaises(ValidationError) as ctx:
            gradcheck.run_suite("optimizer")
        self.assertEqual(ctx.exception.code, "bad_value")

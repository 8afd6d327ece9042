from dataclasses import replace

import numpy as np
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from core.services import tensor as T
from core.services.blocks import ShortcutKind
from core.services.nn import SpectralNorm
from core.services.model import (
    DiscriminatorSpec,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    count_by_layer,
    match_width,
    param_count,
)
from core.services.tensor import Tensor

SMALL_G = GeneratorSpec(resolution=8, z_dim=4, width=8, num_classes=3, embed_dim=2, seed=3)
SMALL_D = DiscriminatorSpec(resolution=8, width=8, num_classes=3, seed=3)


class ParameterCountTests(SimpleTestCase):
    def test_gated_32x32_generator(self):
        with T.precision("float32"):
            gated = build_generator(GeneratorSpec(resolution=32, shortcut=ShortcutKind.GATED))
            identity = build_generator(GeneratorSpec(resolution=32, shortcut=ShortcutKind.IDENTITY))
        self.assertEqual(param_count(gated), 5_457_923)
        self.assertEqual(param_count(identity), 4_472_579)
        self.assertLess(abs(param_count(gated) - 4.66e6) / 4.66e6, 0.2)

    def test_layer_counts_sum_to_total(self):
        handle = build_generator(SMALL_G)
        layers = count_by_layer(handle)
        self.assertEqual(sum(layers.values()), handle.total_params)
        self.assertIn("g.block1.shortcut.Wg", layers)
        self.assertEqual(layers["g.fc"], 4 * 128 + 128)

    def test_match_width(self):
        target = param_count(build_generator(replace(SMALL_G, z_dim=16, width=32)))
        spec = replace(SMALL_G, z_dim=16, width=0, shortcut=ShortcutKind.IDENTITY)
        width, count = match_width(spec, target, step=1)
        self.assertGreater(width, 32)
        self.assertEqual(count, param_count(build_generator(replace(spec, width=width))))
        self.assertLess(abs(count - target) / target, 0.03)

    def test_unsupported_resolution(self):
        with self.assertRaises(ValidationError) as ctx:
            build_generator(GeneratorSpec(resolution=64))
        self.assertEqual(ctx.exception.code, "unsupported_resolution")


class GeneratorTests(SimpleTestCase):
    def setUp(self):
        self._precision = T.precision("float64")
        self._precision.__enter__()
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        self._precision.__exit__(None, None, None)

    def test_output_images(self):
        g = build_generator(SMALL_G)
        out = g(Tensor(self.rng.normal(size=(2, 4))))
        self.assertEqual(out.shape, (2, 3, 8, 8))
        self.assertLessEqual(np.abs(out.data).max(), 1.0)

    def test_latent_dimension(self):
        g = build_generator(SMALL_G)
        with self.assertRaises(ValidationError) as ctx:
            g(Tensor(self.rng.normal(size=(2, 5))))
        self.assertEqual(ctx.exception.code, "dim_mismatch")

    def test_one_trace_per_block(self):
        g = build_generator(replace(SMALL_G, resolution=16))
        traces = []
        g(Tensor(self.rng.normal(size=(2, 4))), traces=traces)
        self.assertEqual(len(traces), 2)
        self.assertEqual(traces[1].f_g.shape, (2, 8, 16, 16))

    def test_zero_class_embedding_matches_unconditional(self):
        g_u = build_generator(SMALL_G).set_mode("batch")
        g_c = build_generator(replace(SMALL_G, conditional=True)).set_mode("batch")
        for name, p in g_u.params.items():
            if name.endswith("affine.dense.weight"):
                p.value.data[...] = self.rng.normal(size=p.shape) * 0.2
                target = g_c.params[name].value.data
                target[...] = 0.0
                target[: p.shape[0]] = p.value.data
            elif name.endswith("affine.dense.bias"):
                p.value.data[...] = self.rng.normal(size=p.shape) * 0.2
                g_c.params[name].value.data[...] = p.value.data

        z = Tensor(self.rng.normal(size=(3, 4)))
        np.testing.assert_allclose(g_c(z, [0, 1, 2]).data, g_u(z).data, atol=1e-12)

    def test_conditional_generator_needs_labels(self):
        g = build_generator(replace(SMALL_G, conditional=True))
        with self.assertRaises(ValidationError):
            g(Tensor(self.rng.normal(size=(2, 4))))

    def test_sampling_is_seeded(self):
        g = build_generator(SMALL_G).set_mode("eval")
        first = g.sample(5, seed=1, batch_size=2)
        np.testing.assert_array_equal(first, g.sample(5, seed=1, batch_size=2))
        self.assertEqual(first.shape, (5, 3, 8, 8))
        self.assertFalse(np.array_equal(first, g.sample(5, seed=2, batch_size=2)))


class DiscriminatorTests(SimpleTestCase):
    def setUp(self):
        self._precision = T.precision("float64")
        self._precision.__enter__()
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        self._precision.__exit__(None, None, None)

    def test_logits(self):
        d = build_discriminator(SMALL_D)
        self.assertEqual(d(Tensor(self.rng.normal(size=(4, 3, 8, 8)))).shape, (4, 1))

    def test_resolution_mismatch(self):
        d = build_discriminator(SMALL_D)
        with self.assertRaises(ValidationError) as ctx:
            d(Tensor(self.rng.normal(size=(4, 3, 16, 16))))
        self.assertEqual(ctx.exception.code, "resolution_mismatch")

    def test_projection_term(self):
        d = build_discriminator(replace(SMALL_D, projection=True)).set_mode("eval")
        x = Tensor(self.rng.normal(size=(3, 3, 8, 8)))
        y = [2, 0, 1]
        gap = d(x, y).data - d(x, y, project=False).data
        expected = (d.module.embed(y).data * d.module.features(x).data).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(gap, expected, atol=1e-10)

    def test_spectral_norm_everywhere(self):
        d = build_discriminator(replace(SMALL_D, projection=True))
        kernels = [name for name in d.params if name.endswith((".kernel", ".weight", ".table"))]
        buffers = d.module.named_buffers()
        for name in kernels:
            self.assertIn(name.rsplit(".", 1)[0] + ".sn.u", buffers)

    def test_spectral_norm_bounds_every_layer(self):
        d = build_discriminator(replace(SMALL_D, projection=True)).set_mode("train")
        x = Tensor(self.rng.normal(size=(2, 3, 8, 8)))
        for _ in range(100):
            d(x, [0, 2])
        layers = [m for m in d.module.modules() if isinstance(m, SpectralNorm)]
        self.assertGreaterEqual(len(layers), 6)
        for layer in layers:
            w = layer.weight.value.data.reshape(layer.weight.shape[0], -1)
            sigma = np.linalg.svd(w / (layer.state.u @ w @ layer.state.v), compute_uv=False)[0]
            with self.subTest(layer=layer.name):
                self.assertGreaterEqual(sigma, 0.99)
                self.assertLessEqual(sigma, 1.01)


class ShortcutSwapTests(SimpleTestCase):
    def test_main_path_is_shared_across_shortcut_kinds(self):
        def main_path_params(kind):
            g = build_generator(replace(SMALL_G, shortcut=kind))
            return {name: p.value.data for name, p in g.params.items() if ".shortcut." not in name}

        reference = main_path_params(ShortcutKind.IDENTITY)
        for kind in ShortcutKind:
            params = main_path_params(kind)
            with self.subTest(kind=kind.value):
                self.assertEqual(list(params), list(reference))
                for name, value in params.items():
                    np.testing.assert_array_equal(value, reference[name])


class LargeResolutionTests(SimpleTestCase):
    def test_128_pixel_networks(self):
        rng = np.random.default_rng(0)
        g = build_generator(GeneratorSpec(resolution=128, z_dim=4, width=8, seed=1))
        self.assertEqual(len(g.spec.block_widths()), 5)
        images = g(Tensor(rng.normal(size=(2, 4))))
        self.assertEqual(images.shape, (2, 3, 128, 128))
        self.assertLessEqual(np.abs(images.data).max(), 1.0)

        d = build_discriminator(DiscriminatorSpec(resolution=128, width=8, seed=1))
        self.assertEqual(len(d.spec.layout()), 6)
        self.assertEqual(d(images).shape, (2, 1))

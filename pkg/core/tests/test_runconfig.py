import tempfile
from pathlib import Path

from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from core.services.blocks import ShortcutKind
from core.services.runconfig import KEYS, RunConfig, default_text, parse_text


class RunConfigTextTests(SimpleTestCase):
    def test_defaults_round_trip(self):
        text = default_text()
        self.assertEqual(RunConfig.from_text(text), RunConfig())
        self.assertEqual(RunConfig.from_text(text).emit(), text)

    def test_every_key_is_documented(self):
        lines = default_text().splitlines()
        self.assertEqual(len(lines), 2 * len(KEYS))
        self.assertTrue(all(line.startswith("# ") for line in lines[::2]))

    def test_comments_and_blank_lines(self):
        pairs = parse_text("# a comment\n\n  lr_g = 0.001  \nshortcut=egs\n")
        self.assertEqual(dict(pairs), {"lr_g": "0.001", "shortcut": "egs"})

    def test_unknown_key(self):
        with self.assertRaises(ValidationError) as ctx:
            RunConfig.from_text("learning_rate = 0.1\n")
        self.assertEqual(ctx.exception.code, "unknown_key")

    def test_bad_values(self):
        for text in ("z_dim = many\n", "shortcut = highway\n", "n_dis = 0\n", "conditional = maybe\n"):
            with self.subTest(text=text), self.assertRaises(ValidationError) as ctx:
                RunConfig.from_text(text)
            self.assertEqual(ctx.exception.code, "bad_value")

    def test_snapshot_skips_counters(self):
        pairs = dict(RunConfig().as_pairs(), **{"state.g_iter": "12"})
        self.assertEqual(RunConfig.from_pairs(pairs), RunConfig())


class ResolveTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.path = Path(self.tmp.name) / "run.cfg"

    def tearDown(self):
        self.tmp.cleanup()

    def test_precedence(self):
        self.path.write_text("seed = 1\nlr_g = 0.001\nshortcut = sog\n", encoding="utf-8")
        cfg = RunConfig.resolve(self.path, ["seed=2", "lr_d=0.003"], {"seed": 3, "shortcut": None})
        self.assertEqual(cfg.seed, 3)
        self.assertEqual(cfg.lr_g, 0.001)
        self.assertEqual(cfg.lr_d, 0.003)
        self.assertEqual(cfg.shortcut, "sog")

    def test_preset_from_file_is_overridden_by_file_values(self):
        self.path.write_text("preset = ttur\nlr_g = 0.0005\n", encoding="utf-8")
        cfg = RunConfig.resolve(self.path)
        self.assertEqual(cfg.preset, "ttur")
        self.assertEqual(cfg.lr_g, 0.0005)
        self.assertEqual(cfg.lr_d, 4e-4)
        self.assertEqual(cfg.n_dis, 1)

    def test_preset_flag(self):
        cfg = RunConfig.resolve(None, [], {"preset": "ttur"})
        self.assertEqual((cfg.lr_g, cfg.lr_d, cfg.batch_d), (1e-4, 4e-4, 32))

    def test_missing_file(self):
        with self.assertRaises(ValidationError):
            RunConfig.resolve(self.path)


class ViewTests(SimpleTestCase):
    def test_specs_follow_config(self):
        cfg = RunConfig({"shortcut": "egsconv", "conditional": True, "resolution": 16, "g_width": 64, "sn_on_g": True})
        g = cfg.generator_spec()
        self.assertEqual(g.shortcut, ShortcutKind.EGS_CONV)
        self.assertEqual((g.resolution, g.width, g.sn, g.conditional), (16, 64, True, True))
        d = cfg.discriminator_spec()
        self.assertTrue(d.projection)
        self.assertTrue(d.sn)

    def test_train_view(self):
        tc = RunConfig({"lr_g": 1e-3, "n_dis": 2, "loss": "standard"}).train_config()
        self.assertEqual((tc.lr_g, tc.n_dis, tc.loss), (1e-3, 2, "standard"))

import tempfile
from io import StringIO
from pathlib import Path

from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from openpyxl import load_workbook

from core.services.runconfig import RunConfig, default_text

TINY_SETTINGS = [
    "resolution=8",
    "z_dim=4",
    "g_width=8",
    "d_width=8",
    "synth_n=32",
    "batch_d=4",
    "batch_g=4",
    "n_dis=1",
    "total_g_iters=2",
    "decay_last_iters=1",
    "eval_every=2",
    "eval_samples=16",
    "feature_dim=8",
    "checkpoint_every=0",
    "sample_every=0",
]


def _set_args(pairs):
    args = []
    for pair in pairs:
        args += ["--set", pair]
    return args


class ShowConfigCommandTests(SimpleTestCase):
    def test_defaults(self):
        out = StringIO()
        call_command("show_config", "--defaults", stdout=out)
        self.assertEqual(out.getvalue(), default_text())

    def test_resolved_output_parses_back(self):
        out = StringIO()
        call_command("show_config", "--preset", "ttur", "--set", "seed=9", stdout=out)
        cfg = RunConfig.from_text(out.getvalue())
        self.assertEqual((cfg.preset, cfg.seed, cfg.n_dis), ("ttur", 9, 1))

    def test_unknown_key_is_a_command_error(self):
        with self.assertRaises(CommandError):
            call_command("show_config", "--set", "momentum=0.5", stdout=StringIO())


class ParamCountCommandTests(SimpleTestCase):
    def test_totals(self):
        out = StringIO()
        call_command("param_count", "--total-only", stdout=out)
        self.assertIn("generator total 5457923", out.getvalue())

        out = StringIO()
        call_command("param_count", "--total-only", "--shortcut", "identity", stdout=out)
        self.assertIn("generator total 4472579", out.getvalue())

    def test_layer_table(self):
        out = StringIO()
        call_command("param_count", "--model", "both", *_set_args(["resolution=8", "g_width=8", "d_width=8"]), stdout=out)
        text = out.getvalue()
        self.assertIn("g.block1.shortcut.Wo", text)
        self.assertIn("discriminator total", text)


class GradCheckCommandTests(SimpleTestCase):
    def test_tensor_rules_pass(self):
        out = StringIO()
        call_command("grad_check", "--module", "tensor", stdout=out)
        self.assertIn("checks passed", out.getvalue())
        self.assertNotIn("FAIL", out.getvalue())

    def test_all_modules_pass(self):
        out = StringIO()
        call_command("grad_check", stdout=out)
        text = out.getvalue()
        for name in ("block[gated]", "generator[conditional=True]", "discriminator[projection]"):
            self.assertIn(name, text)
        self.assertIn("checks passed", text)

    def test_injected_fault_is_caught(self):
        with self.assertRaises(CommandError) as ctx:
            call_command("grad_check", "--module", "tensor", "--inject-fault", "conv2d", stdout=StringIO())
        self.assertIn("conv2d.same3x3", str(ctx.exception))
        self.assertNotIn("matmul", str(ctx.exception))


class RunCommandsTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.run_dir = cls.root / "run"
        call_command("train", "--out", str(cls.run_dir), "--seed", "3", *_set_args(TINY_SETTINGS), stdout=StringIO())
        cls.checkpoint = cls.run_dir / "ckpt_2.bin"

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_run_outputs(self):
        for name in ("config.txt", "metrics.csv", "eval.csv", "ckpt_2.bin"):
            self.assertTrue((self.run_dir / name).exists(), name)
        cfg = RunConfig.from_text((self.run_dir / "config.txt").read_text(encoding="utf-8"))
        self.assertEqual((cfg.seed, cfg.resolution), (3, 8))

    def test_sample_grid(self):
        out = self.root / "grid.ppm"
        call_command("sample", str(self.checkpoint), "--n", "4", "--grid", "2", "--out", str(out), stdout=StringIO())
        data = out.read_bytes()
        header = b"P6\n16 16\n255\n"
        self.assertTrue(data.startswith(header))
        self.assertEqual(len(data), len(header) + 16 * 16 * 3)

    def test_eval_prints_csv(self):
        out = StringIO()
        dump = self.root / "dump"
        call_command("eval", str(self.checkpoint), "--n-samples", "16", "--dump-dir", str(dump), stdout=out)
        lines = out.getvalue().splitlines()
        self.assertEqual(lines[0], "fid,is")
        fid, score = (float(v) for v in lines[1].split(","))
        self.assertGreaterEqual(fid, -1e-9)
        self.assertGreaterEqual(score, 1.0 - 1e-9)
        self.assertEqual(len((dump / "fake_features.csv").read_text(encoding="utf-8").splitlines()), 16)

    def test_export_metrics(self):
        xlsx = self.root / "metrics.xlsx"
        call_command("export_metrics", f"tiny={self.run_dir}", "--out", str(xlsx), stdout=StringIO())
        wb = load_workbook(xlsx)
        self.assertEqual(wb.sheetnames, ["Losses", "FID-IS", "Trials"])
        self.assertEqual(wb["Losses"]["B1"].value, "tiny loss_d")
        self.assertEqual(wb["Losses"].max_row, 3)

    def test_missing_checkpoint(self):
        with self.assertRaises(CommandError):
            call_command("sample", str(self.root / "nope.bin"), stdout=StringIO())

    def test_unwritable_output_is_a_command_error(self):
        blocker = self.root / "blocker"
        blocker.write_text("", encoding="utf-8")
        with self.assertRaises(CommandError):
            call_command("train", "--out", str(blocker / "run"), *_set_args(TINY_SETTINGS), stdout=StringIO())


class CompareCommandTests(SimpleTestCase):
    def test_reports_each_run_and_the_tally(self):
        out = StringIO()
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            call_command("compare", "--out", str(root), "--seeds", "4", *_set_args(TINY_SETTINGS), stdout=out)
            lines = (root / "comparison.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(lines), 3)
        text = out.getvalue()
        self.assertIn("gated seed=4 fid", text)
        self.assertIn("identity seed=4 fid", text)
        self.assertIn("gated <= identity on", text)

    def test_unknown_shortcut(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(CommandError):
                call_command("compare", "--out", tmp, "--shortcuts", "gated", "residual", *_set_args(TINY_SETTINGS), stdout=StringIO())

from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand

from core.management.commands._runflags import add_config_arguments, command_errors, resolve_config
from core.services.train import run_training


class Command(BaseCommand):
    help = (
        "Train a generator/discriminator pair. Writes metrics.csv, eval.csv, "
        "ckpt_<iter>.bin and samples_<iter>.ppm into --out."
    )

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--out", help="Output directory (default: GSGAN_OUTPUT_DIR/<shortcut>-seed<seed>).")
        parser.add_argument("--resume", help="Checkpoint to continue from.")

    def handle(self, *args, **options):
        cfg = resolve_config(options)
        out_dir = Path(options.get("out") or Path(settings.GSGAN_OUTPUT_DIR) / f"{cfg.shortcut}-seed{cfg.seed}")

        self.stdout.write(
            f"Training shortcut={cfg.shortcut} resolution={cfg.resolution} preset={cfg.preset} "
            f"iters={cfg.total_g_iters} out={out_dir}"
        )
        with command_errors():
            summary = run_training(cfg, out_dir, resume=options.get("resume"))

        self.stdout.write(self.style.SUCCESS(f"Finished {summary.iterations} generator iterations."))
        self.stdout.write(f"metrics: {summary.metrics_path}")
        if summary.last_checkpoint:
            self.stdout.write(f"checkpoint: {summary.last_checkpoint}")
        if summary.fid is not None:
            self.stdout.write(f"fid={summary.fid:.6f} is={summary.is_score:.6f}")

from pathlib import Path

from django.core.management.base import BaseCommand

from core.management.commands._runflags import command_errors, load_generator
from core.services.imaging import write_ppm_grid


class Command(BaseCommand):
    help = "Write a binary PPM (P6) grid of generator samples from a checkpoint."

    def add_arguments(self, parser):
        parser.add_argument("checkpoint", help="ckpt_<iter>.bin from a training run.")
        parser.add_argument("--n", type=int, default=16)
        parser.add_argument("--grid", type=int, default=4, help="Grid columns.")
        parser.add_argument("--out", default="samples.ppm")
        parser.add_argument("--seed", type=int, help="Latent seed (default: the run seed).")
        parser.add_argument("--bn-mode", choices=["eval", "batch"], help="BN statistics (default: sample_bn_mode).")
        parser.add_argument("--png", action="store_true", help="Also write a .png copy.")

    def handle(self, *args, **options):
        cfg, g = load_generator(options["checkpoint"], options.get("bn_mode"))
        seed = cfg.seed if options.get("seed") is None else options["seed"]
        with command_errors():
            images = g.sample(options["n"], seed)
            path = write_ppm_grid(images, options["grid"], Path(options["out"]), png=options["png"])
        self.stdout.write(self.style.SUCCESS(f"Wrote {options['n']} samples to {path}"))

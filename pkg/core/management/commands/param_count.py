from dataclasses import replace

from django.core.management.base import BaseCommand

from core.management.commands._runflags import add_config_arguments, command_errors, resolve_config
from core.services import tensor as T
from core.services.model import build_discriminator, build_generator, count_by_layer, match_width, param_count


class Command(BaseCommand):
    help = "Print per-layer and total parameter counts for the generator and/or discriminator of a run config."

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--model", choices=["generator", "discriminator", "both"], default="generator")
        parser.add_argument("--total-only", action="store_true", help="Skip the per-layer table.")
        parser.add_argument(
            "--match",
            type=int,
            metavar="N",
            help="Also report the channel width whose count is closest to N (parameter-matched baseline).",
        )

    def handle(self, *args, **options):
        cfg = resolve_config(options)
        wanted = ["generator", "discriminator"] if options["model"] == "both" else [options["model"]]

        with command_errors(), T.precision("float32"):
            for kind in wanted:
                spec = cfg.generator_spec() if kind == "generator" else cfg.discriminator_spec()
                handle = build_generator(spec) if kind == "generator" else build_discriminator(spec)
                self.stdout.write(f"{kind} resolution={cfg.resolution} shortcut={cfg.shortcut}")
                if not options["total_only"]:
                    for layer, count in count_by_layer(handle).items():
                        self.stdout.write(f"  {layer:<40} {count:>12,}")
                self.stdout.write(self.style.SUCCESS(f"{kind} total {param_count(handle)}"))

                if options.get("match"):
                    width, count = match_width(replace(spec, width=0), options["match"])
                    self.stdout.write(f"{kind} width {width} gives {count} (target {options['match']})")

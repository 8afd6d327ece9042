from django.core.management.base import BaseCommand

from core.management.commands._runflags import add_config_arguments, resolve_config
from core.services.runconfig import RunConfig


class Command(BaseCommand):
    help = "Print the default run config, or the config resolved from --config/--set/flags, as key = value text."

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--defaults", action="store_true", help="Ignore every other flag and print the defaults.")

    def handle(self, *args, **options):
        cfg = RunConfig() if options["defaults"] else resolve_config(options)
        self.stdout.write(cfg.emit(), ending="")

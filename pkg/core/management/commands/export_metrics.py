from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from core.management.commands._runflags import command_errors
from core.services.reports import export_metrics


class Command(BaseCommand):
    help = (
        "Export per-iteration metrics of one or more runs to an .xlsx workbook "
        "(loss and FID/IS sheets with line charts, plus a trial summary)."
    )

    def add_arguments(self, parser):
        parser.add_argument(
            "runs",
            nargs="+",
            help="metrics.csv paths or run directories, optionally labelled as LABEL=PATH.",
        )
        parser.add_argument("--out", default="metrics.xlsx")

    def handle(self, *args, **options):
        runs = []
        for item in options["runs"]:
            label, sep, raw = item.partition("=")
            path = Path(raw if sep else item)
            if path.is_dir():
                path = path / "metrics.csv"
            if not path.exists():
                raise CommandError(f"No metrics file at {path}")
            runs.append((label if sep else path.parent.name or str(path), path))

        with command_errors():
            out = export_metrics(runs, options["out"])
        self.stdout.write(self.style.SUCCESS(f"Exported {len(runs)} run(s) to {out}"))

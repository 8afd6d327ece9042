from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand

from core.management.commands._runflags import add_config_arguments, command_errors, resolve_config
from core.services.train import compare_shortcuts


class Command(BaseCommand):
    help = (
        "Train each shortcut variant over several seeds from one config and "
        "compare FID at the first and last evaluation. Writes comparison.csv into --out."
    )

    def add_arguments(self, parser):
        add_config_arguments(parser)
        parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
        parser.add_argument("--shortcuts", nargs="+", default=["gated", "identity"])
        parser.add_argument("--out", help="Output directory (default: GSGAN_OUTPUT_DIR/compare).")

    def handle(self, *args, **options):
        cfg = resolve_config(options)
        out_dir = Path(options.get("out") or Path(settings.GSGAN_OUTPUT_DIR) / "compare")
        shortcuts = options["shortcuts"]

        self.stdout.write(f"Comparing {','.join(shortcuts)} over seeds {options['seeds']} out={out_dir}")
        with command_errors():
            result = compare_shortcuts(cfg, out_dir, shortcuts=shortcuts, seeds=options["seeds"])

        for row in result.rows:
            verdict = "improved" if row.improved else "not improved"
            self.stdout.write(f"{row.shortcut} seed={row.seed} fid {row.fid_start:.4f} -> {row.fid_end:.4f} ({verdict})")
        for shortcut, trial in result.trials.items():
            self.stdout.write(f"{shortcut}: fid mean={trial.fid_mean:.4f} std={trial.fid_std:.4f} over {trial.runs} run(s)")
        if len(shortcuts) >= 2:
            first, baseline = shortcuts[0], shortcuts[1]
            wins = result.wins(first, baseline)
            self.stdout.write(self.style.SUCCESS(f"{first} <= {baseline} on {wins} of {len(options['seeds'])} seed(s)"))
        self.stdout.write(f"table: {out_dir / 'comparison.csv'}")

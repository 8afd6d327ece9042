import contextlib

from django.core.management.base import BaseCommand, CommandError

from core.management.commands._runflags import command_errors
from core.services import gradcheck
from core.services import tensor as T


class Command(BaseCommand):
    help = "Finite-difference check of every backward rule at 64-bit; fails if any relative error exceeds 1e-4."

    def add_arguments(self, parser):
        parser.add_argument("--module", default="all", choices=("all",) + gradcheck.MODULES)
        parser.add_argument("--seed", type=int, default=0)
        parser.add_argument(
            "--inject-fault",
            metavar="OP",
            help="Scale one op's backward rule (harness self-test; the check should fail).",
        )
        parser.add_argument("--fault-factor", type=float, default=1.5)

    def handle(self, *args, **options):
        fault = options.get("inject_fault")
        guard = T.inject_backward_fault(fault, options["fault_factor"]) if fault else contextlib.nullcontext()
        with command_errors(), guard:
            report = gradcheck.run_suite(options["module"], seed=options["seed"])

        width = max((len(r.name) for r in report.results), default=10)
        for r in report.results:
            status = self.style.SUCCESS("ok") if r.passed else self.style.ERROR("FAIL")
            self.stdout.write(f"{r.module:<7} {r.name:<{width}} {r.max_rel_error:.3e} {status}")

        if not report.passed:
            names = ", ".join(r.name for r in report.failures)
            raise CommandError(f"Gradient check failed for: {names}")
        worst = report.worst
        self.stdout.write(
            self.style.SUCCESS(
                f"All {len(report.results)} checks passed (worst {worst.name} {worst.max_rel_error:.3e})."
            )
        )

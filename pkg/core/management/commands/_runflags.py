"""Flags and error mapping shared by the run commands."""
from __future__ import annotations

import contextlib

from django.core.exceptions import ValidationError
from django.core.management.base import CommandError

from core.services import tensor as T
from core.services.blocks import ShortcutKind
from core.services.checkpoint import load_checkpoint
from core.services.model import build_generator
from core.services.runconfig import RunConfig
from core.services.train import restore_model


def add_config_arguments(parser):
    parser.add_argument("--config", help="Run config file (key = value lines).")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        metavar="KEY=VALUE",
        help="Override one config key; repeatable.",
    )
    parser.add_argument("--seed", type=int, help="Run seed.")
    parser.add_argument("--preset", choices=["cifar", "ttur", "none"], help="Training schedule preset.")
    parser.add_argument("--shortcut", choices=[k.value for k in ShortcutKind], help="Generator shortcut variant.")


@contextlib.contextmanager
def command_errors():
    try:
        yield
    except ValidationError as exc:
        raise CommandError("; ".join(exc.messages)) from exc
    except OSError as exc:
        raise CommandError(str(exc)) from exc


def resolve_config(options) -> RunConfig:
    flags = {
        "seed": options.get("seed"),
        "preset": options.get("preset"),
        "shortcut": options.get("shortcut"),
    }
    with command_errors():
        return RunConfig.resolve(options.get("config"), options.get("overrides") or [], flags)


def load_generator(path, bn_mode=None):
    """Generator handle restored from a training checkpoint, plus its run config."""
    with command_errors():
        ckpt = load_checkpoint(path)
        cfg = RunConfig.from_pairs(ckpt.config)
        with T.precision(cfg.dtype):
            g = build_generator(cfg.generator_spec())
            restore_model(ckpt, g)
        g.set_mode(bn_mode or cfg.sample_bn_mode)
        return cfg, g

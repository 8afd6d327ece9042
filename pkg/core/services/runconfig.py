"""
Run configuration: flat `key = value` text, `#` comment lines, UTF-8.

Resolution order: defaults -> preset -> config file -> --set -> explicit flags.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

from django.conf import settings
from django.core.exceptions import ValidationError

from core.services.blocks import ShortcutKind
from core.services.model import RESOLUTIONS, DiscriminatorSpec, GeneratorSpec
from core.services.train import LOSSES, PRESETS, TrainConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfigKey:
    name: str
    kind: type
    default: object
    help: str
    choices: tuple = ()
    minimum: Optional[float] = None

    def parse(self, raw: str):
        text = str(raw).strip()
        try:
            if self.kind is bool:
                lowered = text.lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(text)
                value = lowered in ("true", "1", "yes")
            elif self.kind is int:
                value = int(text)
            elif self.kind is float:
                value = float(text)
            else:
                value = text
        except ValueError:
            raise ValidationError(
                "%(key)s: cannot read %(raw)r as %(kind)s.",
                code="bad_value",
                params={"key": self.name, "raw": text, "kind": self.kind.__name__},
            ) from None
        self.check(value)
        return value

    def check(self, value) -> None:
        if self.choices and value not in self.choices:
            raise ValidationError(
                "%(key)s must be one of %(choices)s, got %(v)s.",
                code="bad_value",
                params={"key": self.name, "choices": ", ".join(str(c) for c in self.choices), "v": value},
            )
        if self.minimum is not None and value < self.minimum:
            raise ValidationError(
                "%(key)s must be >= %(m)s, got %(v)s.",
                code="bad_value",
                params={"key": self.name, "m": self.minimum, "v": value},
            )

    def format(self, value) -> str:
        if self.kind is bool:
            return "true" if value else "false"
        if self.kind is float:
            return repr(float(value))
        return str(value)


KEYS = [
    ConfigKey("preset", str, "cifar", "training schedule preset", ("cifar", "ttur", "none")),
    ConfigKey("shortcut", str, "gated", "generator shortcut variant", tuple(k.value for k in ShortcutKind)),
    ConfigKey("resolution", int, 32, "image side in pixels", RESOLUTIONS),
    ConfigKey("z_dim", int, 128, "latent dimension", minimum=1),
    ConfigKey("g_width", int, 0, "generator channel width (0 = table widths)", minimum=0),
    ConfigKey("d_width", int, 0, "discriminator channel width (0 = table widths)", minimum=0),
    ConfigKey("conditional", bool, False, "class-conditional G (cBN on class) and projection D"),
    ConfigKey("num_classes", int, 10, "number of classes K", minimum=1),
    ConfigKey("embed_dim", int, 128, "class embedding size in the generator", minimum=1),
    ConfigKey("noise_cbn", bool, True, "generator BN affine predicted from z"),
    ConfigKey("shortcut_bn_conditional", bool, False, "conditional BN inside the gated shortcut"),
    ConfigKey("sn_on_g", bool, False, "spectral norm on generator layers"),
    ConfigKey("sn_on_d", bool, True, "spectral norm on discriminator layers"),
    ConfigKey("init", str, "glorot", "weight initializer", ("glorot", "normal")),
    ConfigKey("loss", str, "hinge", "adversarial loss", tuple(LOSSES)),
    ConfigKey("lr_g", float, 2e-4, "generator learning rate", minimum=0.0),
    ConfigKey("lr_d", float, 2e-4, "discriminator learning rate", minimum=0.0),
    ConfigKey("beta1", float, 0.0, "Adam beta1", minimum=0.0),
    ConfigKey("beta2", float, 0.9, "Adam beta2", minimum=0.0),
    ConfigKey("adam_eps", float, 1e-8, "Adam epsilon", minimum=0.0),
    ConfigKey("n_dis", int, 5, "discriminator updates per generator update", minimum=1),
    ConfigKey("batch_d", int, 64, "discriminator batch size", minimum=2),
    ConfigKey("batch_g", int, 128, "generator batch size", minimum=2),
    ConfigKey("total_g_iters", int, 100000, "generator iterations", minimum=0),
    ConfigKey("decay_last_iters", int, 50000, "linear lr decay over the last N iterations", minimum=0),
    ConfigKey("seed", int, 0, "run seed (init, latents, shuffling)", minimum=0),
    ConfigKey("dataset", str, "synth", "training data", ("synth", "cifar10")),
    ConfigKey("data_dir", str, "", "CIFAR-10 binary directory (empty = GSGAN_DATA_DIR)"),
    ConfigKey("synth_kind", str, "blobs", "synthetic pattern", ("rings", "blobs", "stripes")),
    ConfigKey("synth_n", int, 2000, "synthetic dataset size", minimum=1),
    ConfigKey("eval_every", int, 5000, "FID/IS every N iterations (0 = never)", minimum=0),
    ConfigKey("eval_samples", int, 1000, "samples per evaluation", minimum=2),
    ConfigKey("checkpoint_every", int, 5000, "checkpoint every N iterations (0 = final only)", minimum=0),
    ConfigKey("sample_every", int, 5000, "sample grid every N iterations (0 = never)", minimum=0),
    ConfigKey("sample_grid", int, 8, "sample grid columns and rows", minimum=1),
    ConfigKey("log_every", int, 100, "log losses every N iterations", minimum=1),
    ConfigKey("extractor", str, "random_conv", "feature extractor for FID/IS", ("random_conv", "pixel_moments", "file")),
    ConfigKey("extractor_path", str, "", "weights file for extractor = file"),
    ConfigKey("feature_dim", int, 64, "random-conv feature dimension", minimum=1),
    ConfigKey("dtype", str, "float32", "tensor precision", ("float32", "float64")),
    ConfigKey("sample_bn_mode", str, "eval", "BN statistics when sampling", ("eval", "batch")),
]
KEY_INDEX = OrderedDict((k.name, k) for k in KEYS)


def _key(name: str) -> ConfigKey:
    try:
        return KEY_INDEX[name]
    except KeyError:
        raise ValidationError("Unknown config key %(k)s.", code="unknown_key", params={"k": name}) from None


def parse_text(text: str, source: str = "<text>") -> "OrderedDict[str, str]":
    """Raw key -> value strings; unknown keys and malformed lines are rejected."""
    pairs: "OrderedDict[str, str]" = OrderedDict()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(
                "%(src)s:%(line)s: expected key = value.",
                code="bad_value",
                params={"src": source, "line": lineno},
            )
        key, _, value = stripped.partition("=")
        key = key.strip()
        _key(key)
        pairs[key] = value.strip()
    return pairs


def parse_assignments(items: Iterable[str]) -> "OrderedDict[str, str]":
    pairs: "OrderedDict[str, str]" = OrderedDict()
    for item in items or ():
        if "=" not in item:
            raise ValidationError("--set expects key=value, got %(i)s.", code="bad_value", params={"i": item})
        key, _, value = item.partition("=")
        _key(key.strip())
        pairs[key.strip()] = value.strip()
    return pairs


class RunConfig:
    """Every key has a default; values are typed after parsing."""

    def __init__(self, values: Optional[Mapping] = None):
        self._values = OrderedDict((k.name, k.default) for k in KEYS)
        if values:
            self._values.update(self._coerce(values))

    @staticmethod
    def _coerce(values: Mapping) -> "OrderedDict[str, object]":
        out = OrderedDict()
        for name, value in values.items():
            key = _key(name)
            if isinstance(value, str) and key.kind is not str:
                out[name] = key.parse(value)
            else:
                value = key.kind(value) if key.kind is not bool else bool(value)
                key.check(value)
                out[name] = value
        return out

    def __getattr__(self, name):
        values = self.__dict__.get("_values")
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def __getitem__(self, name):
        return self._values[_key(name).name]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self._values == other._values

    def updated(self, values: Mapping) -> "RunConfig":
        merged = OrderedDict(self._values)
        merged.update(self._coerce(values))
        return RunConfig(merged)

    def as_pairs(self) -> "OrderedDict[str, str]":
        return OrderedDict((k.name, k.format(self._values[k.name])) for k in KEYS)

    def emit(self) -> str:
        lines = []
        for k in KEYS:
            note = k.help + (f" ({'|'.join(str(c) for c in k.choices)})" if k.choices else "")
            lines.append(f"# {note}")
            lines.append(f"{k.name} = {k.format(self._values[k.name])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "RunConfig":
        return cls(parse_text(text, source))

    @classmethod
    def from_pairs(cls, pairs: Mapping[str, str]) -> "RunConfig":
        """Rebuild from a checkpoint snapshot; `state.*` counters are skipped."""
        return cls(OrderedDict((k, v) for k, v in pairs.items() if not k.startswith("state.")))

    @classmethod
    def resolve(cls, config_path=None, overrides: Iterable[str] = (), flags: Optional[Mapping] = None) -> "RunConfig":
        file_pairs = OrderedDict()
        if config_path:
            path = Path(config_path)
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ValidationError("Cannot read config %(p)s: %(e)s", code="bad_value", params={"p": str(path), "e": exc}) from exc
            file_pairs = parse_text(text, str(path))
        set_pairs = parse_assignments(overrides)
        flags = OrderedDict((k, v) for k, v in (flags or {}).items() if v is not None)

        preset = _key("preset").parse(str(flags.get("preset", set_pairs.get("preset", file_pairs.get("preset", "cifar")))))
        cfg = cls().updated({"preset": preset, **PRESETS.get(preset, {})})
        cfg = cfg.updated(file_pairs).updated(set_pairs).updated(flags)
        logger.debug("config resolved preset=%s source=%s overrides=%s", cfg.preset, config_path or "-", len(set_pairs))
        return cfg

    # -------------------------
    # Views for the services
    # -------------------------

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(
            resolution=self.resolution,
            z_dim=self.z_dim,
            shortcut=ShortcutKind.parse(self.shortcut),
            conditional=self.conditional,
            num_classes=self.num_classes,
            embed_dim=self.embed_dim,
            width=self.g_width,
            noise_cbn=self.noise_cbn,
            sn=self.sn_on_g,
            shortcut_bn_conditional=self.shortcut_bn_conditional,
            seed=self.seed,
            init=self.init,
        )

    def discriminator_spec(self) -> DiscriminatorSpec:
        return DiscriminatorSpec(
            resolution=self.resolution,
            width=self.d_width,
            sn=self.sn_on_d,
            projection=self.conditional,
            num_classes=self.num_classes,
            seed=self.seed,
            init=self.init,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_g=self.lr_g,
            lr_d=self.lr_d,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.adam_eps,
            n_dis=self.n_dis,
            batch_d=self.batch_d,
            batch_g=self.batch_g,
            total_g_iters=self.total_g_iters,
            decay_last_iters=self.decay_last_iters,
            sn_on_g=self.sn_on_g,
            sn_on_d=self.sn_on_d,
            seed=self.seed,
            loss=self.loss,
        )

    def data_dir_path(self) -> Path:
        return Path(self.data_dir or settings.GSGAN_DATA_DIR)


def default_text() -> str:
    return RunConfig().emit()

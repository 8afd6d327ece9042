from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from django.core.exceptions import ValidationError

from core.services import tensor as T
from core.services.nn import (
    BatchNorm2d,
    ConditionalBatchNorm2d,
    Conv2d,
    Initializer,
    Module,
)
from core.services.tensor import Tensor

logger = logging.getLogger(__name__)


class ShortcutKind(str, enum.Enum):
    IDENTITY = "identity"
    GATED = "gated"
    EGS = "egs"
    SOG = "sog"
    EGS_CONV = "egsconv"
    SOG_CONV = "sogconv"

    @classmethod
    def parse(cls, value) -> "ShortcutKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValidationError(
                "Unknown shortcut %(v)s (choose from %(choices)s).",
                code="bad_value",
                params={"v": value, "choices": ", ".join(k.value for k in cls)},
            ) from None

    @property
    def has_output_conv(self) -> bool:
        return self in (ShortcutKind.GATED, ShortcutKind.EGS_CONV, ShortcutKind.SOG_CONV)


RESAMPLE = ("up2x", "down2x", "none")


@dataclass(frozen=True)
class BlockConfig:
    c_i: int
    c_c: int
    c_g: int
    c_r: int
    c_o: int
    resample: str = "up2x"
    shortcut: ShortcutKind = ShortcutKind.GATED
    conditional: bool = True

    @classmethod
    def for_generator(cls, c_in: int, c_out: int, shortcut=ShortcutKind.GATED, *, conditional=True) -> "BlockConfig":
        # c_c = c_g = c_r = c_o: the blend f_g * f_c needs matching channels
        return cls(c_in, c_out, c_out, c_out, c_out, "up2x", ShortcutKind.parse(shortcut), conditional)

    def validate(self) -> "BlockConfig":
        if self.resample not in RESAMPLE:
            raise ValidationError("Unknown resample %(r)s.", code="invalid_spec", params={"r": self.resample})
        if min(self.c_i, self.c_c, self.c_g, self.c_r, self.c_o) < 1:
            raise ValidationError("Channel counts must be positive.", code="invalid_spec")
        kind = self.shortcut
        if kind == ShortcutKind.GATED and not (self.c_g == self.c_r == self.c_o == self.c_c):
            raise ValidationError(
                "Gated shortcut needs c_c = c_g = c_r = c_o, got %(cfg)s.",
                code="invalid_spec",
                params={"cfg": self},
            )
        if not kind.has_output_conv and self.c_c != self.c_o:
            raise ValidationError(
                "%(kind)s shortcut needs c_c = c_o, got %(c_c)s and %(c_o)s.",
                code="invalid_spec",
                params={"kind": kind.value, "c_c": self.c_c, "c_o": self.c_o},
            )
        return self


@dataclass
class GatedShortcutTrace:
    f_i: np.ndarray = None
    f_c: np.ndarray = None
    f_g: np.ndarray = None
    f_r: np.ndarray = None
    f_o: np.ndarray = None


def match_spatial(x: Tensor, ref: Tensor) -> Tensor:
    """Nearest-neighbor resize of x up to ref's spatial size."""
    while x.shape[2] < ref.shape[2]:
        x = T.upsample_nearest2x(x)
    if x.shape[2:] != ref.shape[2:]:
        raise ValidationError(
            "Shortcut spatial size %(a)s does not match main path %(b)s.",
            code="shape_mismatch",
            params={"a": list(x.shape), "b": list(ref.shape)},
        )
    return x


# -------------------------
# Shortcut variants
# -------------------------

class GatedShortcut(Module):
    """BN(f_i) resized to f_c, then sigmoid gate W_g, refinement W_r and output W_o (all 1x1)."""

    def __init__(self, name, cfg: BlockConfig, init: Initializer, *, cond_dim=0, conditional_bn=False, sn=False):
        super().__init__(name)
        if conditional_bn:
            self.bn = self.add_module(ConditionalBatchNorm2d(self.path("bn"), cfg.c_i, cond_dim, init))
        else:
            self.bn = self.add_module(BatchNorm2d(self.path("bn"), cfg.c_i, affine=False))
        c_cat = cfg.c_c + cfg.c_i
        self.Wg = self.add_module(Conv2d(self.path("Wg"), c_cat, cfg.c_g, 1, init, sn=sn))
        self.Wr = self.add_module(Conv2d(self.path("Wr"), c_cat, cfg.c_r, 1, init, sn=sn, zero=True))
        self.Wo = self.add_module(Conv2d(self.path("Wo"), cfg.c_r, cfg.c_o, 1, init, sn=sn))

    def forward(self, f_i, f_c, cond=None, trace=None):
        return gated_shortcut(f_i, f_c, self, cond=cond, trace=trace)


def gated_shortcut(f_i: Tensor, f_c: Tensor, params: GatedShortcut, cond=None, trace: Optional[GatedShortcutTrace] = None) -> Tensor:
    x = match_spatial(params.bn(f_i, cond), f_c)
    h = T.concat_channels(f_c, x)
    f_g = T.sigmoid(params.Wg(h))
    f_r = params.Wr(h)
    blended = T.add(T.mul(f_g, f_c), T.mul(T.one_minus(f_g), f_r))
    f_o = params.Wo(blended)
    if trace is not None:
        trace.f_i, trace.f_c, trace.f_g, trace.f_r, trace.f_o = x.data, f_c.data, f_g.data, f_r.data, f_o.data
    return f_o


class GateShortcut(Module):
    """EGS / SOG and their +conv forms: gate over the raw (resampled, channel-aligned) input."""

    def __init__(self, name, cfg: BlockConfig, init: Initializer, *, sn=False):
        super().__init__(name)
        self.kind = cfg.shortcut
        self.align = None
        if cfg.c_i != cfg.c_c:
            self.align = self.add_module(Conv2d(self.path("align"), cfg.c_i, cfg.c_c, 1, init, sn=sn))
        self.Wg = self.add_module(Conv2d(self.path("Wg"), 2 * cfg.c_c, cfg.c_c, 1, init, sn=sn))
        self.Wo = None
        if self.kind.has_output_conv:
            self.Wo = self.add_module(Conv2d(self.path("Wo"), cfg.c_c, cfg.c_o, 1, init, sn=sn))

    def aligned_input(self, f_i: Tensor, f_c: Tensor) -> Tensor:
        x = match_spatial(f_i, f_c)
        return self.align(x) if self.align is not None else x

    def gate(self, x: Tensor, f_c: Tensor) -> Tensor:
        return T.sigmoid(self.Wg(T.concat_channels(f_c, x)))

    def forward(self, f_i, f_c, cond=None, trace=None):
        if self.kind in (ShortcutKind.EGS, ShortcutKind.EGS_CONV):
            return egs_shortcut(f_i, f_c, self, trace=trace)
        return sog_shortcut(f_i, f_c, self, trace=trace)


def egs_shortcut(f_i: Tensor, f_c: Tensor, params: GateShortcut, trace=None) -> Tensor:
    """f_g * f_i + (1 - f_g) * f_c; the +conv form appends W_o."""
    x = params.aligned_input(f_i, f_c)
    f_g = params.gate(x, f_c)
    out = T.add(T.mul(f_g, x), T.mul(T.one_minus(f_g), f_c))
    if params.Wo is not None:
        out = params.Wo(out)
    if trace is not None:
        trace.f_i, trace.f_c, trace.f_g, trace.f_o = x.data, f_c.data, f_g.data, out.data
    return out


def sog_shortcut(f_i: Tensor, f_c: Tensor, params: GateShortcut, trace=None) -> Tensor:
    """f_g * f_i + f_c; the gate touches the shortcut branch only."""
    x = params.aligned_input(f_i, f_c)
    f_g = params.gate(x, f_c)
    out = T.add(T.mul(f_g, x), f_c)
    if params.Wo is not None:
        out = params.Wo(out)
    if trace is not None:
        trace.f_i, trace.f_c, trace.f_g, trace.f_o = x.data, f_c.data, f_g.data, out.data
    return out


class IdentityShortcut(Module):
    def __init__(self, name, cfg: BlockConfig, init: Initializer, *, sn=False):
        super().__init__(name)
        self.align = None
        if cfg.c_i != cfg.c_o:
            self.align = self.add_module(Conv2d(self.path("align"), cfg.c_i, cfg.c_o, 1, init, sn=sn))

    def forward(self, f_i, f_c, cond=None, trace=None):
        x = match_spatial(f_i, f_c)
        x = self.align(x) if self.align is not None else x
        out = T.add(x, f_c)
        if trace is not None:
            trace.f_i, trace.f_c, trace.f_o = x.data, f_c.data, out.data
        return out


# -------------------------
# Generator block
# -------------------------

class GeneratorBlock(Module):
    """
    BigGAN-style pre-activation block:
    BN -> ReLU -> [up] -> 3x3 conv -> BN -> ReLU -> 3x3 conv, then a shortcut variant.
    BN is noise/class conditioned when cfg.conditional.
    """

    def __init__(self, name, cfg: BlockConfig, init: Initializer, *, cond_dim=0, sn=False, shortcut_bn_conditional=False):
        super().__init__(name)
        cfg.validate()
        if cfg.resample == "down2x":
            raise ValidationError("Generator blocks cannot downsample.", code="invalid_spec")
        if cfg.conditional and cond_dim < 1:
            raise ValidationError("Conditional block needs cond_dim >= 1.", code="invalid_spec")
        self.cfg = cfg
        self.bn1 = self.add_module(self._bn("bn1", cfg.c_i, cond_dim, init))
        self.conv1 = self.add_module(Conv2d(self.path("conv1"), cfg.c_i, cfg.c_c, 3, init, sn=sn))
        self.bn2 = self.add_module(self._bn("bn2", cfg.c_c, cond_dim, init))
        self.conv2 = self.add_module(Conv2d(self.path("conv2"), cfg.c_c, cfg.c_c, 3, init, sn=sn))

        kind = cfg.shortcut
        sc_name = self.path("shortcut")
        if kind == ShortcutKind.GATED:
            self.shortcut = GatedShortcut(
                sc_name, cfg, init, cond_dim=cond_dim,
                conditional_bn=shortcut_bn_conditional and cfg.conditional, sn=sn,
            )
        elif kind == ShortcutKind.IDENTITY:
            self.shortcut = IdentityShortcut(sc_name, cfg, init, sn=sn)
        else:
            self.shortcut = GateShortcut(sc_name, cfg, init, sn=sn)
        self.add_module(self.shortcut)

    def _bn(self, local, channels, cond_dim, init):
        if self.cfg.conditional:
            return ConditionalBatchNorm2d(self.path(local), channels, cond_dim, init)
        return BatchNorm2d(self.path(local), channels, affine=True)

    def forward(self, f_i: Tensor, cond: Optional[Tensor] = None, trace: Optional[GatedShortcutTrace] = None) -> Tensor:
        f_c = main_path(f_i, cond, self)
        return self.shortcut(f_i, f_c, cond=cond, trace=trace)


def main_path(f_i: Tensor, cond: Optional[Tensor], block: GeneratorBlock) -> Tensor:
    cfg = block.cfg
    if f_i.ndim != 4 or f_i.shape[1] != cfg.c_i:
        raise ValidationError(
            "Block %(n)s expects %(c)s input channels, got shape %(shape)s.",
            code="channel_mismatch",
            params={"n": block.name, "c": cfg.c_i, "shape": list(f_i.shape)},
        )
    h = T.relu(block.bn1(f_i, cond))
    if cfg.resample == "up2x":
        h = T.upsample_nearest2x(h)
    h = block.conv1(h)
    h = T.relu(block.bn2(h, cond))
    return block.conv2(h)


def identity_block(f_i: Tensor, cond: Optional[Tensor], block: GeneratorBlock) -> Tensor:
    if block.cfg.shortcut != ShortcutKind.IDENTITY:
        raise ValidationError("Block %(n)s is not an identity block.", code="invalid_spec", params={"n": block.name})
    return block(f_i, cond)


# -------------------------
# Discriminator block
# -------------------------

class DiscBlock(Module):
    """
    ReLU -> 3x3 conv -> ReLU -> 3x3 conv -> [avgpool]; the first block skips the
    leading ReLU and pools its shortcut before the 1x1 conv.
    """

    def __init__(self, name, c_in, c_out, init: Initializer, *, down=True, first=False, sn=True):
        super().__init__(name)
        self.c_in, self.c_out, self.down, self.first = c_in, c_out, down, first
        self.conv1 = self.add_module(Conv2d(self.path("conv1"), c_in, c_out, 3, init, sn=sn))
        self.conv2 = self.add_module(Conv2d(self.path("conv2"), c_out, c_out, 3, init, sn=sn))
        self.sc = None
        if c_in != c_out or down:
            self.sc = self.add_module(Conv2d(self.path("sc"), c_in, c_out, 1, init, sn=sn))

    def forward(self, x: Tensor) -> Tensor:
        return disc_block(x, self)


def disc_block(f_i: Tensor, block: DiscBlock) -> Tensor:
    if f_i.ndim != 4 or f_i.shape[1] != block.c_in:
        raise ValidationError(
            "Block %(n)s expects %(c)s input channels, got shape %(shape)s.",
            code="channel_mismatch",
            params={"n": block.name, "c": block.c_in, "shape": list(f_i.shape)},
        )
    h = f_i if block.first else T.relu(f_i)
    h = block.conv2(T.relu(block.conv1(h)))
    if block.down:
        h = T.avgpool2x(h)

    s = f_i
    if block.sc is not None:
        if block.first:
            s = block.sc(T.avgpool2x(s) if block.down else s)
        else:
            s = block.sc(s)
            s = T.avgpool2x(s) if block.down else s
    return T.add(h, s)

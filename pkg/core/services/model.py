from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from django.core.exceptions import ValidationError

from core.services import tensor as T
from core.services.blocks import BlockConfig, DiscBlock, GeneratorBlock, ShortcutKind
from core.services.data import PURPOSE_SAMPLE, sample_labels, sample_latent, stream
from core.services.nn import BatchNorm2d, Conv2d, Dense, Embedding, Initializer, Module
from core.services.tensor import Tensor

logger = logging.getLogger(__name__)

RESOLUTIONS = (8, 16, 32, 128)

# Table widths. 8 and 16 are desk-scale truncations of the 32x32 network.
G_WIDTHS = {
    8: [256],
    16: [256, 256],
    32: [256, 256, 256],
    128: [512, 512, 256, 128, 64],
}
G_FC_WIDTH = {8: 256, 16: 256, 32: 256, 128: 512}

# (channels, down) per block
D_LAYOUT = {
    8: [(128, True), (128, False), (128, False)],
    16: [(128, True), (128, True), (128, False), (128, False)],
    32: [(128, True), (128, True), (128, False), (128, False)],
    128: [(64, True), (128, True), (256, True), (512, True), (512, True), (512, False)],
}


def _check_resolution(resolution: int) -> None:
    if resolution not in RESOLUTIONS:
        raise ValidationError(
            "Unsupported resolution %(r)s (choose from %(choices)s).",
            code="unsupported_resolution",
            params={"r": resolution, "choices": ", ".join(str(r) for r in RESOLUTIONS)},
        )


@dataclass(frozen=True)
class GeneratorSpec:
    resolution: int = 32
    z_dim: int = 128
    shortcut: ShortcutKind = ShortcutKind.GATED
    conditional: bool = False
    num_classes: int = 10
    embed_dim: int = 128
    width: int = 0  # 0 = table widths
    noise_cbn: bool = True
    sn: bool = False
    shortcut_bn_conditional: bool = False
    seed: int = 0
    init: str = "glorot"

    def block_widths(self) -> list[int]:
        _check_resolution(self.resolution)
        table = G_WIDTHS[self.resolution]
        if not self.width:
            return list(table)
        return [max(1, round(self.width * w / table[0])) for w in table]

    def fc_width(self) -> int:
        _check_resolution(self.resolution)
        return self.width or G_FC_WIDTH[self.resolution]

    @property
    def cond_dim(self) -> int:
        return self.z_dim + (self.embed_dim if self.conditional else 0)


@dataclass(frozen=True)
class DiscriminatorSpec:
    resolution: int = 32
    width: int = 0  # 0 = table widths
    sn: bool = True
    projection: bool = False
    num_classes: int = 10
    seed: int = 0
    init: str = "glorot"

    def layout(self) -> list[tuple[int, bool]]:
        _check_resolution(self.resolution)
        table = D_LAYOUT[self.resolution]
        if not self.width:
            return list(table)
        return [(max(1, round(self.width * c / table[0][0])), down) for c, down in table]


# -------------------------
# Networks
# -------------------------

class Generator(Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__("g")
        self.spec = spec
        init = Initializer(spec.seed, spec.init)
        widths = spec.block_widths()
        c0 = spec.fc_width()
        self.c0 = c0
        self.fc = self.add_module(Dense(self.path("fc"), spec.z_dim, 4 * 4 * c0, init, sn=spec.sn))
        self.embed = None
        if spec.conditional:
            self.embed = self.add_module(Embedding(self.path("embed"), spec.num_classes, spec.embed_dim, init))

        conditional_bn = spec.noise_cbn or spec.conditional
        self.blocks = []
        c_in = c0
        for i, c_out in enumerate(widths, start=1):
            cfg = BlockConfig.for_generator(c_in, c_out, spec.shortcut, conditional=conditional_bn)
            block = GeneratorBlock(
                self.path(f"block{i}"), cfg, init,
                cond_dim=spec.cond_dim, sn=spec.sn,
                shortcut_bn_conditional=spec.shortcut_bn_conditional,
            )
            self.blocks.append(self.add_module(block))
            c_in = c_out
        self.bn_out = self.add_module(BatchNorm2d(self.path("bn_out"), c_in, affine=True))
        self.conv_out = self.add_module(Conv2d(self.path("conv_out"), c_in, 3, 3, init, sn=spec.sn))

    def conditioning(self, z: Tensor, y=None) -> Tensor:
        if not self.spec.conditional:
            return z
        if y is None:
            raise ValidationError("Class-conditional generator needs labels.", code="invalid_spec")
        return T.concat_channels(z, self.embed(y))

    def forward(self, z: Tensor, y=None, traces: Optional[list] = None) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.spec.z_dim:
            raise ValidationError(
                "Latent batch must be [b, %(d)s], got %(shape)s.",
                code="dim_mismatch",
                params={"d": self.spec.z_dim, "shape": list(z.shape)},
            )
        cond = self.conditioning(z, y)
        h = T.reshape(self.fc(z), (z.shape[0], self.c0, 4, 4))
        for block in self.blocks:
            trace = None
            if traces is not None:
                from core.services.blocks import GatedShortcutTrace

                trace = GatedShortcutTrace()
                traces.append(trace)
            h = block(h, cond, trace=trace)
        h = T.relu(self.bn_out(h))
        return T.tanh(self.conv_out(h))


class Discriminator(Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__("d")
        self.spec = spec
        init = Initializer(spec.seed, spec.init)
        self.blocks = []
        c_in = 3
        for i, (c_out, down) in enumerate(spec.layout(), start=1):
            block = DiscBlock(self.path(f"block{i}"), c_in, c_out, init, down=down, first=(i == 1), sn=spec.sn)
            self.blocks.append(self.add_module(block))
            c_in = c_out
        self.features_dim = c_in
        self.dense = self.add_module(Dense(self.path("dense"), c_in, 1, init, sn=spec.sn))
        self.embed = None
        if spec.projection:
            self.embed = self.add_module(Embedding(self.path("embed"), spec.num_classes, c_in, init, sn=spec.sn))

    def features(self, x: Tensor) -> Tensor:
        res = self.spec.resolution
        if x.ndim != 4 or x.shape[1:] != (3, res, res):
            raise ValidationError(
                "Discriminator expects [b, 3, %(r)s, %(r)s] images, got %(shape)s.",
                code="resolution_mismatch",
                params={"r": res, "shape": list(x.shape)},
            )
        h = x
        for block in self.blocks:
            h = block(h)
        return T.global_sum_pool(T.relu(h))

    def projection_term(self, pooled: Tensor, y) -> Tensor:
        return T.reduce_sum(T.mul(self.embed(y), pooled), axis=1, keepdims=True)

    def forward(self, x: Tensor, y=None, project: bool = True) -> Tensor:
        pooled = self.features(x)
        logit = self.dense(pooled)
        if self.embed is not None and project:
            if y is None:
                raise ValidationError("Projection discriminator needs labels.", code="invalid_spec")
            logit = T.add(logit, self.projection_term(pooled, y))
        return logit


# -------------------------
# Handles
# -------------------------

@dataclass
class ModelHandle:
    kind: str
    module: Module
    spec: object
    params: "OrderedDict[str, object]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        self.params = OrderedDict(self.module.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.module(*args, **kwargs)

    def forward(self, *args, **kwargs):
        return self.module(*args, **kwargs)

    @property
    def total_params(self) -> int:
        return param_count(self)

    def parameters(self):
        return list(self.params.values())

    def set_mode(self, mode: str) -> "ModelHandle":
        self.module.set_mode(mode)
        return self

    def sample(self, n: int, seed: int, labels=None, batch_size: int = 64, purpose: int = PURPOSE_SAMPLE) -> np.ndarray:
        """Generate n images with counter-based latents; no tape is recorded."""
        if self.kind != "generator":
            raise ValidationError("Only generators can sample.", code="invalid_spec")
        spec: GeneratorSpec = self.spec
        chunks = []
        for start in range(0, n, batch_size):
            b = min(batch_size, n - start)
            rng = stream(seed, purpose, start)
            z = sample_latent(b, spec.z_dim, rng)
            y = None
            if spec.conditional:
                y = labels[start:start + b] if labels is not None else sample_labels(b, spec.num_classes, rng)
            with T.no_tape():
                chunks.append(self.module(z, y).data)
        return np.concatenate(chunks, axis=0)


def build_generator(spec: GeneratorSpec) -> ModelHandle:
    _check_resolution(spec.resolution)
    handle = ModelHandle("generator", Generator(spec), spec)
    logger.info(
        "generator built resolution=%s shortcut=%s conditional=%s params=%s",
        spec.resolution, ShortcutKind.parse(spec.shortcut).value, spec.conditional, handle.total_params,
    )
    return handle


def build_discriminator(spec: DiscriminatorSpec) -> ModelHandle:
    _check_resolution(spec.resolution)
    handle = ModelHandle("discriminator", Discriminator(spec), spec)
    logger.info(
        "discriminator built resolution=%s sn=%s projection=%s params=%s",
        spec.resolution, spec.sn, spec.projection, handle.total_params,
    )
    return handle


def param_count(handle: ModelHandle) -> int:
    return sum(p.size for p in handle.params.values())


def count_by_layer(handle: ModelHandle) -> "OrderedDict[str, int]":
    """Layer prefix (parameter name without its last component) -> element count."""
    counts: "OrderedDict[str, int]" = OrderedDict()
    for name, p in handle.params.items():
        layer = name.rsplit(".", 1)[0]
        counts[layer] = counts.get(layer, 0) + p.size
    return counts


def match_width(spec, target_params: int, *, step: int = 8, max_width: int = 2048) -> tuple[int, int]:
    """
    Channel width whose parameter count is closest to target_params
    (the parameter-matched baseline procedure). Returns (width, count).
    """
    build = build_generator if isinstance(spec, GeneratorSpec) else build_discriminator

    @lru_cache(maxsize=None)
    def count(width):
        with T.precision(np.float32):
            return param_count(build(replace(spec, width=width)))

    # counts grow with width: bracket by doubling, then bisect
    hi = 1
    while hi * step < max_width and count(hi * step) < target_params:
        hi *= 2
    lo = max(1, hi // 2)
    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid * step) < target_params:
            lo = mid + 1
        else:
            hi = mid
    candidates = {w: count(w) for w in {max(step, (lo - 1) * step), lo * step}}
    width = min(candidates, key=lambda w: (abs(candidates[w] - target_params), w))
    return width, candidates[width]

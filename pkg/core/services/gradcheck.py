"""
Central finite-difference checks of every backward rule, at 64-bit.

Each check builds a scalar loss = sum(op(inputs) * R) with a fixed random R,
then compares the tape gradient of every input and parameter against
(L(x + h) - L(x - h)) / 2h on up to MAX_ENTRIES coordinates per tensor.

A coordinate whose estimate disagrees with the analytic value is re-measured
at h/2. If the two estimates disagree with each other the perturbation crossed
a kink (relu, hinge, abs) and the coordinate is skipped; otherwise it counts.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from django.core.exceptions import ValidationError

from core.services import nn
from core.services import tensor as T
from core.services.blocks import BlockConfig, DiscBlock, GeneratorBlock, ShortcutKind
from core.services.tensor import GradTape, Tensor

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
STEP = 1e-4
# gradients smaller than this (in norm) are zero up to roundoff
ABS_FLOOR = 1e-7
MAX_ENTRIES = 24
MODULES = ("tensor", "nn", "blocks", "model")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||); 0 when both norms sum below ABS_FLOOR."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    scale = np.linalg.norm(a) + np.linalg.norm(n)
    if scale < ABS_FLOOR:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


@dataclass
class CheckResult:
    name: str
    module: str
    max_rel_error: float
    tensors: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


@dataclass
class GradCheckReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    @property
    def worst(self) -> Optional[CheckResult]:
        return max(self.results, key=lambda r: r.max_rel_error, default=None)


def _central_difference(loss, flat: np.ndarray, idx: int, step: float) -> float:
    saved = flat[idx]
    flat[idx] = saved + step
    up = loss().item()
    flat[idx] = saved - step
    down = loss().item()
    flat[idx] = saved
    return (up - down) / (2 * step)


def check_function(name: str, module: str, fn: Callable[..., Tensor], inputs: list, params: list = (), seed: int = 0) -> CheckResult:
    """
    fn(*tensors) -> Tensor. inputs are numpy arrays made into leaf tensors;
    params are Parameters fn reads through closures.
    """
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        leaves = [Tensor(np.array(x, dtype=np.float64)) for x in inputs]
        projection = Tensor(rng.normal(size=fn(*leaves).shape))

        def loss():
            return T.reduce_sum(T.mul(fn(*leaves), projection))

        with GradTape() as tape:
            out = loss()
        grads = T.backward(tape, out)

        targets = [(leaf.data, grads[leaf]) for leaf in leaves]
        targets += [(p.value.data, grads[p.value]) for p in params]

        worst = 0.0
        skipped = 0
        for data, analytic in targets:
            flat = data.reshape(-1)
            picks = rng.choice(flat.size, size=min(MAX_ENTRIES, flat.size), replace=False)
            a = analytic.reshape(-1)[picks]
            numeric = np.array([_central_difference(loss, flat, idx, STEP) for idx in picks])
            keep = np.ones(len(picks), dtype=bool)
            if relative_error(a, numeric) > TOLERANCE:
                for j, idx in enumerate(picks):
                    if relative_error(a[j], numeric[j]) <= TOLERANCE:
                        continue
                    half = _central_difference(loss, flat, idx, STEP / 2)
                    if relative_error(numeric[j], half) > TOLERANCE:
                        keep[j] = False
                skipped += int((~keep).sum())
            worst = max(worst, relative_error(a[keep], numeric[keep]))

    result = CheckResult(name, module, worst, len(targets), skipped)
    logger.debug(
        "grad check op=%s module=%s max_rel_error=%.3e skipped=%s passed=%s",
        name, module, worst, skipped, result.passed,
    )
    return result


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return x + np.sign(x) * margin


# -------------------------
# Cases
# -------------------------

def tensor_cases(rng):
    a = rng.normal(size=(2, 3, 4, 4))
    b = rng.normal(size=(2, 3, 4, 4))
    yield "add", lambda x, y: T.add(x, y), [a, b]
    yield "sub", lambda x, y: T.sub(x, y), [a, b]
    yield "mul", lambda x, y: T.mul(x, y), [a, b]
    yield "matmul", T.matmul, [rng.normal(size=(3, 5)), rng.normal(size=(5, 4))]
    yield "conv2d.same3x3", lambda x, k, c: T.conv2d(x, k, c), [a, rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)]
    yield "conv2d.valid3x3", lambda x, k: T.conv2d(x, k, padding="valid"), [a, rng.normal(size=(2, 3, 3, 3))]
    yield "conv2d.1x1", lambda x, k: T.conv2d(x, k), [a, rng.normal(size=(5, 3, 1, 1))]
    yield "concat_channels", T.concat_channels, [a, rng.normal(size=(2, 2, 4, 4))]
    yield "upsample_nearest2x", T.upsample_nearest2x, [a]
    yield "avgpool2x", T.avgpool2x, [a]
    yield "global_sum_pool", T.global_sum_pool, [a]
    yield "relu", T.relu, [_away_from_zero(a)]
    yield "sigmoid", T.sigmoid, [a]
    yield "tanh", T.tanh, [a]
    yield "log", T.log, [np.abs(a) + 0.5]
    yield "reshape", lambda x: T.reshape(x, (2, 48)), [a]
    yield "bias_add", T.bias_add, [a, rng.normal(size=3)]
    yield "channel_affine", T.channel_affine, [a, rng.normal(size=3), rng.normal(size=3)]
    yield "channel_affine.per_sample", T.channel_affine, [a, rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]
    yield "standardize", T.standardize, [a]
    yield "take_rows", lambda t: T.take_rows(t, [2, 0, 2]), [rng.normal(size=(4, 5))]
    w = rng.normal(size=(4, 6))
    left, _, right = np.linalg.svd(w)
    yield "spectral_scale", lambda m: T.spectral_scale(m, left[:, 0].copy(), right[0].copy()), [w]
    yield "mean", lambda x: T.mean(T.mul(x, x)), [a]


def nn_cases(rng):
    init = nn.Initializer(3)

    dense = _warm(nn.Dense("dense", 5, 4, init, sn=True)).set_mode("batch")
    yield "dense.sn", lambda x: dense(x), [rng.normal(size=(3, 5))], dense.parameters()

    bn = nn.BatchNorm2d("bn", 3).set_mode("batch")
    bn.state.gamma.value.data[...] = rng.normal(size=3)
    yield "batch_norm", lambda x: bn(x), [rng.normal(size=(4, 3, 2, 2))], bn.parameters()

    cbn = nn.ConditionalBatchNorm2d("cbn", 3, 5, init).set_mode("batch")
    cbn.source.dense.weight.value.data[...] = rng.normal(size=(5, 6)) * 0.3
    yield "conditional_batch_norm", lambda x, c: cbn(x, c), [rng.normal(size=(4, 3, 2, 2)), rng.normal(size=(4, 5))], cbn.parameters()

    conv = _warm(nn.Conv2d("conv", 3, 2, 3, init, sn=True)).set_mode("batch")
    yield "spectral_normalize.conv", lambda x: conv(x), [rng.normal(size=(2, 3, 4, 4))], conv.parameters()

    emb = nn.Embedding("emb", 4, 3, init)
    yield "embed_label", lambda c: T.mul(emb([1, 3, 1]), c), [rng.normal(size=(3, 3))], emb.parameters()


def _warm(module: nn.Module, iterations: int = 30) -> nn.Module:
    """Converge every (u, v) estimate so sigma is well away from zero."""
    for m in module.modules():
        if isinstance(m, nn.SpectralNorm):
            nn.power_iterate(m.weight.value.data.reshape(m.weight.shape[0], -1), m.state, iterations)
    return module


def _block_inputs(rng, cfg: BlockConfig, cond_dim: int):
    return [rng.normal(size=(3, cfg.c_i, 2, 2)), rng.normal(size=(3, cond_dim))]


def _perturb(module: nn.Module, rng, scale: float = 0.3) -> None:
    """Move zero-initialized weights off zero so every path carries gradient."""
    for p in module.parameters():
        if not np.any(p.value.data):
            p.value.data[...] = rng.normal(size=p.shape) * scale


def block_cases(rng):
    init = nn.Initializer(5)
    for kind in ShortcutKind:
        cfg = BlockConfig.for_generator(3, 4, kind, conditional=True)
        block = GeneratorBlock(f"block.{kind.value}", cfg, init, cond_dim=3).set_mode("batch")
        _perturb(block, rng)
        yield f"block[{kind.value}]", lambda x, c, b=block: b(x, c), _block_inputs(rng, cfg, 3), block.parameters()

    for first, down in ((True, True), (False, True), (False, False)):
        block = _warm(DiscBlock(f"dblock.{first}.{down}", 3, 4, init, down=down, first=first, sn=True)).set_mode("batch")
        yield f"disc_block[first={first},down={down}]", lambda x, b=block: b(x), [rng.normal(size=(2, 3, 4, 4))], block.parameters()


def model_cases(rng):
    from core.services.model import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator

    for conditional in (False, True):
        g = build_generator(GeneratorSpec(resolution=8, z_dim=4, width=4, num_classes=3, embed_dim=2, conditional=conditional, seed=1))
        g.set_mode("batch")
        _perturb(g.module, rng)
        labels = [0, 2, 1] if conditional else None
        yield f"generator[conditional={conditional}]", lambda z, h=g, y=labels: h(z, y), [rng.normal(size=(3, 4))], g.parameters()

    d = build_discriminator(DiscriminatorSpec(resolution=8, width=4, projection=True, num_classes=3, seed=1))
    _warm(d.module).set_mode("batch")
    yield "discriminator[projection]", lambda x, h=d: h(x, [0, 1]), [rng.normal(size=(2, 3, 8, 8))], d.parameters()

    yield from hinge_cases(rng)


def hinge_cases(rng, sampled_params: int = 10):
    """Generator forward, discriminator and both hinge losses as one scalar, on sampled G parameters."""
    from core.services.model import DiscriminatorSpec, GeneratorSpec, build_discriminator, build_generator
    from core.services.train import hinge_loss

    g = build_generator(GeneratorSpec(resolution=8, z_dim=4, width=4, seed=2))
    g.set_mode("batch")
    _perturb(g.module, rng)
    d = build_discriminator(DiscriminatorSpec(resolution=8, width=4, seed=2))
    _warm(d.module).set_mode("batch")
    real = Tensor(np.tanh(rng.normal(size=(3, 3, 8, 8))))

    def objective(z, gen=g, disc=d):
        loss_d, loss_g = hinge_loss(disc(real), disc(gen(z)))
        return T.add(loss_d, loss_g)

    params = g.parameters()
    picks = rng.choice(len(params), size=min(sampled_params, len(params)), replace=False)
    yield "generator.hinge", objective, [rng.normal(size=(3, 4))], [params[i] for i in sorted(picks)]


CASES = {"tensor": tensor_cases, "nn": nn_cases, "blocks": block_cases, "model": model_cases}


def run_suite(module: str = "all", seed: int = 0) -> GradCheckReport:
    if module != "all" and module not in MODULES:
        raise ValidationError(
            "Unknown grad-check module %(m)s (choose from all, %(choices)s).",
            code="bad_value",
            params={"m": module, "choices": ", ".join(MODULES)},
        )
    report = GradCheckReport()
    selected = MODULES if module == "all" else (module,)
    with T.precision(np.float64):
        for name in selected:
            rng = np.random.default_rng(seed)
            for case in CASES[name](rng):
                label, fn, inputs = case[:3]
                params = case[3] if len(case) > 3 else ()
                report.results.append(check_function(label, name, fn, inputs, params, seed=seed))
    logger.info("grad check finished checks=%s failures=%s", len(report.results), len(report.failures))
    return report

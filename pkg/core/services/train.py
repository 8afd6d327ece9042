from __future__ import annotations

import csv
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Mapping, Optional, Sequence

import numpy as np
from django.core.exceptions import ValidationError

from core.services import tensor as T
from core.services.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from core.services.data import (
    PURPOSE_LATENT,
    PURPOSE_SAMPLE,
    BatchSampler,
    load_cifar10,
    sample_labels,
    sample_latent,
    stream,
    synth_dataset,
)
from core.services.tensor import GradTape, Parameter, Tensor

if TYPE_CHECKING:
    from core.services.model import ModelHandle
    from core.services.runconfig import RunConfig

logger = logging.getLogger(__name__)

METRICS_HEADER = ["iter", "loss_d", "loss_g", "lr_g", "lr_d", "fid", "is"]
EVAL_HEADER = ["iter", "fid", "is"]

PRESETS = {
    "cifar": {"lr_g": 2e-4, "lr_d": 2e-4, "n_dis": 5, "batch_d": 64, "batch_g": 128},
    "ttur": {"lr_g": 1e-4, "lr_d": 4e-4, "n_dis": 1, "batch_d": 32, "batch_g": 32},
}

# checkpoint config keys that must match to resume
ARCHITECTURE_KEYS = (
    "shortcut", "resolution", "z_dim", "g_width", "d_width", "conditional", "num_classes",
    "embed_dim", "noise_cbn", "shortcut_bn_conditional", "sn_on_g", "sn_on_d",
)


@dataclass(frozen=True)
class TrainConfig:
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    n_dis: int = 5
    batch_d: int = 64
    batch_g: int = 128
    total_g_iters: int = 100000
    decay_last_iters: int = 50000
    sn_on_g: bool = False
    sn_on_d: bool = True
    seed: int = 0
    loss: str = "hinge"

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ValidationError("Unknown preset %(p)s.", code="bad_value", params={"p": name})
        return cls(**{**PRESETS[name], **overrides})


# -------------------------
# Losses
# -------------------------

def gan_loss_standard(d_real: Optional[Tensor], d_fake: Tensor):
    """Cross-entropy GAN objective on sigmoid(logits); logs are floored at 1e-12."""
    loss_d = None
    if d_real is not None:
        real_term = T.mean(T.log(T.sigmoid(d_real)))
        fake_term = T.mean(T.log(T.one_minus(T.sigmoid(d_fake))))
        loss_d = T.scale(T.add(real_term, fake_term), -1.0)
    loss_g = T.scale(T.mean(T.log(T.sigmoid(d_fake))), -1.0)
    return loss_d, loss_g


def hinge_loss(d_real: Optional[Tensor], d_fake: Tensor):
    loss_d = None
    if d_real is not None:
        loss_d = T.add(T.mean(T.relu(T.one_minus(d_real))), T.mean(T.relu(T.add_scalar(d_fake, 1.0))))
    loss_g = T.scale(T.mean(d_fake), -1.0)
    return loss_d, loss_g


LOSSES = OrderedDict([("hinge", hinge_loss), ("standard", gan_loss_standard)])


# -------------------------
# Optimizer and schedule
# -------------------------

@dataclass
class AdamState:
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    t: int = 0
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Iterable[Parameter], beta1=0.0, beta2=0.9, eps=1e-8) -> "AdamState":
        state = cls(beta1=beta1, beta2=beta2, eps=eps)
        for p in params:
            state.m[p.name] = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        return state


def adam_step(params: Sequence[Parameter], grads: Optional[Mapping[str, np.ndarray]], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, in place. grads maps name -> gradient; None uses each p.grad."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad if grads is None else grads[p.name]
        if g.shape != p.shape:
            raise ValidationError(
                "Gradient for %(n)s has shape %(g)s, parameter %(p)s.",
                code="shape_mismatch",
                params={"n": p.name, "g": list(g.shape), "p": list(p.shape)},
            )
        if p.name not in state.m:
            state.m[p.name] = np.zeros_like(p.value.data)
            state.v[p.name] = np.zeros_like(p.value.data)
        m, v = state.m[p.name], state.v[p.name]
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        p.value.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.value.dtype)


def lr_at(iteration: int, total: int, decay_last: int, base_lr: float) -> float:
    """Constant, then linear to 0 over the last decay_last iterations."""
    if iteration < 0:
        raise ValidationError("Iteration must be >= 0, got %(i)s.", code="bad_value", params={"i": iteration})
    start = total - decay_last
    if decay_last <= 0 or iteration < start:
        return float(base_lr)
    return float(base_lr) * max(0.0, (total - iteration) / decay_last)


# -------------------------
# Training step
# -------------------------

@dataclass
class TrainState:
    adam_g: AdamState
    adam_d: AdamState
    g_iter: int = 0
    d_updates: int = 0
    g_updates: int = 0
    cursor: int = 0

    @classmethod
    def fresh(cls, g: "ModelHandle", d: "ModelHandle", cfg: TrainConfig) -> "TrainState":
        return cls(
            adam_g=AdamState.for_params(g.parameters(), cfg.beta1, cfg.beta2, cfg.eps),
            adam_d=AdamState.for_params(d.parameters(), cfg.beta1, cfg.beta2, cfg.eps),
        )

    def counters(self) -> "OrderedDict[str, str]":
        return OrderedDict(
            [
                ("state.g_iter", str(self.g_iter)),
                ("state.d_updates", str(self.d_updates)),
                ("state.g_updates", str(self.g_updates)),
                ("state.cursor", str(self.cursor)),
                ("state.adam_g_t", str(self.adam_g.t)),
                ("state.adam_d_t", str(self.adam_d.t)),
            ]
        )


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


@dataclass
class MetricsRecord:
    iter: int
    loss_d: float
    loss_g: float
    lr_g: float
    lr_d: float
    fid: Optional[float] = None
    is_score: Optional[float] = None

    def row(self) -> list[str]:
        return [str(self.iter), _fmt(self.loss_d), _fmt(self.loss_g), _fmt(self.lr_g), _fmt(self.lr_d), _fmt(self.fid), _fmt(self.is_score)]


def _fake_inputs(g: "ModelHandle", batch: int, seed: int, iteration: int, substep: int):
    spec = g.spec
    rng = stream(seed, PURPOSE_LATENT, iteration, substep)
    z = sample_latent(batch, spec.z_dim, rng)
    y = sample_labels(batch, spec.num_classes, rng) if spec.conditional else None
    return z, y


def train_step(g: "ModelHandle", d: "ModelHandle", sampler: BatchSampler, cfg: TrainConfig, state: TrainState) -> MetricsRecord:
    """
    n_dis discriminator updates, each on a fresh real batch and fresh latents,
    then one generator update. Latents come from the (seed, iteration, substep)
    stream and real batches from the sampler cursor.
    """
    it = state.g_iter
    lr_g = lr_at(it, cfg.total_g_iters, cfg.decay_last_iters, cfg.lr_g)
    lr_d = lr_at(it, cfg.total_g_iters, cfg.decay_last_iters, cfg.lr_d)
    loss_fn = LOSSES[cfg.loss]
    g.set_mode("train")
    d.set_mode("train")
    d_params = d.parameters()
    g_params = g.parameters()

    loss_d_value = float("nan")
    for k in range(cfg.n_dis):
        x_real, y_real = sampler.batch(state.cursor, cfg.batch_d)
        state.cursor += cfg.batch_d
        z, y_fake = _fake_inputs(g, cfg.batch_d, cfg.seed, it, k)
        with T.no_tape():
            fake = g(z, y_fake)
        with GradTape() as tape:
            loss_d, _ = loss_fn(d(Tensor(x_real), y_real), d(Tensor(fake.data), y_fake))
        T.backward(tape, loss_d, d_params)
        adam_step(d_params, None, state.adam_d, lr_d)
        state.d_updates += 1
        loss_d_value = loss_d.item()

    z, y_fake = _fake_inputs(g, cfg.batch_g, cfg.seed, it, cfg.n_dis)
    with GradTape() as tape:
        _, loss_g = loss_fn(None, d(g(z, y_fake), y_fake))
    T.backward(tape, loss_g, g_params)
    adam_step(g_params, None, state.adam_g, lr_g)
    state.g_updates += 1
    state.g_iter += 1

    loss_g_value = loss_g.item()
    if not (math.isfinite(loss_d_value) and math.isfinite(loss_g_value)):
        logger.error("non-finite loss iter=%s loss_d=%s loss_g=%s", state.g_iter, loss_d_value, loss_g_value)
    return MetricsRecord(state.g_iter, loss_d_value, loss_g_value, lr_g, lr_d)


# -------------------------
# Checkpoints of a training run
# -------------------------

def training_checkpoint(config_pairs: Mapping[str, str], g: "ModelHandle", d: "ModelHandle", state: TrainState) -> Checkpoint:
    config = OrderedDict(config_pairs)
    config.update(state.counters())
    tensors = OrderedDict()
    tensors.update(g.module.state_tensors())
    tensors.update(d.module.state_tensors())
    for prefix, adam in (("opt.g", state.adam_g), ("opt.d", state.adam_d)):
        for name in adam.m:
            tensors[f"{prefix}.m.{name}"] = adam.m[name]
        for name in adam.v:
            tensors[f"{prefix}.v.{name}"] = adam.v[name]
    return Checkpoint(config=config, tensors=tensors)


def _copy_into(target: np.ndarray, ckpt: Checkpoint, name: str) -> None:
    src = ckpt.tensor(name)
    if src.shape != target.shape:
        raise ValidationError(
            "Checkpoint tensor %(n)s has shape %(a)s, model expects %(b)s.",
            code="shape_mismatch",
            params={"n": name, "a": list(src.shape), "b": list(target.shape)},
        )
    np.copyto(target, src.astype(target.dtype, copy=False))


def restore_model(ckpt: Checkpoint, handle: "ModelHandle") -> None:
    for name, arr in handle.module.state_tensors().items():
        _copy_into(arr, ckpt, name)


def restore_training(ckpt: Checkpoint, g: "ModelHandle", d: "ModelHandle", state: TrainState) -> None:
    """Copy every tensor first, then the counters; a missing tensor leaves counters untouched."""
    restore_model(ckpt, g)
    restore_model(ckpt, d)
    for prefix, adam in (("opt.g", state.adam_g), ("opt.d", state.adam_d)):
        for name in adam.m:
            _copy_into(adam.m[name], ckpt, f"{prefix}.m.{name}")
            _copy_into(adam.v[name], ckpt, f"{prefix}.v.{name}")
    state.g_iter = int(ckpt.get("state.g_iter", 0))
    state.d_updates = int(ckpt.get("state.d_updates", 0))
    state.g_updates = int(ckpt.get("state.g_updates", 0))
    state.cursor = int(ckpt.get("state.cursor", 0))
    state.adam_g.t = int(ckpt.get("state.adam_g_t", 0))
    state.adam_d.t = int(ckpt.get("state.adam_d_t", 0))


def check_compatible(ckpt: Checkpoint, config_pairs: Mapping[str, str]) -> None:
    for key in ARCHITECTURE_KEYS:
        saved = ckpt.get(key)
        if saved is not None and saved != config_pairs.get(key):
            raise ValidationError(
                "Checkpoint was trained with %(k)s=%(a)s, config has %(b)s.",
                code="invalid_spec",
                params={"k": key, "a": saved, "b": config_pairs.get(key)},
            )


# -------------------------
# Full run
# -------------------------

def load_dataset(cfg: "RunConfig"):
    if cfg.dataset == "cifar10":
        dataset = load_cifar10(cfg.data_dir_path(), "train")
    else:
        dataset = synth_dataset(cfg.synth_kind, cfg.resolution, cfg.num_classes, cfg.synth_n, cfg.seed)
    if dataset.resolution != cfg.resolution:
        raise ValidationError(
            "Dataset %(name)s is %(a)sx%(a)s, config resolution is %(b)s.",
            code="resolution_mismatch",
            params={"name": dataset.name, "a": dataset.resolution, "b": cfg.resolution},
        )
    if cfg.conditional and dataset.num_classes != cfg.num_classes:
        raise ValidationError(
            "Dataset has %(a)s classes, config num_classes is %(b)s.",
            code="invalid_spec",
            params={"a": dataset.num_classes, "b": cfg.num_classes},
        )
    return dataset


@dataclass
class TrainingSummary:
    out_dir: Path
    iterations: int
    metrics_path: Path
    last_checkpoint: Optional[Path] = None
    fid: Optional[float] = None
    is_score: Optional[float] = None


def _due(iteration: int, every: int) -> bool:
    return bool(every) and iteration % every == 0


def _open_metrics(path: Path, header: list[str], keep_until: Optional[int]):
    """Start a fresh CSV, or keep rows up to keep_until when resuming into the same directory."""
    kept = []
    if keep_until is not None and path.exists():
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            kept = [row for row in reader if row and int(row[0]) <= keep_until]
    fh = open(path, "w", newline="", encoding="utf-8")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(kept)
    return fh, writer


def run_training(cfg: "RunConfig", out_dir, resume=None) -> TrainingSummary:
    from core.services.imaging import write_ppm_grid
    from core.services.metrics import build_extractor, evaluate
    from core.services.model import build_discriminator, build_generator

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_pairs = cfg.as_pairs()
    (out_dir / "config.txt").write_text(cfg.emit(), encoding="utf-8")

    with T.precision(cfg.dtype):
        tc = cfg.train_config()
        dataset = load_dataset(cfg)
        sampler = BatchSampler(dataset, cfg.seed)
        g = build_generator(cfg.generator_spec())
        d = build_discriminator(cfg.discriminator_spec())
        state = TrainState.fresh(g, d, tc)

        start = None
        if resume:
            ckpt = load_checkpoint(resume)
            check_compatible(ckpt, config_pairs)
            restore_training(ckpt, g, d, state)
            start = state.g_iter
            logger.info("resumed path=%s iter=%s", resume, start)

        extractor = real_features = None
        if cfg.eval_every:
            extractor = build_extractor(cfg.extractor, seed=cfg.seed, feature_dim=cfg.feature_dim, num_classes=cfg.num_classes, path=cfg.extractor_path or None)
            real_features = extractor.features(dataset.head(cfg.eval_samples))

        def run_eval():
            g.set_mode(cfg.sample_bn_mode)
            try:
                return evaluate(g, extractor, real_features, cfg.eval_samples, cfg.seed)
            finally:
                g.set_mode("train")

        metrics_path = out_dir / "metrics.csv"
        summary = TrainingSummary(out_dir, state.g_iter, metrics_path)
        metrics_fh, metrics = _open_metrics(metrics_path, METRICS_HEADER, start)
        eval_fh, evals = _open_metrics(out_dir / "eval.csv", EVAL_HEADER, start)
        try:
            if extractor is not None and state.g_iter == 0:
                result = run_eval()
                evals.writerow([0, _fmt(result.fid), _fmt(result.inception_score)])
                summary.fid, summary.is_score = result.fid, result.inception_score

            while state.g_iter < tc.total_g_iters:
                record = train_step(g, d, sampler, tc, state)
                it = record.iter
                if extractor is not None and _due(it, cfg.eval_every):
                    result = run_eval()
                    record.fid, record.is_score = result.fid, result.inception_score
                    evals.writerow([it, _fmt(result.fid), _fmt(result.inception_score)])
                    summary.fid, summary.is_score = result.fid, result.inception_score
                metrics.writerow(record.row())

                if _due(it, cfg.log_every) or it == tc.total_g_iters:
                    logger.info(
                        "train step iter=%s loss_d=%.6f loss_g=%.6f lr_g=%.3g lr_d=%.3g d_updates=%s",
                        it, record.loss_d, record.loss_g, record.lr_g, record.lr_d, state.d_updates,
                    )
                if _due(it, cfg.sample_every):
                    g.set_mode(cfg.sample_bn_mode)
                    images = g.sample(cfg.sample_grid ** 2, cfg.seed, purpose=PURPOSE_SAMPLE)
                    g.set_mode("train")
                    write_ppm_grid(images, cfg.sample_grid, out_dir / f"samples_{it}.ppm")
                if _due(it, cfg.checkpoint_every) or it == tc.total_g_iters:
                    path = out_dir / f"ckpt_{it}.bin"
                    save_checkpoint(path, training_checkpoint(config_pairs, g, d, state))
                    summary.last_checkpoint = path
        finally:
            metrics_fh.close()
            eval_fh.close()

    summary.iterations = state.g_iter
    return summary


# -------------------------
# Metrics files
# -------------------------

def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "iter" else (float(v) if v != "" else None)) for k, v in row.items()})
    return rows


@dataclass
class TrialSummary:
    runs: int
    fid_mean: Optional[float]
    fid_std: Optional[float]
    is_mean: Optional[float]
    is_std: Optional[float]
    finals: list = field(default_factory=list)  # (path, iter, fid, is) per run


def _mean_std(values: list[float]):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def summarize_trials(paths: Iterable) -> TrialSummary:
    """Mean and sample std of the last evaluated FID/IS across repeated runs."""
    finals = []
    for path in paths:
        evaluated = [r for r in read_metrics(path) if r["fid"] is not None]
        if evaluated:
            last = evaluated[-1]
            finals.append((str(path), last["iter"], last["fid"], last["is"]))
    fid_mean, fid_std = _mean_std([f[2] for f in finals])
    is_mean, is_std = _mean_std([f[3] for f in finals if f[3] is not None])
    return TrialSummary(len(finals), fid_mean, fid_std, is_mean, is_std, finals)


# -------------------------
# Shortcut comparison
# -------------------------

COMPARISON_HEADER = ["shortcut", "seed", "fid_start", "fid_end", "is_end", "improved"]


@dataclass
class ComparisonRow:
    shortcut: str
    seed: int
    fid_start: float
    fid_end: float
    is_end: Optional[float]

    @property
    def improved(self) -> bool:
        return self.fid_end < self.fid_start

    def row(self) -> list[str]:
        return [self.shortcut, str(self.seed), _fmt(self.fid_start), _fmt(self.fid_end), _fmt(self.is_end), str(int(self.improved))]


@dataclass
class ShortcutComparison:
    rows: list = field(default_factory=list)
    trials: "OrderedDict[str, TrialSummary]" = field(default_factory=OrderedDict)

    def final_fid(self, shortcut: str, seed: int) -> Optional[float]:
        for r in self.rows:
            if r.shortcut == shortcut and r.seed == seed:
                return r.fid_end
        return None

    def wins(self, shortcut: str, baseline: str) -> int:
        """Seeds where `shortcut` ends with an FID no worse than `baseline`."""
        count = 0
        for seed in sorted({r.seed for r in self.rows}):
            a, b = self.final_fid(shortcut, seed), self.final_fid(baseline, seed)
            if a is not None and b is not None and a <= b:
                count += 1
        return count


def _eval_endpoints(path: Path):
    evals = [r for r in read_metrics(path) if r["fid"] is not None]
    if len(evals) < 2:
        raise ValidationError(
            "Run at %(p)s has fewer than two evaluations", code="bad_value", params={"p": str(path)}
        )
    return evals[0], evals[-1]


def compare_shortcuts(cfg: "RunConfig", out_dir, shortcuts: Sequence[str] = ("gated", "identity"), seeds: Sequence[int] = (0, 1, 2)) -> ShortcutComparison:
    """Train every (shortcut, seed) pair from the same config and tabulate FID at start and end.

    Runs land in `<out_dir>/<shortcut>-seed<seed>`; the table goes to `<out_dir>/comparison.csv`.
    """
    if not cfg.eval_every:
        raise ValidationError("Comparison needs eval_every > 0", code="bad_value")
    if not shortcuts or not seeds:
        raise ValidationError("Comparison needs at least one shortcut and one seed", code="bad_value")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    comparison = ShortcutComparison()
    for shortcut in shortcuts:
        metric_paths = []
        for seed in seeds:
            run_dir = out_dir / f"{shortcut}-seed{seed}"
            run_training(cfg.updated({"shortcut": shortcut, "seed": seed}), run_dir)
            first, last = _eval_endpoints(run_dir / "eval.csv")
            comparison.rows.append(ComparisonRow(shortcut, int(seed), first["fid"], last["fid"], last["is"]))
            metric_paths.append(run_dir / "metrics.csv")
            logger.info("compare run shortcut=%s seed=%s fid_start=%.6f fid_end=%.6f", shortcut, seed, first["fid"], last["fid"])
        comparison.trials[shortcut] = summarize_trials(metric_paths)

    with open(out_dir / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(COMPARISON_HEADER)
        writer.writerows(r.row() for r in comparison.rows)
    return comparison

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from django.core.exceptions import ValidationError

from core.services import tensor as T
from core.services.tensor import Parameter, Tensor

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
SN_FLOOR = 1e-12

MODES = ("train", "eval", "batch")


# -------------------------
# Initialization
# -------------------------

@dataclass(frozen=True)
class Initializer:
    """
    Weight initializer keyed by (seed, parameter name): a parameter's initial
    value does not depend on which other parameters were built before it.
    """

    seed: int = 0
    scheme: str = "glorot"  # glorot | normal

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([int(self.seed), zlib.crc32(name.encode("utf-8"))])

    def weight(self, name: str, shape, fan_in: int, fan_out: int) -> np.ndarray:
        rng = self.rng(name)
        if self.scheme == "glorot":
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape)
        if self.scheme == "normal":
            return rng.normal(0.0, 0.02, size=shape)
        raise ValidationError("Unknown init scheme %(s)s.", code="bad_value", params={"s": self.scheme})

    def unit_vector(self, name: str, n: int) -> np.ndarray:
        v = self.rng(name).normal(size=n)
        return v / max(np.linalg.norm(v), SN_FLOOR)


# -------------------------
# Module tree
# -------------------------

class Module:
    """Named container of parameters, buffers (running stats, SN vectors) and children."""

    def __init__(self, name: str):
        self.name = name
        self.mode = "train"
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: list[Module] = []

    def path(self, local: str) -> str:
        return f"{self.name}.{local}" if self.name else local

    def add_parameter(self, local: str, value: np.ndarray) -> Parameter:
        p = Parameter(self.path(local), value)
        self._params[p.name] = p
        return p

    def add_buffer(self, local: str, value: np.ndarray) -> np.ndarray:
        arr = np.array(value, dtype=T.get_default_dtype())
        self._buffers[self.path(local)] = arr
        return arr

    def add_module(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children:
            yield from child.modules()

    def named_parameters(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for m in self.modules():
            for name, p in m._params.items():
                if name in out:
                    raise ValidationError("Duplicate parameter name %(n)s.", code="invalid_spec", params={"n": name})
                out[name] = p
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for m in self.modules():
            out.update(m._buffers)
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Everything a checkpoint must hold: parameter values, then buffers."""
        out = {name: p.value.data for name, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def set_mode(self, mode: str) -> "Module":
        if mode not in MODES:
            raise ValidationError("Unknown mode %(m)s.", code="bad_value", params={"m": mode})
        for m in self.modules():
            m.mode = mode
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


# -------------------------
# Spectral normalization
# -------------------------

@dataclass
class SpectralNormState:
    u: np.ndarray
    v: np.ndarray
    n_power_iterations: int = 1
    sigma: float = field(default=1.0)


def _normalized(x: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(x))
    if norm < SN_FLOOR:
        return fallback
    return x / norm


def power_iterate(w2d: np.ndarray, state: SpectralNormState, n_iter: int) -> None:
    u, v = state.u, state.v
    for _ in range(n_iter):
        v_new = _normalized(w2d.T @ u, v)
        u_new = _normalized(w2d @ v_new, u)
        u, v = u_new, v_new
    np.copyto(state.u, u)
    np.copyto(state.v, v)


def spectral_normalize(w: Tensor, state: SpectralNormState, n_iter: Optional[int] = None) -> Tensor:
    """Update (u, v) by power iteration, then return W / (u^T W v)."""
    iterations = state.n_power_iterations if n_iter is None else n_iter
    w2d = w.data.reshape(w.shape[0], -1)
    if iterations:
        power_iterate(w2d, state, iterations)
    out = T.spectral_scale(w, state.u, state.v, floor=SN_FLOOR)
    state.sigma = float(state.u @ w2d @ state.v)
    return out


class SpectralNorm(Module):
    """Holds the persistent u, v estimates for one weight; one power iteration per train forward."""

    def __init__(self, name: str, weight: Parameter, init: Initializer, n_power_iterations: int = 1):
        super().__init__(name)
        rows = weight.shape[0]
        cols = weight.size // rows
        self.weight = weight
        self.state = SpectralNormState(
            u=self.add_buffer("u", init.unit_vector(self.path("u"), rows)),
            v=self.add_buffer("v", init.unit_vector(self.path("v"), cols)),
            n_power_iterations=n_power_iterations,
        )

    def forward(self) -> Tensor:
        n_iter = self.state.n_power_iterations if self.mode == "train" else 0
        return spectral_normalize(self.weight.value, self.state, n_iter=n_iter)


# -------------------------
# Dense / conv / embedding
# -------------------------

def dense(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = T.matmul(x, w)
    return T.bias_add(out, bias) if bias is not None else out


class Dense(Module):
    def __init__(self, name, din, dout, init: Initializer, *, bias=True, sn=False, zero=False):
        super().__init__(name)
        self.din, self.dout = din, dout
        w = np.zeros((din, dout)) if zero else init.weight(self.path("weight"), (din, dout), din, dout)
        self.weight = self.add_parameter("weight", w)
        self.bias = self.add_parameter("bias", np.zeros(dout)) if bias else None
        self.sn = self.add_module(SpectralNorm(self.path("sn"), self.weight, init)) if sn else None

    def effective_weight(self) -> Tensor:
        return self.sn() if self.sn is not None else self.weight.value

    def forward(self, x: Tensor) -> Tensor:
        return dense(x, self.effective_weight(), self.bias.value if self.bias else None)


class Conv2d(Module):
    def __init__(self, name, c_in, c_out, k, init: Initializer, *, bias=True, sn=False, zero=False):
        super().__init__(name)
        self.c_in, self.c_out, self.k = c_in, c_out, k
        shape = (c_out, c_in, k, k)
        w = np.zeros(shape) if zero else init.weight(self.path("kernel"), shape, c_in * k * k, c_out * k * k)
        self.kernel = self.add_parameter("kernel", w)
        self.bias = self.add_parameter("bias", np.zeros(c_out)) if bias else None
        self.sn = self.add_module(SpectralNorm(self.path("sn"), self.kernel, init)) if sn else None

    def effective_kernel(self) -> Tensor:
        return self.sn() if self.sn is not None else self.kernel.value

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.effective_kernel(), self.bias.value if self.bias else None, padding="same")


def embed_label(y, table: Tensor) -> Tensor:
    """Row lookup; y may be a single class id (-> [d]) or a batch of ids (-> [b, d])."""
    if np.ndim(y) == 0:
        return T.reshape(T.take_rows(table, [int(y)]), (table.shape[1],))
    return T.take_rows(table, y)


class Embedding(Module):
    def __init__(self, name, num_classes, dim, init: Initializer, *, sn=False, zero=False):
        super().__init__(name)
        shape = (num_classes, dim)
        w = np.zeros(shape) if zero else init.weight(self.path("table"), shape, num_classes, dim)
        self.table = self.add_parameter("table", w)
        self.sn = self.add_module(SpectralNorm(self.path("sn"), self.table, init)) if sn else None

    def forward(self, y) -> Tensor:
        table = self.sn() if self.sn is not None else self.table.value
        return embed_label(y, table)


# -------------------------
# Batch normalization
# -------------------------

@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    gamma: Optional[Parameter] = None
    beta: Optional[Parameter] = None
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    mode: str = "train"


def _standardize(x: Tensor, state: BatchNormState) -> Tensor:
    if state.mode == "eval":
        return T.standardize(x, state.eps, mean=state.running_mean, var=state.running_var)

    axes = tuple(i for i in range(x.ndim) if i != 1)
    n = x.size // x.shape[1]
    if n < 2:
        raise ValidationError(
            "Batch statistics need at least two values per channel, got shape %(shape)s.",
            code="singular_batch",
            params={"shape": list(x.shape)},
        )
    if state.mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes) * (n / (n - 1))
        m = state.momentum
        state.running_mean[...] = (1.0 - m) * state.running_mean + m * mu
        state.running_var[...] = (1.0 - m) * state.running_var + m * var
    return T.standardize(x, state.eps)


def batch_norm(x: Tensor, state: BatchNormState) -> Tensor:
    xhat = _standardize(x, state)
    if state.gamma is None:
        return xhat
    return T.channel_affine(xhat, state.gamma.value, state.beta.value)


class BatchNorm2d(Module):
    """Plain BN over [b, c, h, w] or [b, c]; affine=False gives pure standardization."""

    def __init__(self, name, channels, *, affine=True):
        super().__init__(name)
        self.channels = channels
        self.state = BatchNormState(
            running_mean=self.add_buffer("running_mean", np.zeros(channels)),
            running_var=self.add_buffer("running_var", np.ones(channels)),
            gamma=self.add_parameter("gamma", np.ones(channels)) if affine else None,
            beta=self.add_parameter("beta", np.zeros(channels)) if affine else None,
        )

    def forward(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        self.state.mode = self.mode
        return batch_norm(x, self.state)


class ConditionalAffineSource(Module):
    """cond [b, d] -> per-sample (gamma, beta) [b, c] each; gamma = 1 + delta."""

    def __init__(self, name, cond_dim, channels, init: Initializer):
        super().__init__(name)
        self.channels = channels
        self.dense = self.add_module(Dense(self.path("dense"), cond_dim, 2 * channels, init, zero=True))

    def forward(self, cond: Tensor) -> tuple[Tensor, Tensor]:
        out = self.dense(cond)
        delta, beta = T.split_channels(out, (self.channels, self.channels))
        return T.add_scalar(delta, 1.0), beta


def conditional_batch_norm(x: Tensor, cond: Tensor, source: ConditionalAffineSource, state: BatchNormState) -> Tensor:
    if cond.ndim != 2 or cond.shape[0] != x.shape[0]:
        raise ValidationError(
            "Conditioning batch %(cond)s does not match input %(x)s.",
            code="shape_mismatch",
            params={"cond": list(cond.shape), "x": list(x.shape)},
        )
    xhat = _standardize(x, state)
    gamma, beta = source(cond)
    return T.channel_affine(xhat, gamma, beta)


class ConditionalBatchNorm2d(Module):
    def __init__(self, name, channels, cond_dim, init: Initializer):
        super().__init__(name)
        self.channels = channels
        self.state = BatchNormState(
            running_mean=self.add_buffer("running_mean", np.zeros(channels)),
            running_var=self.add_buffer("running_var", np.ones(channels)),
        )
        self.source = self.add_module(ConditionalAffineSource(self.path("affine"), cond_dim, channels, init))

    def forward(self, x: Tensor, cond: Optional[Tensor] = None) -> Tensor:
        if cond is None:
            raise ValidationError("Conditional BN %(n)s needs a conditioning vector.", code="invalid_spec", params={"n": self.name})
        self.state.mode = self.mode
        return conditional_batch_norm(x, cond, self.source, self.state)

"""Layer modules: parameter containers around the fused kernels."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .autograd import Tensor, gelu
from .errors import ConfigError, ShapeError


class Parameter(Tensor):
    """A leaf tensor that an optimizer updates."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module tree: parameters, buffers, train/eval flag."""

    training = True
    _buffer_names: tuple[str, ...] = ()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in vars(self).items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for name, child in self._children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(own) | set(buffers)) - set(state)
        unexpected = set(state) - (set(own) | set(buffers))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
        for name, buf in buffers.items():
            buf[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place."""
        for m in self.modules():
            for name, val in vars(m).items():
                if isinstance(val, Parameter):
                    val.data = val.data.astype(dtype)
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # PyTorch's default layer init: kaiming_uniform with a=sqrt(5) -> bound 1/sqrt(fan_in)
    gain = math.sqrt(2.0 / (1.0 + 5.0))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, dtype=np.float32):
        self.weight = Parameter(kaiming_uniform(rng, (d_in, d_out), d_in, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class Conv1d(Module):
    """Stride-1, length-preserving dilated 1-D convolution on (batch, L, C)."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int,
                 rng: np.random.Generator, dtype=np.float32):
        if kernel_size < 1 or dilation < 1:
            raise ConfigError("kernel_size and dilation must be positive")
        self.in_channels = c_in
        self.out_channels = c_out
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.weight = Parameter(kaiming_uniform(rng, (c_out, c_in, kernel_size), c_in * kernel_size, dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv1d(x, self.weight, self.bias, self.dilation)


class BatchNorm(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.momentum = momentum
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype=dtype))
        self.bias = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(x, self.weight, self.bias, self.running_mean, self.running_var,
                            self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.weight = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Dropout(Module):
    def __init__(self, p: float, rng: np.random.Generator | None = None):
        F.dropout(Tensor(np.zeros(1)), p, False, None)  # validates p
        self.p = p
        self.rng = rng

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.training, self.rng)


@dataclass
class AttentionConfig:
    d_model: int = 96
    num_heads: int = 4
    diag_mask: bool = True

    def __post_init__(self):
        if self.d_model < 1 or self.num_heads < 1 or self.d_model % self.num_heads:
            raise ConfigError(f"num_heads={self.num_heads} must divide d_model={self.d_model}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


class MultiHeadAttention(Module):
    """Multi-head self-attention; ``diag_mask`` gives the diagonally masked variant.

    When ``keep_attention`` is set, the weights of the latest call are kept in
    ``last_attention`` with shape (batch, heads, w, w).
    """

    keep_attention = False

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d_model
        self.q_proj = Linear(d, d, rng, dtype=dtype)
        self.k_proj = Linear(d, d, rng, dtype=dtype)
        self.v_proj = Linear(d, d, rng, dtype=dtype)
        self.out_proj = Linear(d, d, rng, dtype=dtype)
        self.last_attention: np.ndarray | None = None

    def _heads(self, x: Tensor) -> Tensor:
        b, w, _ = x.shape
        return x.reshape(b, w, self.cfg.num_heads, self.cfg.d_k).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor) -> tuple[Tensor, np.ndarray]:
        if x.ndim != 3 or x.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"attention expects (batch, w, {self.cfg.d_model}), got {x.shape}")
        b, w, d = x.shape
        q = self._heads(self.q_proj(x))
        k = self._heads(self.k_proj(x))
        v = self._heads(self.v_proj(x))
        ctx, attn = F.attention(q, k, v, self.cfg.diag_mask)
        merged = ctx.transpose(0, 2, 1, 3).reshape(b, w, d)
        if self.keep_attention:
            self.last_attention = attn
        return self.out_proj(merged), attn


class PFFN(Module):
    """Position-wise feed-forward network, ``GeLU(x W1 + b1) W2 + b2``."""

    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator, dtype=np.float32):
        self.fc1 = Linear(d_model, d_ff, rng, dtype=dtype)
        self.fc2 = Linear(d_ff, d_model, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))

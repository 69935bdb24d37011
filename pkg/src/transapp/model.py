"""The TransApp encoder, its two task heads, and the checkpoint file format."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import functional as F
from .autograd import Tensor, as_tensor, gelu
from .errors import CheckpointError, ConfigError
from .nn import (PFFN, AttentionConfig, BatchNorm, Conv1d, Dropout, LayerNorm, Linear, Module,
                 MultiHeadAttention, Parameter)

POSITIONAL_ENCODINGS = ("none", "fixed_sinusoidal", "learnable")


@dataclass
class TransAppConfig:
    in_channels: int = 5
    d_model: int = 96
    n_resunits: int = 4
    kernel_size: int = 3
    n_layers: int = 3
    n_heads: int = 4
    d_ff: int | None = None
    dropout: float = 0.2
    positional_encoding: str = "none"
    diag_mask: bool = True
    max_len: int = 4096

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        if self.in_channels < 1 or self.d_model < 1 or self.kernel_size < 1:
            raise ConfigError("in_channels, d_model and kernel_size must be positive")
        if self.n_resunits != 4:
            raise ConfigError(f"the embedding block has exactly 4 ResUnits, got n_resunits={self.n_resunits}")
        # n_layers == 0 is accepted for tests of the embedding path
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.positional_encoding not in POSITIONAL_ENCODINGS:
            raise ConfigError(f"positional_encoding must be one of {POSITIONAL_ENCODINGS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TransAppConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def sinusoidal_encoding(length: int, d_model: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)[:, : d_model // 2]
    return pe


class ResUnit(Module):
    """conv (dilated) -> GeLU -> BatchNorm, plus a residual branch."""

    def __init__(self, c_in, c_out, kernel_size, dilation, rng, dtype):
        self.conv = Conv1d(c_in, c_out, kernel_size, dilation, rng, dtype)
        self.norm = BatchNorm(c_out, dtype=dtype)
        # channel counts differ only in the first unit
        self.shortcut = Conv1d(c_in, c_out, 1, 1, rng, dtype) if c_in != c_out else None

    def forward(self, x: Tensor) -> Tensor:
        res = x if self.shortcut is None else self.shortcut(x)
        return self.norm(gelu(self.conv(x))) + res


class TransformerLayer(Module):
    """Pre-LN block: ``u = x + drop(attn(LN(x)))``, ``y = u + drop(pffn(LN(u)))``."""

    def __init__(self, cfg: TransAppConfig, rng, dtype):
        self.norm1 = LayerNorm(cfg.d_model, dtype=dtype)
        self.attn = MultiHeadAttention(AttentionConfig(cfg.d_model, cfg.n_heads, cfg.diag_mask), rng, dtype)
        self.drop1 = Dropout(cfg.dropout)
        self.norm2 = LayerNorm(cfg.d_model, dtype=dtype)
        self.ffn = PFFN(cfg.d_model, cfg.d_ff, rng, dtype)
        self.drop2 = Dropout(cfg.dropout)

    def forward(self, x: Tensor) -> Tensor:
        a, _ = self.attn(self.norm1(x))
        u = x + self.drop1(a)
        return u + self.drop2(self.ffn(self.norm2(u)))


class TransAppModel(Module):
    """Convolutional embedding, N transformer layers, reconstruction and classification heads.

    ``meta`` carries free-form run information (input scaling, tuned alpha, ...)
    and travels with checkpoints.
    """

    def __init__(self, config: TransAppConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = config or TransAppConfig()
        cfg.validate()
        self.config = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.rng = np.random.default_rng(rng.integers(2**63))
        d = cfg.d_model
        self.resunits = [
            ResUnit(cfg.in_channels if i == 0 else d, d, cfg.kernel_size, 2 ** (i + 1), rng, dtype)
            for i in range(cfg.n_resunits)
        ]
        self.pos_embedding = None
        if cfg.positional_encoding == "learnable":
            self.pos_embedding = Parameter(rng.uniform(-0.02, 0.02, (cfg.max_len, d)).astype(dtype))
        self.layers = [TransformerLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.recon_head = Linear(d, 1, rng, dtype=dtype)
        self.class_head = Linear(d, 2, rng, dtype=dtype)
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = self.rng
        self.meta: dict = {}

    def reseed(self, seed: int) -> None:
        """Reset the generator that drives dropout."""
        self.rng = np.random.default_rng(seed)
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = self.rng

    def astype(self, dtype) -> "TransAppModel":
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def _input(self, x) -> Tensor:
        x = as_tensor(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype)) if not x.requires_grad else x
        if x.ndim != 3 or x.shape[-1] != self.config.in_channels:
            raise ConfigError(f"expected input (batch, w, {self.config.in_channels}), got {x.shape}")
        return x

    def embed(self, x) -> Tensor:
        h = self._input(x)
        for unit in self.resunits:
            h = unit(h)
        return h

    def positional(self, h: Tensor) -> Tensor:
        kind = self.config.positional_encoding
        w = h.shape[1]
        if kind == "fixed_sinusoidal":
            return h + sinusoidal_encoding(w, self.config.d_model).astype(self.dtype)
        if kind == "learnable":
            if w > self.config.max_len:
                raise ConfigError(f"window {w} exceeds learnable positional table length {self.config.max_len}")
            return h + _rows(self.pos_embedding, w)
        return h

    def encode(self, x) -> Tensor:
        h = self.positional(self.embed(x))
        for layer in self.layers:
            h = layer(h)
        return h

    def forward_reconstruction(self, x) -> Tensor:
        return self.recon_head(self.encode(x))

    def forward_classification(self, x) -> Tensor:
        return self.class_head(F.global_avg_pool(self.encode(x)))

    def forward(self, x) -> Tensor:
        return self.forward_classification(x)

    def attention_modules(self) -> list[MultiHeadAttention]:
        return [layer.attn for layer in self.layers]


def _rows(table: Tensor, n: int) -> Tensor:
    """First ``n`` rows of a (max_len, d) parameter, differentiable."""
    full = table.shape[0]

    def bw(g):
        out = np.zeros((full, table.shape[1]), dtype=g.dtype)
        out[:n] = g
        return (out,)

    return Tensor._from_op(table.data[:n], (table,), bw, "rows")


# -- checkpoints -------------------------------------------------------------

MAGIC = b"TAPPCKPT"
FORMAT_VERSION = 1


def save_checkpoint(model: TransAppModel, path) -> Path:
    """Write config, meta and float32 tensors (parameters and BN statistics)."""
    path = Path(path)
    state = model.state_dict()
    manifest, blobs, offset = [], [], 0
    for name, arr in state.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(data.shape), "dtype": "<f4",
                         "offset": offset, "nbytes": data.nbytes})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "meta": model.meta,
        "tensors": manifest,
    }).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def read_checkpoint_header(path) -> tuple[dict, bytes]:
    if not Path(path).is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    return header, raw[16 + n:]


def load_checkpoint(path, expected_config: TransAppConfig | None = None) -> TransAppModel:
    header, payload = read_checkpoint_header(path)
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this reader supports {FORMAT_VERSION}")
    config = TransAppConfig.from_dict(header["config"])
    if expected_config is not None and expected_config.to_dict() != config.to_dict():
        raise CheckpointError(
            f"{path}: config mismatch, checkpoint has {config.to_dict()} but {expected_config.to_dict()} was expected")
    model = TransAppModel(config, dtype=np.float32)
    state = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        state[entry["name"]] = np.frombuffer(payload, dtype=entry["dtype"], count=nbytes // 4,
                                             offset=start).reshape(entry["shape"])
    try:
        model.load_state_dict(state)
    except (ConfigError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    model.meta = header.get("meta", {})
    return model

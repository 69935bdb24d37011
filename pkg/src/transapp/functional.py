"""Fused layer kernels with hand-written backward passes.

These are the hot paths of the model. Each is a single graph node, which keeps
the number of saved intermediates (and memory) low at w=1024.
"""
from __future__ import annotations

import math

import numpy as np

from .autograd import Tensor, as_tensor, _stable_softmax
from .errors import DegenerateBatchError, MaskedRowError, ParameterError, ShapeError


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; ``weight`` is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, parents, bw, "linear")


def conv_padding(kernel_size: int, dilation: int) -> tuple[int, int]:
    """Zero padding (left, right) that keeps length at stride 1; odd extra goes right."""
    total = (kernel_size - 1) * dilation
    return total // 2, total - total // 2


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None, dilation: int = 1) -> Tensor:
    """Length-preserving dilated convolution.

    x is (batch, L, C_in), weight is (C_out, C_in, K). Computes
    ``y[b,t,o] = bias[o] + sum_{c,k} w[o,c,k] * xpad[b, t + k*dilation, c]``.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (batch, L, C), got {x.shape}")
    c_out, c_in, k = weight.shape
    if x.shape[2] != c_in:
        raise ShapeError(f"conv1d: input has {x.shape[2]} channels, weight expects {c_in}")
    b, length, _ = x.shape
    left, right = conv_padding(k, dilation)
    xp = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    # cols[b, t, k, c] = xp[b, t + k*d, c]
    cols = np.stack([xp[:, j * dilation: j * dilation + length] for j in range(k)], axis=2)
    cols = cols.reshape(b * length, k * c_in)
    wmat = weight.data.transpose(2, 1, 0).reshape(k * c_in, c_out)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(b, length, c_out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(b * length, c_out)
        gx = gw = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(b, length, k, c_in)
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j * dilation: j * dilation + length] += gcols[:, :, j]
            gx = gxp[:, left: left + length]
        if weight.requires_grad:
            gw = (cols.T @ g2).reshape(k, c_in, c_out).transpose(2, 1, 0)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, parents, bw, "conv1d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    In training mode the running statistics are updated in place
    (unbiased variance, like most frameworks).
    """
    axes = tuple(range(x.ndim - 1))
    n = x.size // x.shape[-1]
    if training:
        if n < 2:
            raise DegenerateBatchError("batch_norm: need at least 2 values per channel in train mode")
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = np.mean(centered * centered, axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        centered = x.data - running_mean
        var = running_var
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gg = np.sum(g * xhat, axis=axes) if gamma.requires_grad else None
        gb = np.sum(g, axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data
            if training:
                gx = rstd * (gxhat - gxhat.mean(axis=axes) - xhat * np.mean(gxhat * xhat, axis=axes))
            else:
                gx = gxhat * rstd
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), bw, "batch_norm")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True)
            )
        gg = np.sum(g * xhat, axis=lead) if gain.requires_grad else None
        gb = np.sum(g, axis=lead) if bias.requires_grad else None
        return gx, gg, gb

    return Tensor._from_op(out, (x, gain, bias), bw, "layer_norm")


def attention(q: Tensor, k: Tensor, v: Tensor, diag_mask: bool = True) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention on (..., w, d_k) inputs.

    With ``diag_mask`` the score of every position with itself is set to -inf
    before the softmax, so the returned weights have an exactly-zero diagonal.
    Returns the attended values and the attention weights.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} must match")
    w, dk = q.shape[-2:]
    if diag_mask and w < 2:
        raise MaskedRowError("diagonal masking needs at least 2 positions; w=1 masks the whole row")
    lead = q.shape[:-2]
    scale = 1.0 / math.sqrt(dk)
    qf = q.data.reshape(-1, w, dk)
    kf = k.data.reshape(-1, w, dk)
    vf = v.data.reshape(-1, w, dk)
    probs = np.empty((qf.shape[0], w, w), dtype=np.result_type(qf, kf))
    out = np.empty(qf.shape, dtype=np.result_type(probs, vf))
    diag = np.arange(w)
    # one (w, w) block at a time keeps the score matrix cache-resident
    for i in range(qf.shape[0]):
        s = probs[i]
        np.matmul(qf[i], kf[i].T, out=s)
        s *= scale
        if diag_mask:
            s[diag, diag] = -np.inf
        _stable_softmax(s, axis=-1, out=s)
        np.matmul(s, vf[i], out=out[i])

    def bw(g):
        gf = g.reshape(-1, w, dk)
        gq = np.empty_like(qf) if q.requires_grad else None
        gk = np.empty_like(kf) if k.requires_grad else None
        gv = np.empty_like(vf) if v.requires_grad else None
        gs = np.empty((w, w), dtype=probs.dtype)
        for i in range(gf.shape[0]):
            p = probs[i]
            if gv is not None:
                np.matmul(p.T, gf[i], out=gv[i])
            np.matmul(gf[i], vf[i].T, out=gs)
            gs -= np.einsum("ij,ij->i", gs, p)[:, None]
            gs *= p
            gs *= scale
            if gq is not None:
                np.matmul(gs, kf[i], out=gq[i])
            if gk is not None:
                np.matmul(gs.T, qf[i], out=gk[i])
        return tuple(None if a is None else a.reshape(*lead, w, dk) for a in (gq, gk, gv))

    return Tensor._from_op(out.reshape(*lead, w, dk), (q, k, v), bw, "attention"), probs.reshape(*lead, w, w)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) in training mode."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    keep *= 1.0 / (1.0 - p)
    return Tensor._from_op(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of (batch, classes) logits against int labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / labels.shape[0]),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the time axis of a (batch, w, d) tensor."""
    return as_tensor(x).mean(axis=1)

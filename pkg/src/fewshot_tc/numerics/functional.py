"""Composite differentiable ops built from the primitives in ``tensor``.

Because everything here is a composition of recorded primitives, each op
supports double backward for free.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import ContractViolation
from .tensor import (Tensor, add, as_tensor, exp, gather, log, matmul, mul,
                     neg, pad, power, relu, reshape, scale, sigmoid, sub,
                     sum_, transpose, getitem, concat)

__all__ = [
    "softmax", "log_softmax", "cross_entropy", "soft_cross_entropy", "kl_div",
    "mse", "l2_normalize", "sq_euclidean", "cosine_similarity", "linear",
    "conv2d", "batch_norm", "relu", "sigmoid", "exp", "log", "concat",
]


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    # the shift is a constant; it cancels exactly in value and derivative
    shift = x.data.max(axis=axis, keepdims=True)
    shifted = sub(x, shift)
    lse = log(sum_(exp(shifted), axis=axis, keepdims=True))
    return sub(shifted, lse)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractViolation(
            f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractViolation("cross_entropy: label out of range")
    lp = log_softmax(logits, axis=1)
    picked = getitem(lp, (np.arange(len(labels)), labels))
    return neg(sum_(picked)) * (1.0 / len(labels))


def soft_cross_entropy(logits: Tensor, target_probs) -> Tensor:
    """Mean over rows of -sum_k p_k log q_k with q = softmax(logits)."""
    target_probs = as_tensor(target_probs)
    lp = log_softmax(logits, axis=1)
    return neg(sum_(mul(target_probs, lp))) * (1.0 / logits.shape[0])


def kl_div(target_logits, logits: Tensor, temperature: float = 1.0) -> Tensor:
    """Batch-mean KL(softmax(target/T) || softmax(logits/T)); target is constant."""
    t = np.asarray(target_logits.data if isinstance(target_logits, Tensor)
                   else target_logits, dtype=np.float64) / temperature
    t = t - t.max(axis=1, keepdims=True)
    logp = t - np.log(np.exp(t).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    logq = log_softmax(scale(logits, 1.0 / temperature), axis=1)
    per_row = sum_(mul(p, sub(logp, logq)), axis=1)
    return sum_(per_row) * (1.0 / logits.shape[0])


def mse(pred: Tensor, target) -> Tensor:
    diff = sub(pred, target)
    return sum_(mul(diff, diff)) * (1.0 / diff.size)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Unit-normalize along ``axis``; an all-zero vector maps to itself."""
    x = as_tensor(x)
    # normalize(x / m) == normalize(x) for any m > 0, value and gradient alike;
    # dividing by the largest entry keeps the squares clear of under/overflow
    m = np.max(np.abs(x.data), axis=axis, keepdims=True)
    x = x / Tensor(np.where(m > 0, m, 1.0))
    sq = sum_(mul(x, x), axis=axis, keepdims=True)
    guard = (sq.data == 0.0).astype(np.float64)
    return x / power(add(sq, guard), 0.5)


def sq_euclidean(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise squared distances between rows of ``a`` (n,d) and ``b`` (m,d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(f"sq_euclidean: {a.shape} vs {b.shape}")
    aa = sum_(mul(a, a), axis=1, keepdims=True)
    bb = reshape(sum_(mul(b, b), axis=1), (1, b.shape[0]))
    return sub(add(aa, bb), scale(matmul(a, transpose(b)), 2.0))


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` and ``b``."""
    return matmul(l2_normalize(a, 1), transpose(l2_normalize(b, 1)))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


@lru_cache(maxsize=64)
def _unfold_index(shape: tuple, kh: int, kw: int) -> np.ndarray:
    """Flat indices turning a padded (B,C,H',W') block into (B, H*W, C*kh*kw)."""
    b, c, hp, wp = shape
    h, w = hp - kh + 1, wp - kw + 1
    base = np.arange(b * c * hp * wp).reshape(b, c, hp, wp)
    di, dj = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    oi, oj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    rows = oi.reshape(-1, 1) + di.reshape(1, -1)          # (H*W, kh*kw)
    cols = oj.reshape(-1, 1) + dj.reshape(1, -1)
    idx = base[:, :, rows, cols]                          # (B, C, H*W, kh*kw)
    idx = idx.transpose(0, 2, 1, 3).reshape(b, h * w, c * kh * kw)
    idx.setflags(write=False)
    return idx


def same_padding(kh: int, kw: int) -> tuple:
    """Zero padding that keeps the spatial shape for stride 1 (extra pad at the end)."""
    return ((kh - 1) // 2, kh - 1 - (kh - 1) // 2), ((kw - 1) // 2, kw - 1 - (kw - 1) // 2)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           padding: tuple = ((0, 0), (0, 0))) -> Tensor:
    """Stride-1 2-D convolution, (B,Cin,H,W) * (Cout,Cin,kh,kw) -> (B,Cout,H',W')."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ContractViolation(f"conv2d: input {x.shape} vs weight {weight.shape}")
    cout, cin, kh, kw = weight.shape
    (pt, pb), (pl, pr) = padding
    xp = pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else x
    bsz, _, hp, wp = xp.shape
    h, w = hp - kh + 1, wp - kw + 1
    if h < 1 or w < 1:
        raise ContractViolation(f"conv2d: kernel {kh}x{kw} larger than padded input")
    k = cin * kh * kw
    cols = gather(xp, _unfold_index(xp.shape, kh, kw))          # (B, H*W, Cin*kh*kw)
    # one flat 2-D product keeps the weight gradient a single GEMM
    cols = reshape(cols, (bsz * h * w, k))
    out = matmul(cols, transpose(reshape(weight, (cout, k))))   # (B*H*W, Cout)
    if bias is not None:
        out = add(out, bias)
    return reshape(transpose(reshape(out, (bsz, h * w, cout)), (0, 2, 1)), (bsz, cout, h, w))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray | None,
               running_var: np.ndarray | None, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalization over all axes but the channel axis (1).

    In training mode the batch statistics are used and the running buffers
    (numpy arrays, updated in place, unbiased variance) are refreshed.
    """
    x = as_tensor(x)
    if x.ndim not in (2, 4):
        raise ContractViolation(f"batch_norm expects 2-D or 4-D input, got {x.shape}")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    pshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    g = reshape(gamma, pshape)
    b = reshape(beta, pshape)
    if training:
        n = int(np.prod([x.shape[a] for a in axes]))
        if n < 2:
            raise ContractViolation("batch_norm in training mode needs more than one value per channel")
        mu = sum_(x, axis=axes, keepdims=True) * (1.0 / n)
        centered = sub(x, mu)
        var = sum_(mul(centered, centered), axis=axes, keepdims=True) * (1.0 / n)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu.data.reshape(-1)
            running_var *= 1.0 - momentum
            running_var += momentum * var.data.reshape(-1) * n / (n - 1)
        xhat = mul(centered, power(add(var, eps), -0.5))
    else:
        if running_mean is None:
            raise ContractViolation("batch_norm eval mode needs running statistics")
        mu = running_mean.reshape(pshape)
        inv = 1.0 / np.sqrt(running_var.reshape(pshape) + eps)
        xhat = mul(sub(x, mu), inv)
    return add(mul(xhat, g), b)

"""Numpy building blocks with hand-written backward passes.

Every ``*_forward`` returns its output together with whatever the matching
``*_backward`` needs. Shapes follow the ``[..., features]`` convention so the
same code serves the spatial encoder (batch x time folded together) and the
temporal encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an activation or logit stops being finite."""


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")
    return x


@dataclass
class LinearParams:
    weight: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)


@dataclass
class MultiHeadAttentionParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    out: LinearParams
    heads: int

    @property
    def dim(self) -> int:
        return self.q.weight.shape[0]

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


# --------------------------------------------------------------------------
# linear


def linear_forward(x: np.ndarray, p: LinearParams) -> np.ndarray:
    if x.shape[-1] != p.weight.shape[0]:
        raise ValueError(
            f"shape mismatch: input last dim {x.shape[-1]} vs weight {p.weight.shape}"
        )
    return x @ p.weight + p.bias


def linear_backward(dy: np.ndarray, x: np.ndarray, p: LinearParams):
    """Return ``(dx, dweight, dbias)``."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ p.weight.T, x2.T @ dy2, dy2.sum(axis=0)


# --------------------------------------------------------------------------
# softmax / loss


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:1]:
        raise ValueError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label out of range for {logits.shape[1]} classes")
    return labels.astype(np.intp)


def cross_entropy_loss(logits: np.ndarray, labels) -> float:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = _check_labels(logits, labels)
    m = logits.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(len(labels)), labels]
    return float(np.mean(logz - picked))


def cross_entropy_backward(logits: np.ndarray, labels) -> np.ndarray:
    labels = _check_labels(logits, labels)
    g = softmax(logits, axis=1)
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


# --------------------------------------------------------------------------
# layer norm, GELU, dropout


def layernorm_forward(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    g = dy * gamma
    dx = inv * (
        g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x):
    # tanh approximation; smooth everywhere so finite differences behave
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def dropout_forward(x, rate: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout. Returns ``(y, mask)``; mask is None when inactive."""
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# --------------------------------------------------------------------------
# multi-head attention


def _split_heads(x, heads):
    *lead, length, d = x.shape
    return x.reshape(*lead, length, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x):
    *lead, heads, length, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, heads * dh)


def attention_forward(q_in, k_in, v_in, p: MultiHeadAttentionParams, literal_scale=False):
    """Scaled dot-product attention over ``[..., L, d]`` inputs.

    Returns ``(out, attn, cache)`` where ``attn`` has shape ``[..., h, L, L]``.
    Logits are divided by the square root of the per-head width unless
    ``literal_scale`` asks for the full model width.
    """
    for name, t in (("q", q_in), ("k", k_in), ("v", v_in)):
        if t.shape[-1] != p.dim:
            raise ValueError(f"{name} input width {t.shape[-1]} != attention dim {p.dim}")
    h = p.heads
    qh = _split_heads(linear_forward(q_in, p.q), h)
    kh = _split_heads(linear_forward(k_in, p.k), h)
    vh = _split_heads(linear_forward(v_in, p.v), h)
    scale = 1.0 / math.sqrt(p.dim if literal_scale else p.dim // h)
    logits = (qh @ kh.swapaxes(-1, -2)) * scale
    check_finite(logits, "attention logits")
    attn = softmax(logits)
    ctx = _merge_heads(attn @ vh)
    out = linear_forward(ctx, p.out)
    cache = (q_in, k_in, v_in, qh, kh, vh, attn, ctx, scale, p)
    return out, attn, cache


def attention_backward(dout, cache):
    """Return ``(dq_in, dk_in, dv_in, grads)``; grads maps 'q','k','v','out' to (dW, db)."""
    q_in, k_in, v_in, qh, kh, vh, attn, ctx, scale, p = cache
    grads = {}
    dctx, dw, db = linear_backward(dout, ctx, p.out)
    grads["out"] = (dw, db)
    dctx_h = _split_heads(dctx, p.heads)
    dattn = dctx_h @ vh.swapaxes(-1, -2)
    dvh = attn.swapaxes(-1, -2) @ dctx_h
    dlogits = softmax_backward(dattn, attn) * scale
    dqh = dlogits @ kh
    dkh = dlogits.swapaxes(-1, -2) @ qh
    dq, *grads["q"] = linear_backward(_merge_heads(dqh), q_in, p.q)
    dk, *grads["k"] = linear_backward(_merge_heads(dkh), k_in, p.k)
    dv, *grads["v"] = linear_backward(_merge_heads(dvh), v_in, p.v)
    grads = {k: tuple(v) for k, v in grads.items()}
    return dq, dk, dv, grads


# --------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    """Adam moments (unused in SGD mode) plus hyperparameters."""

    lr: float = 1e-3
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def optimizer_step(params: dict, grads: dict, state: OptimizerState) -> dict:
    """Return a new parameter dict after one update; ``state`` is advanced in place."""
    state.step += 1
    lr = state.lr
    new = {}
    if state.kind == "sgd":
        for name, p in params.items():
            g = grads.get(name)
            new[name] = p if g is None else p - lr * g
        return new
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        new[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new

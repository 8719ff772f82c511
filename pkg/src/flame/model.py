"""Spatio-temporal keypoint transformer.

Pipeline for a batch ``x`` of shape ``(B, T, N, 2)``::

    embed -> + pos_spatial -> spatial blocks (per frame, over N)
          -> mean over N -> + pos_temporal -> temporal blocks (over T)
          -> mean over T -> head

Encoder blocks are post-norm: attention, residual, layer norm, GELU
feed-forward (d -> 4d -> d), residual, layer norm.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import nn

_DTYPES = {"float32": np.float32, "float64": np.float64}
_SUFFIXES = ("weight", "bias", "gamma", "beta")


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 45
    n_keypoints: int = 17
    d_model: int = 64
    n_heads: int = 4
    layers_spatial: int = 2
    layers_temporal: int = 2
    n_classes: int = 4
    dropout: float = 0.1
    ffn_mult: int = 4
    literal_scale: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("seq_len", "n_keypoints", "d_model", "n_heads",
                     "layers_spatial", "layers_temporal", "n_classes", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


# 3 + 3 blocks put the default width at 304,324 trainable scalars.
PAPER_PROFILE = ModelConfig(layers_spatial=3, layers_temporal=3)
TOY_PROFILE = ModelConfig(seq_len=15, d_model=16, n_heads=2, layers_spatial=1, layers_temporal=1)


# --------------------------------------------------------------------------
# parameters


def _block_shapes(prefix: str, d: int, ffn: int):
    for part in ("attn_q", "attn_k", "attn_v", "attn_out"):
        yield f"{prefix}.{part}.weight", (d, d)
        yield f"{prefix}.{part}.bias", (d,)
    yield f"{prefix}.ln1.gamma", (d,)
    yield f"{prefix}.ln1.beta", (d,)
    yield f"{prefix}.ffn1.weight", (d, ffn)
    yield f"{prefix}.ffn1.bias", (ffn,)
    yield f"{prefix}.ffn2.weight", (ffn, d)
    yield f"{prefix}.ffn2.bias", (d,)
    yield f"{prefix}.ln2.gamma", (d,)
    yield f"{prefix}.ln2.beta", (d,)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered mapping of parameter name to shape."""
    d, ffn = cfg.d_model, cfg.d_model * cfg.ffn_mult
    shapes = {"input_embed.weight": (2, d), "input_embed.bias": (d,),
              "pos_spatial": (cfg.n_keypoints, d)}
    for i in range(cfg.layers_spatial):
        shapes.update(_block_shapes(f"spatial.{i}", d, ffn))
    shapes["pos_temporal"] = (cfg.seq_len, d)
    for i in range(cfg.layers_temporal):
        shapes.update(_block_shapes(f"temporal.{i}", d, ffn))
    shapes["head.weight"] = (d, cfg.n_classes)
    shapes["head.bias"] = (cfg.n_classes,)
    return shapes


def group_of(name: str) -> str:
    """Transmission group a parameter belongs to (weight and bias travel together)."""
    head, _, tail = name.rpartition(".")
    return head if head and tail in _SUFFIXES else name


def param_groups(cfg: ModelConfig) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {}
    for name in param_shapes(cfg):
        groups.setdefault(group_of(name), []).append(name)
    return groups


def group_sizes(cfg: ModelConfig) -> dict[str, int]:
    """Scalar count of every transmission group, in schema order."""
    sizes: dict[str, int] = {}
    for name, shape in param_shapes(cfg).items():
        g = group_of(name)
        sizes[g] = sizes.get(g, 0) + math.prod(shape)
    return sizes


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform linears, zero biases, unit/zero layer norm, N(0, 0.02) positions."""
    rng = np.random.default_rng(seed)
    dtype = cfg.np_dtype
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("pos_"):
            value = rng.normal(0.0, 0.02, size=shape)
        elif name.endswith(".weight"):
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gamma"):
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = value.astype(dtype)
    return params


def count_parameters(params: dict[str, np.ndarray]) -> tuple[dict[str, int], int]:
    """Exact scalar counts per transmission group, plus the total."""
    per_group: dict[str, int] = {}
    for name, value in params.items():
        g = group_of(name)
        per_group[g] = per_group.get(g, 0) + int(value.size)
    return per_group, sum(per_group.values())


def block_summary(per_group: dict[str, int]) -> dict[str, int]:
    """Collapse sub-block groups into ``spatial.0``-style encoder blocks."""
    out: dict[str, int] = {}
    for g, n in per_group.items():
        parts = g.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("spatial", "temporal") else g
        out[key] = out.get(key, 0) + n
    return out


def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


# --------------------------------------------------------------------------
# attention statistics


@dataclass
class AttentionStats:
    keypoint_importance: np.ndarray
    time_importance: np.ndarray
    samples_seen: int

    def write_csv(self, keypoint_path, time_path):
        for path, header, values in (
            (keypoint_path, ("keypoint_index", "importance"), self.keypoint_importance),
            (time_path, ("frame_index", "importance"), self.time_importance),
        ):
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(header)
                for i, v in enumerate(values):
                    w.writerow((i, repr(float(v))))


class AttentionAccumulator:
    """Streaming, sample-weighted mean of per-batch attention statistics."""

    def __init__(self):
        self.reset()

    def reset(self):
        self._kp = None
        self._time = None
        self.samples_seen = 0

    def update(self, stats: AttentionStats):
        n = stats.samples_seen
        if n <= 0:
            return
        if self._kp is None:
            self._kp = stats.keypoint_importance * n
            self._time = stats.time_importance * n
        else:
            self._kp = self._kp + stats.keypoint_importance * n
            self._time = self._time + stats.time_importance * n
        self.samples_seen += n

    def result(self) -> AttentionStats:
        if not self.samples_seen:
            raise ValueError("no forward passes accumulated")
        kp = self._kp / self.samples_seen
        tm = self._time / self.samples_seen
        return AttentionStats(kp / kp.sum(), tm / tm.sum(), self.samples_seen)


def extract_attention_stats(acc: AttentionAccumulator) -> AttentionStats:
    return acc.result()


def _received(attn: np.ndarray) -> np.ndarray:
    # attn [..., h, Lq, Lk] -> mean attention each key position receives
    imp = attn.reshape(-1, attn.shape[-1]).mean(axis=0).astype(np.float64)
    return imp / imp.sum()


# --------------------------------------------------------------------------
# the network


def _attn_params(params, prefix, heads):
    lin = lambda part: nn.LinearParams(params[f"{prefix}.{part}.weight"],
                                       params[f"{prefix}.{part}.bias"])
    return nn.MultiHeadAttentionParams(lin("attn_q"), lin("attn_k"), lin("attn_v"),
                                       lin("attn_out"), heads)


def _linear(params, prefix):
    return nn.LinearParams(params[f"{prefix}.weight"], params[f"{prefix}.bias"])


class KeypointTransformer:
    """Holds parameters and the cache of the most recent forward pass."""

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        self._cache = None

    # -- encoder block -----------------------------------------------------

    def _block_forward(self, x, prefix, train, rng):
        cfg, P = self.config, self.params
        attn_p = _attn_params(P, prefix, cfg.n_heads)
        a, attn, c_attn = nn.attention_forward(x, x, x, attn_p, cfg.literal_scale)
        a, m1 = nn.dropout_forward(a, cfg.dropout, rng, train)
        y1, c_ln1 = nn.layernorm_forward(x + a, P[f"{prefix}.ln1.gamma"], P[f"{prefix}.ln1.beta"])
        f1p, f2p = _linear(P, f"{prefix}.ffn1"), _linear(P, f"{prefix}.ffn2")
        h = nn.linear_forward(y1, f1p)
        g, c_gelu = nn.gelu_forward(h)
        f = nn.linear_forward(g, f2p)
        f, m2 = nn.dropout_forward(f, cfg.dropout, rng, train)
        y2, c_ln2 = nn.layernorm_forward(y1 + f, P[f"{prefix}.ln2.gamma"], P[f"{prefix}.ln2.beta"])
        cache = (prefix, c_attn, m1, c_ln1, y1, f1p, c_gelu, g, f2p, m2, c_ln2)
        return y2, attn, cache

    @staticmethod
    def _block_backward(dy, cache, grads):
        prefix, c_attn, m1, c_ln1, y1, f1p, c_gelu, g, f2p, m2, c_ln2 = cache
        ds, grads[f"{prefix}.ln2.gamma"], grads[f"{prefix}.ln2.beta"] = nn.layernorm_backward(dy, c_ln2)
        df = nn.dropout_backward(ds, m2)
        dg, grads[f"{prefix}.ffn2.weight"], grads[f"{prefix}.ffn2.bias"] = nn.linear_backward(df, g, f2p)
        dh = nn.gelu_backward(dg, c_gelu)
        dy1, grads[f"{prefix}.ffn1.weight"], grads[f"{prefix}.ffn1.bias"] = nn.linear_backward(dh, y1, f1p)
        dy1 = dy1 + ds
        ds1, grads[f"{prefix}.ln1.gamma"], grads[f"{prefix}.ln1.beta"] = nn.layernorm_backward(dy1, c_ln1)
        da = nn.dropout_backward(ds1, m1)
        dq, dk, dv, ag = nn.attention_backward(da, c_attn)
        for part, key in (("attn_q", "q"), ("attn_k", "k"), ("attn_v", "v"), ("attn_out", "out")):
            grads[f"{prefix}.{part}.weight"], grads[f"{prefix}.{part}.bias"] = ag[key]
        return ds1 + dq + dk + dv

    # -- full model --------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False, rng: np.random.Generator | None = None):
        """Return ``(logits, AttentionStats)`` for ``x`` of shape ``(B, T, N, 2)``."""
        cfg, P = self.config, self.params
        x = np.asarray(x, dtype=cfg.np_dtype)
        expected = (cfg.seq_len, cfg.n_keypoints, 2)
        if x.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"expected input (B, {', '.join(map(str, expected))}), got {x.shape}")
        B, T, N, _ = x.shape
        d = cfg.d_model

        emb = _linear(P, "input_embed")
        h = nn.linear_forward(x, emb) + P["pos_spatial"]
        h, m_s = nn.dropout_forward(h, cfg.dropout, rng, train)
        h = h.reshape(B * T, N, d)
        spatial_caches = []
        for i in range(cfg.layers_spatial):
            h, attn_s, c = self._block_forward(h, f"spatial.{i}", train, rng)
            spatial_caches.append(c)
        z = h.mean(axis=1).reshape(B, T, d) + P["pos_temporal"]
        z, m_t = nn.dropout_forward(z, cfg.dropout, rng, train)
        temporal_caches = []
        for i in range(cfg.layers_temporal):
            z, attn_t, c = self._block_forward(z, f"temporal.{i}", train, rng)
            temporal_caches.append(c)
        f = z.mean(axis=1)
        head = _linear(P, "head")
        logits = nn.check_finite(nn.linear_forward(f, head), "logits")

        self._cache = (x, emb, m_s, spatial_caches, m_t, temporal_caches, f, head, (B, T, N, d))
        stats = AttentionStats(_received(attn_s), _received(attn_t), B)
        return logits, stats

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of every parameter given the loss gradient w.r.t. the logits."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        x, emb, m_s, spatial_caches, m_t, temporal_caches, f, head, (B, T, N, d) = self._cache
        grads: dict[str, np.ndarray] = {}
        df, grads["head.weight"], grads["head.bias"] = nn.linear_backward(dlogits, f, head)
        dz = np.broadcast_to(df[:, None, :] / T, (B, T, d))
        for c in reversed(temporal_caches):
            dz = self._block_backward(dz, c, grads)
        dz = nn.dropout_backward(dz, m_t)
        grads["pos_temporal"] = dz.sum(axis=0)
        dh = np.broadcast_to(dz.reshape(B * T, 1, d) / N, (B * T, N, d))
        for c in reversed(spatial_caches):
            dh = self._block_backward(dh, c, grads)
        dh = nn.dropout_backward(dh.reshape(B, T, N, d), m_s)
        grads["pos_spatial"] = dh.sum(axis=(0, 1))
        _, grads["input_embed.weight"], grads["input_embed.bias"] = nn.linear_backward(dh, x, emb)
        return {name: grads[name] for name in self.params}

    def loss_and_grads(self, x, labels, rng=None, train=True):
        logits, stats = self.forward(x, train=train, rng=rng)
        loss = nn.cross_entropy_loss(logits, labels)
        grads = self.backward(nn.cross_entropy_backward(logits, labels))
        return loss, grads, stats

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(x), batch_size):
            logits, _ = self.forward(x[i:i + batch_size], train=False)
            out.append(logits.argmax(axis=1))
        self._cache = None
        return np.concatenate(out) if out else np.zeros(0, dtype=np.intp)


def forward(x, params, config: ModelConfig, mode: str = "eval", rng=None):
    """Functional wrapper returning ``(logits, AttentionStats)``."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return KeypointTransformer(config, params).forward(x, train=mode == "train", rng=rng)


def with_dtype(cfg: ModelConfig, dtype: str) -> ModelConfig:
    return replace(cfg, dtype=dtype)

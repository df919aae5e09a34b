"""Multi-head attention variants used by the two-branch encoder.

Four ops share one projection convention (``y = x @ W + b`` with ``W`` of
shape ``(C, C)``) and one head layout ``(B, h, S, C_head)``:

* :func:`mha_self`  - ordinary multi-head self-attention (SA)
* :func:`mha_cross` - queries from one stream, keys/values from another (CA)
* :func:`mssa`      - multi-scale self-attention: the key heads are split into
  four contiguous groups and each group is filtered by a depthwise 2D
  convolution over the (sequence, head-channel) plane before scoring
* :func:`dca`       - differential cross-modal attention: the attention matrix
  is the self-attention map minus the map scored with a query projected from
  the other stream, both softmax-normalized before subtraction
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import ShapeError, Tensor, concat, depthwise_conv2d, softmax_rows, split

PROJECTIONS = {
    "sa": ("q", "k", "v", "o"),
    "ca": ("q", "k", "v", "o"),
    "mssa": ("q", "k", "v", "o"),
    "dca": ("q_cross", "q", "k", "v", "o"),
}


@dataclass(frozen=True)
class AttentionConfig:
    C: int
    h: int
    scales: tuple[int, ...] = (1, 3, 5, 7)

    def __post_init__(self):
        if self.C % self.h:
            raise ValueError(f"head count {self.h} does not divide width {self.C}")
        if any(k % 2 == 0 for k in self.scales):
            raise ValueError(f"convolution scales must be odd, got {self.scales}")

    @property
    def head_dim(self) -> int:
        return self.C // self.h

    @property
    def softmax_scale(self) -> float:
        return 1.0 / math.sqrt(self.head_dim)


@dataclass
class AttentionWeights:
    """Projection matrices/biases keyed by role, plus MSSA kernels."""

    weights: dict[str, Tensor]
    biases: dict[str, Tensor]
    kernels: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, kind: str, cfg: AttentionConfig, rng: np.random.Generator,
             std: float = 0.02, kernel_noise: float = 0.02) -> "AttentionWeights":
        """Gaussian projections, zero biases; MSSA kernels start near a delta."""
        C = cfg.C
        weights, biases = {}, {}
        for role in PROJECTIONS[kind]:
            weights[role] = Tensor(rng.normal(0.0, std, (C, C)), requires_grad=True)
            biases[role] = Tensor(np.zeros(C), requires_grad=True)
        kernels = []
        if kind == "mssa":
            group = _group_size(cfg)
            for k in cfg.scales:
                ker = rng.normal(0.0, kernel_noise, (group, k, k))
                ker[:, k // 2, k // 2] += 1.0
                kernels.append(Tensor(ker, requires_grad=True))
        return cls(weights, biases, kernels)

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for role in self.weights:
            out[f"{prefix}{role}.weight"] = self.weights[role]
            out[f"{prefix}{role}.bias"] = self.biases[role]
        for i, k in enumerate(self.kernels):
            out[f"{prefix}kernels.{i}"] = k
        return out

    @classmethod
    def from_named(cls, params: dict[str, Tensor], prefix: str = "") -> "AttentionWeights":
        weights, biases, kernels = {}, {}, []
        for name, t in params.items():
            if not name.startswith(prefix):
                continue
            key = name[len(prefix):]
            if key.endswith(".weight"):
                weights[key[:-7]] = t
            elif key.endswith(".bias"):
                biases[key[:-5]] = t
            elif key.startswith("kernels."):
                kernels.append((int(key[8:]), t))
        return cls(weights, biases, [t for _, t in sorted(kernels, key=lambda kv: kv[0])])


def _group_size(cfg: AttentionConfig) -> int:
    if cfg.h % len(cfg.scales):
        raise ValueError(f"head count {cfg.h} is not divisible by {len(cfg.scales)} scales")
    return cfg.h // len(cfg.scales)


def _check_width(x: Tensor, cfg: AttentionConfig, what: str = "input") -> None:
    if x.ndim != 3:
        raise ShapeError(f"{what} must be (B, S, C), got {x.shape}")
    if x.shape[-1] != cfg.C:
        raise ShapeError(f"{what} width {x.shape[-1]} does not match attention width {cfg.C}")
    if x.shape[1] < 1:
        raise ShapeError(f"{what} has an empty sequence axis")


def _project(x: Tensor, w: AttentionWeights, role: str) -> Tensor:
    return x @ w.weights[role] + w.biases[role]


def split_heads(x: Tensor, h: int) -> Tensor:
    B, S, C = x.shape
    return x.reshape(B, S, h, C // h).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    B, h, S, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, S, h * d)


def attention_map(q: Tensor, k: Tensor, cfg: AttentionConfig) -> Tensor:
    """Row-stochastic ``softmax(q kᵀ / sqrt(C_head))`` per head."""
    return softmax_rows(q @ k.swap_last(), cfg.softmax_scale)


def _heads_qkv(x_q: Tensor, x_kv: Tensor, w: AttentionWeights, cfg: AttentionConfig):
    q = split_heads(_project(x_q, w, "q"), cfg.h)
    k = split_heads(_project(x_kv, w, "k"), cfg.h)
    v = split_heads(_project(x_kv, w, "v"), cfg.h)
    return q, k, v


def mha_self(x: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    _check_width(x, cfg)
    q, k, v = _heads_qkv(x, x, w, cfg)
    return _project(merge_heads(attention_map(q, k, cfg) @ v), w, "o")


def mha_cross(x_q: Tensor, x_kv: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    _check_width(x_q, cfg, "query input")
    _check_width(x_kv, cfg, "key/value input")
    q, k, v = _heads_qkv(x_q, x_kv, w, cfg)
    return _project(merge_heads(attention_map(q, k, cfg) @ v), w, "o")


def multiscale_keys(k: Tensor, kernels: list[Tensor], cfg: AttentionConfig) -> Tensor:
    """Convolve contiguous head groups of ``k`` (B, h, S, C_head) at ascending scales."""
    groups = split(k, len(kernels), axis=1)
    return concat([depthwise_conv2d(g, ker) for g, ker in zip(groups, kernels)], axis=1)


def mssa(x: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    _check_width(x, cfg)
    _group_size(cfg)
    if len(w.kernels) != len(cfg.scales):
        raise ValueError(f"expected {len(cfg.scales)} kernels, got {len(w.kernels)}")
    q, k, v = _heads_qkv(x, x, w, cfg)
    k = multiscale_keys(k, w.kernels, cfg)
    return _project(merge_heads(attention_map(q, k, cfg) @ v), w, "o")


def differential_attention(x_a: Tensor, x_b: Tensor, w: AttentionWeights, cfg: AttentionConfig):
    """Return ``(diff_attn, v_a)`` for the stream-A branch.

    ``diff_attn = softmax(Q_A K_Aᵀ) - softmax(Q_Bcross K_Aᵀ)``, shape
    ``(B, h, S, S)``; its rows sum to zero.
    """
    _check_width(x_a, cfg, "stream A input")
    _check_width(x_b, cfg, "stream B input")
    if x_a.shape != x_b.shape:
        raise ShapeError(f"stream shapes differ: {x_a.shape} vs {x_b.shape}")
    q_a, k_a, v_a = _heads_qkv(x_a, x_a, w, cfg)
    q_cross = split_heads(_project(x_b, w, "q_cross"), cfg.h)
    diff = attention_map(q_a, k_a, cfg) - attention_map(q_cross, k_a, cfg)
    return diff, v_a


def dca(x_a: Tensor, x_b: Tensor, w: AttentionWeights, cfg: AttentionConfig) -> Tensor:
    diff, v_a = differential_attention(x_a, x_b, w, cfg)
    return _project(merge_heads(diff @ v_a), w, "o")

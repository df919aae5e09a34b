"""Two-branch audio-visual transformer encoder with three classification heads.

Parameters live in one flat ``dict[str, Tensor]`` keyed by canonical dotted
paths, which is also the checkpoint layout::

    {branch}.pre.weight / .bias          pre-encoder (C_in, C) / (C,)
    {branch}.cls                         (C,)
    {branch}.pos                         (T+1, C)
    {branch}.blocks.{i}.norm{1,2,3}.weight / .bias
    {branch}.blocks.{i}.self.{q,k,v,o}.weight / .bias
    {branch}.blocks.{i}.self.kernels.{j}          (MSSA only, (h/4, k_j, k_j))
    {branch}.blocks.{i}.cross.{q,k,v,o}.weight / .bias
    {branch}.blocks.{i}.cross.q_cross.weight / .bias   (DCA only)
    {branch}.blocks.{i}.ffn.fc1.weight / .bias    (C, m*C) / (m*C,)
    {branch}.blocks.{i}.ffn.fc2.weight / .bias    (m*C, C) / (C,)
    heads.{audio,visual}.weight / .bias  (C, k) / (k,)
    heads.multi.weight / .bias           (2C, k) / (k,)

``branch`` is ``audio`` or ``visual``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from typing import NamedTuple

import numpy as np

from .attention import AttentionConfig, AttentionWeights, dca, mha_cross, mha_self, mssa
from .autograd import ShapeError, Tensor, concat, gelu, layer_norm

BRANCHES = ("audio", "visual")
SELF_VARIANTS = ("sa", "mssa")
CROSS_VARIANTS = ("ca", "dca")


@dataclass(frozen=True)
class ModelConfig:
    C: int = 16
    n_blocks: int = 2
    h: int = 4
    T: int = 8
    C_a: int = 12
    C_v_feat: int = 12
    self_attention: str = "mssa"
    cross_attention: str = "dca"
    ffn_multiplier: int = 4
    scales: tuple[int, ...] = (1, 3, 5, 7)
    n_classes: int = 2
    visual_activation: bool = True
    init_std: float = 0.02
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be non-negative")
        if self.self_attention not in SELF_VARIANTS:
            raise ValueError(f"self_attention must be one of {SELF_VARIANTS}, got {self.self_attention!r}")
        if self.cross_attention not in CROSS_VARIANTS:
            raise ValueError(f"cross_attention must be one of {CROSS_VARIANTS}, got {self.cross_attention!r}")
        if self.n_classes != 2:
            raise ValueError("only binary classification (n_classes=2) is supported")
        # validates divisibility of C by h and the scale list
        AttentionConfig(self.C, self.h, tuple(self.scales))
        if self.self_attention == "mssa" and self.h % len(self.scales):
            raise ValueError(f"MSSA needs h divisible by {len(self.scales)}, got h={self.h}")

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.C, self.h, tuple(self.scales))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "scales" in d:
            d["scales"] = tuple(d["scales"])
        return cls(**d)

    def with_variant(self, self_attention: str, cross_attention: str) -> "ModelConfig":
        return replace(self, self_attention=self_attention, cross_attention=cross_attention)


PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(C=64, n_blocks=6, h=8, C_a=104, C_v_feat=32),
}


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalars in :func:`init_params` for ``cfg``."""
    C, m, k = cfg.C, cfg.ffn_multiplier, cfg.n_classes
    self_slot = 4 * (C * C + C)
    if cfg.self_attention == "mssa":
        self_slot += (cfg.h // len(cfg.scales)) * sum(s * s for s in cfg.scales)
    cross_slot = (5 if cfg.cross_attention == "dca" else 4) * (C * C + C)
    ffn = 2 * m * C * C + m * C + C
    block = 6 * C + self_slot + cross_slot + ffn
    branch_common = C + (cfg.T + 1) * C + cfg.n_blocks * block
    pre = (cfg.C_a + 1) * C + (cfg.C_v_feat + 1) * C
    heads = 2 * (C * k + k) + (2 * C * k + k)
    return 2 * branch_common + pre + heads


def _linear_params(prefix: str, n_in: int, n_out: int, rng, std: float) -> dict[str, Tensor]:
    return {
        f"{prefix}.weight": Tensor(rng.normal(0.0, std, (n_in, n_out)), requires_grad=True),
        f"{prefix}.bias": Tensor(np.zeros(n_out), requires_grad=True),
    }


def _norm_params(prefix: str, C: int) -> dict[str, Tensor]:
    return {
        f"{prefix}.weight": Tensor(np.ones(C), requires_grad=True),
        f"{prefix}.bias": Tensor(np.zeros(C), requires_grad=True),
    }


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    std, C = cfg.init_std, cfg.C
    att = cfg.attention
    params: dict[str, Tensor] = {}
    for branch, c_in in zip(BRANCHES, (cfg.C_a, cfg.C_v_feat)):
        params.update(_linear_params(f"{branch}.pre", c_in, C, rng, std))
        params[f"{branch}.cls"] = Tensor(rng.normal(0.0, std, C), requires_grad=True)
        params[f"{branch}.pos"] = Tensor(rng.normal(0.0, std, (cfg.T + 1, C)), requires_grad=True)
        for i in range(cfg.n_blocks):
            p = f"{branch}.blocks.{i}"
            for j in (1, 2, 3):
                params.update(_norm_params(f"{p}.norm{j}", C))
            params.update(AttentionWeights.init(cfg.self_attention, att, rng, std).named(f"{p}.self."))
            params.update(AttentionWeights.init(cfg.cross_attention, att, rng, std).named(f"{p}.cross."))
            params.update(_linear_params(f"{p}.ffn.fc1", C, cfg.ffn_multiplier * C, rng, std))
            params.update(_linear_params(f"{p}.ffn.fc2", cfg.ffn_multiplier * C, C, rng, std))
    params.update(_linear_params("heads.audio", C, cfg.n_classes, rng, std))
    params.update(_linear_params("heads.visual", C, cfg.n_classes, rng, std))
    params.update(_linear_params("heads.multi", 2 * C, cfg.n_classes, rng, std))
    return params


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return x @ params[f"{prefix}.weight"] + params[f"{prefix}.bias"]


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def audio_pre_encode(x_a, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, C_a, T) -> (B, T, C) per-frame affine projection."""
    x_a = _as_input(x_a)
    if x_a.ndim != 3 or x_a.shape[1] != cfg.C_a:
        raise ShapeError(f"audio input must be (B, {cfg.C_a}, T), got {x_a.shape}")
    return _linear(x_a.transpose(0, 2, 1), params, "audio.pre")


def visual_pre_encode(v, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, T, C_v_feat) -> (B, T, C) per-frame affine map, GELU unless disabled."""
    v = _as_input(v)
    if v.ndim != 3 or v.shape[2] != cfg.C_v_feat:
        raise ShapeError(f"visual input must be (B, T, {cfg.C_v_feat}), got {v.shape}")
    out = _linear(v, params, "visual.pre")
    return gelu(out) if cfg.visual_activation else out


def _self_slot(x: Tensor, params, prefix: str, cfg: ModelConfig) -> Tensor:
    w = AttentionWeights.from_named(params, prefix)
    if cfg.self_attention == "mssa":
        return mssa(x, w, cfg.attention)
    return mha_self(x, w, cfg.attention)


def _cross_slot(x: Tensor, other: Tensor, params, prefix: str, cfg: ModelConfig) -> Tensor:
    w = AttentionWeights.from_named(params, prefix)
    if cfg.cross_attention == "dca":
        return dca(x, other, w, cfg.attention)
    return mha_cross(x, other, w, cfg.attention)


def _norm(x: Tensor, params, prefix: str, cfg: ModelConfig) -> Tensor:
    return layer_norm(x, params[f"{prefix}.weight"], params[f"{prefix}.bias"], cfg.ln_eps)


def _embed(f: Tensor, params, branch: str) -> Tensor:
    B = f.shape[0]
    C = f.shape[2]
    cls = params[f"{branch}.cls"].reshape(1, 1, C) + Tensor(np.zeros((B, 1, C)))
    return concat([cls, f], axis=1) + params[f"{branch}.pos"]


def encode(f_a, f_v, params: dict[str, Tensor], cfg: ModelConfig) -> tuple[Tensor, Tensor]:
    """Run both branches in lockstep; returns ``(Z_a, Z_v)``, each (B, T+1, C).

    Index 0 along the time axis is the CLS token. Each block applies pre-norm
    self attention, then pre-norm cross attention reading the other branch's
    state at the same depth, then a pre-norm feed-forward layer, each with a
    residual connection.
    """
    f_a, f_v = _as_input(f_a), _as_input(f_v)
    if f_a.shape != f_v.shape:
        raise ShapeError(f"modalities disagree on (B, T, C): {f_a.shape} vs {f_v.shape}")
    if f_a.ndim != 3 or f_a.shape[2] != cfg.C:
        raise ShapeError(f"pre-encoded features must be (B, T, {cfg.C}), got {f_a.shape}")
    if f_a.shape[1] + 1 != params["audio.pos"].shape[0]:
        raise ShapeError(f"sequence length {f_a.shape[1]} does not match positional table "
                         f"for T={params['audio.pos'].shape[0] - 1}")
    state = {"audio": _embed(f_a, params, "audio"), "visual": _embed(f_v, params, "visual")}
    other = {"audio": "visual", "visual": "audio"}
    for i in range(cfg.n_blocks):
        for b in BRANCHES:
            p = f"{b}.blocks.{i}"
            state[b] = state[b] + _self_slot(_norm(state[b], params, f"{p}.norm1", cfg), params, f"{p}.self.", cfg)
        normed = {b: _norm(state[b], params, f"{b}.blocks.{i}.norm2", cfg) for b in BRANCHES}
        for b in BRANCHES:
            p = f"{b}.blocks.{i}"
            state[b] = state[b] + _cross_slot(normed[b], normed[other[b]], params, f"{p}.cross.", cfg)
        for b in BRANCHES:
            p = f"{b}.blocks.{i}"
            hidden = gelu(_linear(_norm(state[b], params, f"{p}.norm3", cfg), params, f"{p}.ffn.fc1"))
            state[b] = state[b] + _linear(hidden, params, f"{p}.ffn.fc2")
    return state["audio"], state["visual"]


def classify(Z_a: Tensor, Z_v: Tensor, params: dict[str, Tensor]) -> tuple[Tensor, Tensor, Tensor]:
    """Affine heads on the CLS states: audio, visual, and their concatenation."""
    cls_a, cls_v = Z_a[:, 0, :], Z_v[:, 0, :]
    logits_a = _linear(cls_a, params, "heads.audio")
    logits_v = _linear(cls_v, params, "heads.visual")
    logits_m = _linear(concat([cls_a, cls_v], axis=1), params, "heads.multi")
    return logits_a, logits_v, logits_m


class ModelOutput(NamedTuple):
    logits_a: Tensor
    logits_v: Tensor
    logits_m: Tensor
    Z_a: Tensor
    Z_v: Tensor

    def embeddings(self) -> np.ndarray:
        """Concatenated CLS states, (B, 2C)."""
        return np.concatenate([self.Z_a.data[:, 0, :], self.Z_v.data[:, 0, :]], axis=1)


def forward(params: dict[str, Tensor], cfg: ModelConfig, x_audio, x_visual) -> ModelOutput:
    """Full pass from raw features: audio (B, C_a, T), visual (B, T, C_v_feat)."""
    f_a = audio_pre_encode(x_audio, params, cfg)
    f_v = visual_pre_encode(x_visual, params, cfg)
    if f_a.shape[1] != f_v.shape[1]:
        raise ShapeError(f"audio has {f_a.shape[1]} frames, visual has {f_v.shape[1]}")
    Z_a, Z_v = encode(f_a, f_v, params, cfg)
    return ModelOutput(*classify(Z_a, Z_v, params), Z_a, Z_v)


def swap_branches(params: dict[str, Tensor]) -> dict[str, Tensor]:
    """Rename ``audio.*`` <-> ``visual.*`` (and the two single-modality heads)."""
    swap = {"audio": "visual", "visual": "audio"}
    out = {}
    for name, t in params.items():
        head, _, rest = name.partition(".")
        if head in swap:
            name = f"{swap[head]}.{rest}"
        elif name.startswith("heads.audio"):
            name = "heads.visual" + name[len("heads.audio"):]
        elif name.startswith("heads.visual"):
            name = "heads.audio" + name[len("heads.visual"):]
        out[name] = t
    return out

"""Gradient-check suite over every differentiable op family and the full model.

Each check builder takes a seed and returns ``(f, params)`` where ``f`` is a
scalar-valued closure over ``params``. Random fixed projections ``R`` turn
array-valued ops into scalars so every output element carries gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .attention import AttentionConfig, AttentionWeights, dca, mha_cross, mha_self, mssa
from .autograd import Tensor
from .gradcheck import GradCheckReport, grad_check
from .model import ModelConfig, forward, init_params
from .objectives import LossWeights, alignment_loss, cross_entropy, total_loss

CheckBuilder = Callable[[int], tuple[Callable[[], Tensor], dict[str, Tensor]]]


def _p(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def _check_matmul(seed):
    rng = np.random.default_rng(seed)
    params = {"a": _p(rng, 2, 3, 4), "b": _p(rng, 4, 5)}
    R = rng.normal(size=(2, 3, 5))
    return lambda: (ag.matmul(params["a"], params["b"]) * R).sum(), params


def _check_softmax(seed):
    rng = np.random.default_rng(seed)
    params = {"x": _p(rng, 3, 6)}
    R = rng.normal(size=(3, 6))
    return lambda: (ag.softmax_rows(params["x"], 0.7) * R).sum(), params


def _check_conv(seed):
    rng = np.random.default_rng(seed)
    params = {"x": _p(rng, 2, 3, 5, 4), "kernels": _p(rng, 3, 3, 3)}
    R = rng.normal(size=(2, 3, 5, 4))
    return lambda: (ag.depthwise_conv2d(params["x"], params["kernels"]) * R).sum(), params


def _check_layer_norm(seed):
    rng = np.random.default_rng(seed)
    params = {"x": _p(rng, 2, 3, 6), "weight": _p(rng, 6), "bias": _p(rng, 6)}
    R = rng.normal(size=(2, 3, 6))
    return lambda: (ag.layer_norm(params["x"], params["weight"], params["bias"]) * R).sum(), params


def _check_primitives(seed):
    """reshape, transpose, concat, split, mean, add/sub/mul/div, exp, log, sqrt, tanh, gelu."""
    rng = np.random.default_rng(seed)
    params = {"x": _p(rng, 2, 3, 4), "y": _p(rng, 3, 4), "z": _p(rng, 2, 4, 3)}
    R = rng.normal(size=(2, 4, 3))

    def f():
        x, y, z = params["x"], params["y"], params["z"]
        a = (x + y) * x - y / (1.5 + ag.tanh(y))
        b = ag.concat([a.transpose(0, 2, 1), z], axis=2)  # (2, 4, 6)
        left, right = ag.split(b, 2, axis=2)
        c = ag.exp(left * 0.3) + ag.log(ag.sqrt(right * right + 1.0)) + ag.gelu(left)
        m = c.reshape(2, 12).mean(axis=1, keepdims=True)
        return (c * R).sum() + (m * m).sum()

    return f, params


def _attention_case(seed, kind):
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(C=16, h=4)
    w = AttentionWeights.init(kind, cfg, rng, std=0.3, kernel_noise=0.3)
    for b in w.biases.values():
        b.data = rng.normal(0.0, 0.1, b.shape)
    params = {"x": _p(rng, 1, 4, 16), **w.named("w.")}
    if kind in ("ca", "dca"):
        params["x_other"] = _p(rng, 1, 4, 16)
    R = rng.normal(size=(1, 4, 16))

    def f():
        ww = AttentionWeights.from_named(params, "w.")
        if kind == "sa":
            out = mha_self(params["x"], ww, cfg)
        elif kind == "mssa":
            out = mssa(params["x"], ww, cfg)
        elif kind == "ca":
            out = mha_cross(params["x"], params["x_other"], ww, cfg)
        else:
            out = dca(params["x"], params["x_other"], ww, cfg)
        return (out * R).sum()

    return f, params


def _check_ce(seed):
    rng = np.random.default_rng(seed)
    params = {"logits": _p(rng, 5, 2)}
    y = rng.integers(0, 2, 5)
    return lambda: cross_entropy(params["logits"], y), params


def _labels(rng, n):
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    return y


def _check_alignment(seed):
    rng = np.random.default_rng(seed)
    params = {"Z_a": _p(rng, 4, 5, 3), "Z_v": _p(rng, 4, 5, 3)}
    y = _labels(rng, 4)
    return lambda: alignment_loss(params["Z_a"], params["Z_v"], y), params


def _check_total(seed):
    rng = np.random.default_rng(seed)
    params = {"logits_a": _p(rng, 4, 2), "logits_v": _p(rng, 4, 2), "logits_m": _p(rng, 4, 2),
              "Z_a": _p(rng, 4, 5, 3), "Z_v": _p(rng, 4, 5, 3)}
    y_a, y_v = _labels(rng, 4), _labels(rng, 4)
    y_m = y_a & y_v
    w = LossWeights(*rng.uniform(0.1, 2.0, 4))

    def f():
        return total_loss(params["logits_a"], params["logits_v"], params["logits_m"],
                          params["Z_a"], params["Z_v"], y_a, y_v, y_m, w)[0]

    return f, params


def _check_model(seed):
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(C=16, n_blocks=2, h=4, T=4, C_a=6, C_v_feat=5,
                      self_attention="mssa", cross_attention="dca", init_std=0.3)
    params = init_params(cfg, seed)
    for name, t in params.items():
        if name.endswith(".bias") or "norm" in name:
            t.data = t.data + rng.normal(0.0, 0.1, t.shape)
    x_a = rng.normal(size=(2, cfg.C_a, cfg.T))
    x_v = rng.normal(size=(2, cfg.T, cfg.C_v_feat))
    y_a, y_v = np.array([1, 0]), np.array([1, 1])
    y_m = y_a & y_v

    def f():
        out = forward(params, cfg, x_a, x_v)
        return total_loss(out.logits_a, out.logits_v, out.logits_m, out.Z_a, out.Z_v, y_a, y_v, y_m)[0]

    return f, params


CHECKS: dict[str, CheckBuilder] = {
    "matmul": _check_matmul,
    "softmax_rows": _check_softmax,
    "depthwise_conv2d": _check_conv,
    "layer_norm": _check_layer_norm,
    "primitives": _check_primitives,
    "mha_self": lambda s: _attention_case(s, "sa"),
    "mha_cross": lambda s: _attention_case(s, "ca"),
    "mssa": lambda s: _attention_case(s, "mssa"),
    "dca": lambda s: _attention_case(s, "dca"),
    "cross_entropy": _check_ce,
    "alignment_loss": _check_alignment,
    "total_loss": _check_total,
    "model": _check_model,
}

# full-model check samples this many components per parameter tensor
MODEL_COMPONENTS = 3


@dataclass
class CheckResult:
    name: str
    seed: int
    report: GradCheckReport

    @property
    def max_rel_err(self) -> float:
        return self.report.max_rel_err

    def to_dict(self) -> dict:
        worst = self.report.worst
        return {
            "check": self.name, "seed": self.seed, "max_rel_err": self.max_rel_err,
            "components": self.report.n_components,
            "worst": None if worst is None else
            {"param": worst[0], "index": worst[1], "analytic": worst[2], "numeric": worst[3]},
        }


def run_check(name: str, seed: int, eps: float = 1e-5, corrupt: float | None = None) -> CheckResult:
    f, params = CHECKS[name](seed)
    max_components = MODEL_COMPONENTS if name == "model" else None
    report = grad_check(f, params, eps, max_components=max_components, seed=seed, corrupt=corrupt)
    return CheckResult(name, seed, report)


def run_suite(names=None, seeds: int = 10, eps: float = 1e-5, inject_fault: str | None = None):
    """Yield one :class:`CheckResult` per (check, seed)."""
    for name in names or CHECKS:
        if name not in CHECKS:
            raise KeyError(f"unknown check {name!r}; available: {', '.join(CHECKS)}")
        for seed in range(seeds):
            yield run_check(name, seed, eps, corrupt=1.1 if name == inject_fault else None)

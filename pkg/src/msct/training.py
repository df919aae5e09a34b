"""Run configuration, the training loop, evaluation, and the ablation grid."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from .autograd import Tensor, backward, no_grad
from .data import CATEGORIES, DatasetSplit, SampleRecord, batch_iter, generate_dataset, load_manifest
from .model import PRESETS, ModelConfig, forward, init_params
from .objectives import LossWeights, accuracy, auc, predict_labels, real_probability, total_loss
from .optim import AdamState, adam_step

logger = logging.getLogger(__name__)

ABLATION_VARIANTS = (
    ("CA + SA", "sa", "ca"),
    ("CA + MSSA", "mssa", "ca"),
    ("DCA + SA", "sa", "dca"),
    ("DCA + MSSA", "mssa", "dca"),
)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8


@dataclass(frozen=True)
class DataConfig:
    """Either a manifest path or the parameters of a synthetic draw."""

    manifest: str | None = None
    n_per_category: int = 16
    n_val_per_category: int = 4
    n_test_per_category: int = 64
    noise_sigma: float = 0.05
    seed: int = 7
    embedding_seed: int = 0
    d_latent: int = 4
    smoothing_window: int = 3
    persistence: float = 0.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 200
    max_steps: int | None = None
    seed: int = 0
    out: str = "runs/default"
    eval_batch_size: int = 64

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Overlay ``d`` (possibly partial, nested by section) onto ``base``."""
        base = base or RunConfig()
        sections = {"model": ModelConfig, "loss": LossWeights, "optim": OptimConfig, "data": DataConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        updates = {}
        for key, value in d.items():
            if key in sections:
                if not isinstance(value, dict):
                    raise ValueError(f"config section {key!r} must be a mapping")
                current = getattr(base, key)
                merged = {**(current.to_dict() if hasattr(current, "to_dict") else asdict(current)), **value}
                if key == "model":
                    updates[key] = ModelConfig.from_dict(merged)
                else:
                    sec = sections[key]
                    bad = set(merged) - {f.name for f in fields(sec)}
                    if bad:
                        raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
                    updates[key] = sec(**merged)
            else:
                updates[key] = value
        return replace(base, **updates)


def preset(name: str) -> RunConfig:
    """Named configurations: ``desk`` (small, fast) and ``paper`` (6 blocks)."""
    if name == "desk":
        return RunConfig(model=PRESETS["desk"], epochs=200, max_steps=300)
    if name == "paper":
        return RunConfig(model=PRESETS["paper"], epochs=200)
    raise ValueError(f"unknown preset {name!r}; expected 'desk' or 'paper'")


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path) as fh:
        raw = json.load(fh)
    if "preset" in raw:
        base = preset(raw.pop("preset"))
    return RunConfig.from_dict(raw, base)


def resolve_data(cfg: DataConfig, model: ModelConfig) -> DatasetSplit:
    if cfg.manifest:
        return load_manifest(cfg.manifest)
    return generate_dataset(
        cfg.n_per_category, T=model.T, C_a=model.C_a, C_v_feat=model.C_v_feat,
        noise_sigma=cfg.noise_sigma, seed=cfg.seed,
        n_val_per_category=cfg.n_val_per_category, n_test_per_category=cfg.n_test_per_category,
        d_latent=cfg.d_latent, smoothing_window=cfg.smoothing_window, persistence=cfg.persistence,
        embedding_seed=cfg.embedding_seed,
    )


def check_compatible(model: ModelConfig, records: list[SampleRecord]) -> None:
    if not records:
        return
    T, c_a = records[0].audio.shape
    c_v = records[0].visual.shape[1]
    if (T, c_a, c_v) != (model.T, model.C_a, model.C_v_feat):
        raise ValueError(
            f"data has T={T}, C_a={c_a}, C_v_feat={c_v} but the model expects "
            f"T={model.T}, C_a={model.C_a}, C_v_feat={model.C_v_feat}")


# ---------------------------------------------------------------------------
# evaluation


def predict_records(params: dict[str, Tensor], model: ModelConfig, records: list[SampleRecord],
                    batch_size: int = 64) -> dict:
    """Forward every record without recording a tape."""
    check_compatible(model, records)
    parts: dict[str, list] = {k: [] for k in ("logits_a", "logits_v", "logits_m", "embeddings",
                                              "Z_a", "Z_v", "y_a", "y_v", "y_m",
                                              "sample_ids", "categories")}
    with no_grad():
        for batch in batch_iter(records, batch_size):
            out = forward(params, model, batch.audio, batch.visual)
            parts["logits_a"].append(out.logits_a.data)
            parts["logits_v"].append(out.logits_v.data)
            parts["logits_m"].append(out.logits_m.data)
            parts["embeddings"].append(out.embeddings())
            parts["Z_a"].append(out.Z_a.data)
            parts["Z_v"].append(out.Z_v.data)
            for key in ("y_a", "y_v", "y_m"):
                parts[key].append(getattr(batch, key))
            parts["sample_ids"].extend(batch.sample_ids)
            parts["categories"].extend(batch.categories)
    result = {k: (v if k in ("sample_ids", "categories") else np.concatenate(v)) for k, v in parts.items()}
    result["pred"] = predict_labels(result["logits_m"])
    result["scores"] = real_probability(result["logits_m"])
    return result


def evaluate(params: dict[str, Tensor], model: ModelConfig, records: list[SampleRecord],
             weights: LossWeights = LossWeights(), batch_size: int = 64) -> dict:
    """ACC and AUC of the multi-modal head, loss terms, and per-category counts."""
    if not records:
        raise ValueError("cannot evaluate an empty split")
    r = predict_records(params, model, records, batch_size)
    with no_grad():
        total, terms = total_loss(
            Tensor(r["logits_a"]), Tensor(r["logits_v"]), Tensor(r["logits_m"]),
            Tensor(r["Z_a"]), Tensor(r["Z_v"]), r["y_a"], r["y_v"], r["y_m"], weights)
    y = r["y_m"]
    confusion = {c: {"pred_real": 0, "pred_fake": 0} for c in CATEGORIES}
    for cat, p in zip(r["categories"], r["pred"]):
        confusion[cat]["pred_real" if p == 1 else "pred_fake"] += 1
    return {
        "n": len(records),
        "loss": total.item(),
        **terms,
        "ACC": accuracy(r["pred"], y),
        "AUC": auc(r["scores"], y) if 0 < y.sum() < len(y) else None,
        "confusion": confusion,
    }


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    best_params: dict[str, Tensor]
    best_epoch: int
    steps: int
    history: list[dict]


def _snapshot(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def train(cfg: RunConfig, train_records: list[SampleRecord], val_records: list[SampleRecord] | None = None,
          log: Callable[[dict], None] | None = None, params: dict[str, Tensor] | None = None) -> TrainResult:
    """Adam on the weighted objective; one metrics record per split per epoch.

    The best snapshot is the one with the highest validation AUC (the final
    parameters when there is no usable validation split).
    """
    model = cfg.model
    check_compatible(model, train_records)
    params = init_params(model, cfg.seed) if params is None else params
    state = AdamState(lr=cfg.optim.lr, beta1=cfg.optim.beta1, beta2=cfg.optim.beta2, eps=cfg.optim.eps)
    history: list[dict] = []
    best_auc, best_epoch, best = -math.inf, -1, None

    def emit(record):
        history.append(record)
        if log is not None:
            log(record)

    step = 0
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        n_seen = 0
        for batch in batch_iter(train_records, cfg.optim.batch_size, shuffle_seed=cfg.seed * 100_003 + epoch):
            out = forward(params, model, batch.audio, batch.visual)
            loss, terms = total_loss(out.logits_a, out.logits_v, out.logits_m, out.Z_a, out.Z_v,
                                     batch.y_a, batch.y_v, batch.y_m, cfg.loss)
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite loss {loss.item()} at step {step + 1} (epoch {epoch})")
            grads = backward(loss)
            adam_step(params, {k: grads.get(p) for k, p in params.items()}, state)
            for p in params.values():
                p.zero_grad()
            step += 1
            n = len(batch)
            n_seen += n
            sums["loss"] = sums.get("loss", 0.0) + loss.item() * n
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v * n
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break

        train_eval = evaluate(params, model, train_records, cfg.loss, cfg.eval_batch_size)
        emit({"step": step, "epoch": epoch, "split": "train",
              **{k: v / n_seen for k, v in sums.items()},
              "ACC": train_eval["ACC"], "AUC": train_eval["AUC"]})
        if val_records:
            val_eval = evaluate(params, model, val_records, cfg.loss, cfg.eval_batch_size)
            emit({"step": step, "epoch": epoch, "split": "val",
                  **{k: val_eval[k] for k in ("loss", "ce_audio", "ce_visual", "ce_multi", "alignment")},
                  "ACC": val_eval["ACC"], "AUC": val_eval["AUC"]})
            if val_eval["AUC"] is not None and val_eval["AUC"] > best_auc:
                best_auc, best_epoch, best = val_eval["AUC"], epoch, _snapshot(params)
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    if best is None:
        best, best_epoch = _snapshot(params), epoch
    return TrainResult(params, best, best_epoch, step, history)


def run_ablation(cfg: RunConfig, train_records, val_records, eval_records,
                 log: Callable[[str, dict], None] | None = None) -> list[dict]:
    """Train each attention variant with identical data and seed; evaluate the final parameters."""
    rows = []
    for label, self_kind, cross_kind in ABLATION_VARIANTS:
        variant = replace(cfg, model=cfg.model.with_variant(self_kind, cross_kind))
        result = train(variant, train_records, val_records,
                       log=(lambda rec, label=label: log(label, rec)) if log else None)
        metrics = evaluate(result.params, variant.model, eval_records, variant.loss, variant.eval_batch_size)
        rows.append({"model": label, "self": self_kind, "cross": cross_kind,
                     "ACC": metrics["ACC"], "AUC": metrics["AUC"], "steps": result.steps})
    return rows

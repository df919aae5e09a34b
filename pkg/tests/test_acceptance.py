"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line; all of them are printed in an
"acceptance criteria" section at the end of the pytest run. Also runnable
directly: ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import itertools
import json
import math
import sys

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES

from msct.attention import (
    AttentionConfig, AttentionWeights, dca, differential_attention, mha_cross, mha_self, mssa,
)
from msct.autograd import Tensor
from msct.checkpoint import load_checkpoint, save_checkpoint
from msct.cli import main as cli
from msct.data import export_dataset, generate_dataset, load_manifest
from msct.objectives import LossWeights, accuracy, alignment_loss, auc, cross_entropy, total_loss
from msct.training import evaluate
from msct.verification import run_suite

REQUIRED_CHECKS = ["matmul", "softmax_rows", "depthwise_conv2d", "layer_norm", "mha_self", "mha_cross",
                   "mssa", "dca", "cross_entropy", "alignment_loss", "total_loss", "model"]
ABLATION_LABELS = ["CA + SA", "CA + MSSA", "DCA + SA", "DCA + MSSA"]


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _weights(kind, cfg, rng):
    w = AttentionWeights.init(kind, cfg, rng, std=0.5, kernel_noise=0.3)
    for b in w.biases.values():
        b.data = rng.normal(0.0, 0.2, b.shape)
    return w


def _brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def desk_run(workdir):
    """cmd_train with preset desk on the default synthetic draw (16 per category, seed 7)."""
    out = workdir / "desk"
    code = cli(["train", "--preset", "desk", "--seed", "0", "--out", str(out)])
    assert code == 0
    return out


# 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_fidelity():
    worst: dict[str, float] = {}
    for res in run_suite(REQUIRED_CHECKS, seeds=10, eps=1e-5):
        worst[res.name] = max(worst.get(res.name, 0.0), res.max_rel_err)
    failing = {k: v for k, v in worst.items() if not v < 1e-4}
    ok = set(worst) == set(REQUIRED_CHECKS) and not failing
    top = max(worst, key=worst.get)
    report(1, "gradient fidelity", ok,
           f"{len(worst)} families x 10 seeds, eps 1e-5, worst {top} {worst[top]:.1e}"
           + (f", failing {sorted(failing)}" if failing else ""))


# 2 -------------------------------------------------------------------------

def test_criterion_2_degeneracy_oracles():
    cfg = AttentionConfig(C=16, h=4)
    errs = {"mssa_delta": 0.0, "row_sum": 0.0, "tied": 0.0, "cross_self": 0.0}
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x = Tensor(rng.normal(size=(2, 8, 16)))
        x_b = Tensor(rng.normal(size=(2, 8, 16)))

        w = _weights("mssa", cfg, rng)
        for k in w.kernels:
            size = k.shape[-1]
            ker = np.zeros(k.shape)
            ker[:, size // 2, size // 2] = 1.0
            k.data = ker
        errs["mssa_delta"] = max(errs["mssa_delta"],
                                 np.abs(mssa(x, w, cfg).data - mha_self(x, w, cfg).data).max())

        wd = _weights("dca", cfg, rng)
        diff, _ = differential_attention(x, x_b, wd, cfg)
        errs["row_sum"] = max(errs["row_sum"], np.abs(diff.data.sum(axis=-1)).max())
        wd.weights["q_cross"], wd.biases["q_cross"] = wd.weights["q"], wd.biases["q"]
        wd.biases["o"].data = np.zeros(16)
        errs["tied"] = max(errs["tied"], np.abs(dca(x, x, wd, cfg).data).max())

        ws = _weights("sa", cfg, rng)
        errs["cross_self"] = max(errs["cross_self"],
                                 np.abs(mha_cross(x, x, ws, cfg).data - mha_self(x, ws, cfg).data).max())
    ok = (errs["mssa_delta"] <= 1e-12 and errs["row_sum"] <= 1e-12 and errs["tied"] <= 1e-10
          and errs["cross_self"] <= 1e-12)
    report(2, "degeneracy oracles", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


# 3 -------------------------------------------------------------------------

def _frames(vec):
    z = np.zeros((1, 3, 2))
    z[0, 0] = [3.0, -1.0]
    z[0, 1:] = np.reshape(vec, (2, 2))
    return Tensor(z)


def test_criterion_3_loss_formulas():
    ce_err = max(abs(cross_entropy(Tensor([[0.0, 0.0]]), [y]).item() - math.log(2)) for y in (0, 1))
    cases = [  # (x_a, x_v, y, expected)
        ([1, 2, 3, 4], [1, 2, 3, 4], 1, 0.0),
        ([1, 0, 0, 0], [0, 1, 0, 0], 0, 0.0),
        ([1, 0, 0, 0], [0, 1, 0, 0], 1, 1.0),
        ([1, 2, 3, 4], [-1, -2, -3, -4], 0, 0.0),
    ]
    align_err = max(abs(alignment_loss(_frames(a), _frames(v), [y]).item() - e) for a, v, y, e in cases)

    rng = np.random.default_rng(3)
    y_a, y_v = np.array([1, 0, 1, 0]), np.array([1, 1, 0, 0])
    y_m = y_a & y_v
    total_err = 0.0
    for _ in range(100):
        la, lv, lm = (Tensor(rng.normal(size=(4, 2))) for _ in range(3))
        Z_a, Z_v = Tensor(rng.normal(size=(4, 5, 3))), Tensor(rng.normal(size=(4, 5, 3)))
        w = rng.uniform(0, 2, size=4)
        total, _ = total_loss(la, lv, lm, Z_a, Z_v, y_a, y_v, y_m, LossWeights(*w))
        ref = (w[0] * cross_entropy(la, y_a).item() + w[1] * cross_entropy(lv, y_v).item()
               + w[2] * cross_entropy(lm, y_m).item() + w[3] * alignment_loss(Z_a, Z_v, y_m).item())
        total_err = max(total_err, abs(total.item() - ref))
    ok = ce_err <= 1e-12 and align_err <= 1e-12 and total_err <= 1e-12
    report(3, "loss formula oracles", ok,
           f"CE uniform {ce_err:.1e}, alignment cases {align_err:.1e}, total over 100 weightings {total_err:.1e}")


# 4 -------------------------------------------------------------------------

def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = rng.integers(0, 8, n) / 7.0  # coarse grid so ties occur
        if auc(scores, labels) != _brute_auc(scores, labels):
            mismatches += 1
    hand = [
        (accuracy([1, 0, 1, 1], [1, 1, 1, 0]), 0.5),
        (accuracy([0, 0, 1], [0, 0, 1]), 1.0),
        (accuracy([1, 0], [0, 1]), 0.0),
        (accuracy([1, 1, 0, 0, 1], [1, 0, 0, 0, 0]), 3 / 5),
    ]
    acc_ok = all(a == b for a, b in hand)
    report(4, "metric oracles", mismatches == 0 and acc_ok,
           f"AUC exact on {200 - mismatches}/200 random sets with ties, accuracy hand counts {'ok' if acc_ok else 'wrong'}")


# 5 -------------------------------------------------------------------------

def test_criterion_5_end_to_end_learning(desk_run, workdir):
    records = [json.loads(line) for line in (desk_run / "metrics.jsonl").read_text().splitlines()]
    train = [r for r in records if r["split"] == "train"]
    hits = [r["step"] for r in train if r["ACC"] == 1.0 and r["step"] <= 300]
    last_step = train[-1]["step"]

    held_out = workdir / "heldout"
    assert cli(["gen-data", "--n", "1", "--n-test", "64", "--seed", "1007", "--out", str(held_out)]) == 0
    eval_dir = workdir / "eval5"
    assert cli(["eval", "--checkpoint", str(desk_run / "final.ckpt"), "--data", str(held_out / "manifest.csv"),
                "--split", "test", "--out", str(eval_dir)]) == 0
    metrics = json.loads((eval_dir / "eval_test.json").read_text())
    ok = bool(hits) and last_step <= 300 and metrics["n"] == 256 and metrics["AUC"] >= 0.90
    report(5, "end-to-end learning", ok,
           f"train ACC 1.0 first at step {hits[0] if hits else 'never'} of {last_step}; "
           f"held-out AUC {metrics['AUC']:.4f} on {metrics['n']} samples (seed 1007)")


# 6 -------------------------------------------------------------------------

def test_criterion_6_ablation_harness(workdir):
    first, second = workdir / "ablate1", workdir / "ablate2"
    assert cli(["ablate", "--preset", "desk", "--seed", "0", "--out", str(first)]) == 0
    assert cli(["ablate", "--preset", "desk", "--seed", "0", "--out", str(second)]) == 0
    rows = json.loads((first / "ablation.json").read_text())["rows"]
    repeat = json.loads((second / "ablation.json").read_text())["rows"]
    labels_ok = [r["model"] for r in rows] == ABLATION_LABELS
    deterministic = rows == repeat

    mismatched = []
    for row in rows:
        run = workdir / f"single-{row['self']}-{row['cross']}"
        assert cli(["train", "--preset", "desk", "--seed", "0", "--self", row["self"], "--cross", row["cross"],
                    "--out", str(run)]) == 0
        assert cli(["eval", "--checkpoint", str(run / "final.ckpt"), "--split", "test", "--out", str(run)]) == 0
        single = json.loads((run / "eval_test.json").read_text())
        if (single["ACC"], single["AUC"]) != (row["ACC"], row["AUC"]):
            mismatched.append(row["model"])
    ok = labels_ok and deterministic and not mismatched
    summary = "; ".join(f"{r['model']} ACC {r['ACC']:.3f} AUC {r['AUC']:.3f}" for r in rows)
    report(6, "ablation harness", ok,
           f"4 rows {'labelled' if labels_ok else 'MISLABELLED'}, repeat run {'identical' if deterministic else 'DIFFERS'}, "
           f"independent pipeline mismatches {mismatched or 'none'}; {summary}")


# 7 -------------------------------------------------------------------------

def test_criterion_7_serialization(desk_run, workdir):
    data = generate_dataset(16, seed=7, n_val_per_category=4, n_test_per_category=8)
    manifest = export_dataset(data, workdir / "roundtrip")
    data_ok = load_manifest(manifest) == data

    params, cfg, _ = load_checkpoint(desk_run / "final.ckpt")
    before = evaluate(params, cfg, data.test)
    resaved = save_checkpoint(workdir / "resaved.ckpt", params, cfg)
    after = evaluate(load_checkpoint(resaved)[0], cfg, data.test)
    ckpt_ok = json.dumps(before, sort_keys=True) == json.dumps(after, sort_keys=True)
    report(7, "serialization", data_ok and ckpt_ok,
           f"dataset round-trip {'equal' if data_ok else 'DIFFERS'} ({len(data)} samples), "
           f"checkpoint reload eval {'bit-identical' if ckpt_ok else 'DIFFERS'}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

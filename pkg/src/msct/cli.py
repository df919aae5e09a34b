"""``msct`` command line: gen-data, train, eval, ablate, gradcheck, export-embeddings.

Exit codes: 0 success, 1 verification failure or diverged training,
2 usage/configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import CATEGORIES, ManifestError, export_dataset, generate_dataset, load_manifest
from .training import (
    RunConfig,
    TrainingDivergedError,
    evaluate,
    load_config,
    predict_records,
    preset,
    resolve_data,
    run_ablation,
    train,
)
from .verification import CHECKS, run_suite

logger = logging.getLogger("msct")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {value}")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be a non-negative integer, got {value}")
    return value


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; values are overridden by flags")
    p.add_argument("--preset", choices=("desk", "paper"), help="named base configuration (default desk)")
    p.add_argument("--seed", type=int, help="model init / shuffling seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--max-steps", type=_positive_int)
    p.add_argument("--self", dest="self_attention", choices=("sa", "mssa"))
    p.add_argument("--cross", dest="cross_attention", choices=("ca", "dca"))
    p.add_argument("--data", help="manifest.csv to use instead of synthetic data")


def run_config(args) -> RunConfig:
    """Preset, then config file, then flags."""
    cfg = preset(args.preset or "desk")
    if getattr(args, "config", None):
        try:
            cfg = load_config(args.config, cfg)
        except (OSError, ValueError, TypeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if args.preset:
            # an explicit --preset still wins for the model section
            cfg = replace(cfg, model=preset(args.preset).model)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out:
        updates["out"] = args.out
    if args.epochs is not None:
        updates["epochs"] = args.epochs
    if getattr(args, "max_steps", None) is not None:
        updates["max_steps"] = args.max_steps
    cfg = replace(cfg, **updates)
    if args.self_attention or args.cross_attention:
        cfg = replace(cfg, model=cfg.model.with_variant(args.self_attention or cfg.model.self_attention,
                                                        args.cross_attention or cfg.model.cross_attention))
    if getattr(args, "data", None):
        cfg = replace(cfg, data=replace(cfg.data, manifest=args.data))
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = run_config(args)
    m, d = cfg.model, cfg.data
    dataset = generate_dataset(
        args.n, T=m.T, C_a=m.C_a, C_v_feat=m.C_v_feat,
        noise_sigma=d.noise_sigma if args.noise is None else args.noise,
        seed=d.seed if args.seed is None else args.seed,
        n_val_per_category=args.n_val, n_test_per_category=args.n_test,
        d_latent=d.d_latent, smoothing_window=d.smoothing_window, persistence=d.persistence,
        embedding_seed=d.embedding_seed,
    )
    out = Path(cfg.out if args.out is None else args.out)
    manifest = export_dataset(dataset, out)
    print(f"wrote {manifest}")
    for split in ("train", "val", "test"):
        records = dataset[split]
        if records:
            counts = {c: sum(r.category == c for r in records) for c in CATEGORIES}
            print(f"{split}: {len(records)} samples " + " ".join(f"{c}={n}" for c, n in counts.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config(args)
    data = resolve_data(cfg.data, cfg.model)
    if not data.train:
        raise UsageError("training split is empty")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    with open(out / "metrics.jsonl", "w") as log_fh:
        def log(record):
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            logger.info("epoch %d step %d %s loss=%.4f ACC=%.4f", record["epoch"], record["step"],
                        record["split"], record["loss"], record["ACC"])

        result = train(cfg, data.train, data.val, log=log)
    # the output directory is left out so identical runs give identical files
    run = {k: v for k, v in cfg.to_dict().items() if k != "out"}
    meta = {"run": run, "steps": result.steps}
    save_checkpoint(out / "final.ckpt", result.params, cfg.model, meta)
    save_checkpoint(out / "best.ckpt", result.best_params, cfg.model, {**meta, "best_epoch": result.best_epoch})
    last = [h for h in result.history if h["split"] == "train"][-1]
    print(f"trained {result.steps} steps; final train ACC={last['ACC']:.4f} AUC={last['AUC']}")
    print(f"wrote {out / 'final.ckpt'}, {out / 'best.ckpt'}, {out / 'metrics.jsonl'}")
    return EXIT_OK


def _eval_records(args, cfg_from_ckpt: dict, model):
    """Records for ``args.split`` from --data or the checkpoint's synthetic config."""
    if args.data:
        data = load_manifest(args.data)
    else:
        base = RunConfig.from_dict(cfg_from_ckpt) if cfg_from_ckpt else preset("desk")
        data = resolve_data(base.data, model)
    records = data[args.split]
    if not records:
        raise UsageError(f"split {args.split!r} is empty")
    return records


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def cmd_eval(args) -> int:
    params, model, meta = _load_ckpt(args.checkpoint)
    records = _eval_records(args, meta.get("run"), model)
    try:
        metrics = evaluate(params, model, records)
    except ValueError as exc:
        raise UsageError(f"checkpoint and data do not match: {exc}") from exc
    metrics = {"split": args.split, "checkpoint": str(args.checkpoint), **metrics}
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if args.out:
        _write_json(Path(args.out) / f"eval_{args.split}.json", metrics)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = run_config(args)
    data = resolve_data(cfg.data, cfg.model)
    eval_records = data[args.split]
    if not data.train or not eval_records:
        raise UsageError(f"need non-empty train and {args.split!r} splits")
    rows = run_ablation(cfg, data.train, data.val, eval_records)
    out = Path(cfg.out)
    _write_json(out / "ablation.json", {"split": args.split, "seed": cfg.seed, "rows": rows})
    lines = ["| Model | ACC | AUC |", "|---|---|---|"]
    for row in rows:
        auc_text = "n/a" if row["AUC"] is None else f"{100 * row['AUC']:.2f}"
        lines.append(f"| {row['model']} | {100 * row['ACC']:.2f} | {auc_text} |")
    table = "\n".join(lines)
    (out / "ablation.md").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    names = args.only or list(CHECKS)
    if args.inject_fault and args.inject_fault not in CHECKS:
        raise UsageError(f"unknown check {args.inject_fault!r}")
    results, failed = [], []
    for res in run_suite(names, seeds=args.seeds, eps=args.eps, inject_fault=args.inject_fault):
        ok = res.max_rel_err < args.rtol
        results.append({**res.to_dict(), "passed": ok})
        if not ok:
            failed.append(res)
    summary = {}
    for name in names:
        errs = [r["max_rel_err"] for r in results if r["check"] == name]
        summary[name] = max(errs)
        status = "PASS" if summary[name] < args.rtol else "FAIL"
        print(f"{status} {name:<18} max rel err {summary[name]:.2e} over {args.seeds} seeds")
    report = {"eps": args.eps, "seeds": args.seeds, "rtol": args.rtol,
              "summary": summary, "results": results,
              "failed": sorted({r.name for r in failed})}
    if args.out:
        _write_json(Path(args.out) / "gradcheck.json", report)
    print(f"eps={args.eps} seeds={args.seeds} rtol={args.rtol}: "
          + ("all checks passed" if not failed else f"FAILED: {', '.join(report['failed'])}"))
    return EXIT_FAIL if failed else EXIT_OK


def cmd_export_embeddings(args) -> int:
    params, model, meta = _load_ckpt(args.checkpoint)
    records = _eval_records(args, meta.get("run"), model)
    try:
        r = predict_records(params, model, records)
    except ValueError as exc:
        raise UsageError(f"checkpoint and data do not match: {exc}") from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"embeddings_{args.split}.csv"
    C = model.C
    header = (["sample_id", "category"] + [f"cls_audio_{i}" for i in range(C)]
              + [f"cls_visual_{i}" for i in range(C)])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for sid, cat, row in zip(r["sample_ids"], r["categories"], r["embeddings"]):
            writer.writerow([sid, cat] + [repr(float(v)) for v in row])
    print(f"wrote {len(records)} rows x {len(header)} columns to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msct", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as manifest + feature files")
    _common(p)
    p.add_argument("--n", type=_positive_int, required=True, help="training samples per category")
    p.add_argument("--n-val", type=_nonneg_int, default=0, help="validation samples per category")
    p.add_argument("--n-test", type=_nonneg_int, default=0, help="test samples per category")
    p.add_argument("--noise", type=float, help="feature noise sigma")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write checkpoints plus metrics.jsonl")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ACC/AUC and per-category counts for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="manifest.csv (default: the checkpoint's synthetic data config)")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train CA+SA, CA+MSSA, DCA+SA, DCA+MSSA with shared seed/data")
    _common(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="central-difference gradient checks")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seeds", type=_positive_int, default=10)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.add_argument("--only", nargs="+", choices=list(CHECKS), help="subset of checks")
    p.add_argument("--inject-fault", metavar="CHECK", help=argparse.SUPPRESS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="CSV of concatenated CLS embeddings per sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"msct {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, ValueError) as exc:
        print(f"msct {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"msct {args.command}: training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"msct {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

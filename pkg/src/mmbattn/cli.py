"""Command-line entry points: train, evaluate, ablate, sweep, gradcheck, synth."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig, load_run_config, load_schema, load_synth_spec
from .data import (Batch, FieldSchema, Vocabulary, build_vocab_rows, encode_rows,
                   hash_split, load_dataset, read_table, save_dataset,
                   synth_generate, synth_write_csv)
from .errors import ConfigError, MMBAttnError
from .gradcheck import ABLATION_TOGGLES, run_gradcheck
from .model import TowerConfig, build
from .seeding import derive_seed
from .training import MetricsReport, eval_thread_count, evaluate, train

GRADCHECK_TOL = 1e-4

# Table-2-style ablation rows: display name, toggle slug
ABLATION_ROWS = (
    ("DNN", "base"),
    ("DNN + Mean", "mean"),
    ("DNN + Max", "max"),
    ("DNN + Bit-wise", "bitwise"),
    ("DNN + Max + Mean", "max_mean"),
    ("DNN + Max + Mean + Bit-wise", "max_mean_bitwise"),
)
_TOGGLES_BY_SLUG = dict(ABLATION_TOGGLES)


@dataclass
class PreparedData:
    schema: FieldSchema
    vocab: Vocabulary
    train: Batch
    valid: Batch
    test: Batch
    truth: object | None = None

    def digests(self) -> dict[str, str]:
        return {"train": self.train.digest(), "valid": self.valid.digest(),
                "test": self.test.digest()}


def prepare_data(cfg: RunConfig) -> PreparedData:
    if cfg.values["data.synth"] is not None:
        spec = load_synth_spec(cfg.path("data.synth"))
        train_b, valid_b, test_b, truth = synth_generate(spec)
        return PreparedData(spec.schema(), spec.vocabulary(),
                            train_b, valid_b, test_b, truth)

    schema = load_schema(cfg.path("data.schema"))
    cache_dir = cfg.values["data.cache_dir"]
    if cache_dir is not None:
        cached = _load_cached(cfg, cache_dir, schema)
        if cached is not None:
            return cached

    if cfg.values["data.file"] is not None:
        header, rows = read_table(cfg.path("data.file"), schema.delimiter)
        tr_idx, va_idx, te_idx = hash_split(len(rows))
        parts = [[rows[i] for i in idx] for idx in (tr_idx, va_idx, te_idx)]
    else:
        tables = [read_table(cfg.path(key), schema.delimiter)
                  for key in ("data.train", "data.valid", "data.test")]
        header = tables[0][0]
        parts = [rows for _, rows in tables]

    vocab = build_vocab_rows(header, parts[0], schema)
    splits = [encode_rows(header, rows, schema, vocab) for rows in parts]
    prepared = PreparedData(schema, vocab, *splits)
    if cache_dir is not None:
        _save_cached(cfg, cache_dir, prepared)
    return prepared


def _cache_paths(cfg: RunConfig, cache_dir: str) -> dict[str, Path]:
    import hashlib

    data_lines = [line for line in cfg.canonical_lines()
                  if line.startswith("data.") and not line.startswith("data.cache_dir")]
    key = hashlib.sha256("\n".join(data_lines).encode()).hexdigest()[:16]
    base = cfg.base_dir / cache_dir if not Path(cache_dir).is_absolute() else Path(cache_dir)
    return {split: base / f"{key}_{split}.mmbd" for split in ("train", "valid", "test")}


def _load_cached(cfg, cache_dir, schema) -> PreparedData | None:
    paths = _cache_paths(cfg, cache_dir)
    if not all(p.exists() for p in paths.values()):
        return None
    # the vocab must come from the same rows the fresh path uses: the
    # train partition
    if cfg.values["data.file"] is not None:
        header, rows = read_table(cfg.path("data.file"), schema.delimiter)
        train_idx, _, _ = hash_split(len(rows))
        rows = [rows[i] for i in train_idx]
    else:
        header, rows = read_table(cfg.path("data.train"), schema.delimiter)
    vocab = build_vocab_rows(header, rows, schema)
    return PreparedData(schema, vocab, load_dataset(paths["train"]),
                        load_dataset(paths["valid"]), load_dataset(paths["test"]))


def _save_cached(cfg, cache_dir, prepared: PreparedData) -> None:
    paths = _cache_paths(cfg, cache_dir)
    next(iter(paths.values())).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(prepared.train, paths["train"])
    save_dataset(prepared.valid, paths["valid"])
    save_dataset(prepared.test, paths["test"])


# -- single run ------------------------------------------------------------


def run_single(cfg: RunConfig, seed: int, out_dir: Path,
               prepared: PreparedData) -> MetricsReport:
    """Train one seed; writes metrics.jsonl, checkpoint.mmbc, run_info.json."""
    out_dir.mkdir(parents=True, exist_ok=True)
    model_seed = cfg.model_seed if cfg.model_seed is not None \
        else derive_seed(seed, "model-init")
    model = build(prepared.schema, prepared.vocab, cfg.embedding_dim,
                  cfg.attn_config(), TowerConfig(cfg.hidden_sizes), model_seed)
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        report = train(model, prepared.train, prepared.valid, prepared.test,
                       cfg.train_config(), run_seed=seed,
                       emit=lambda rec: fh.write(json.dumps(rec, sort_keys=True) + "\n"),
                       eval_threads=eval_thread_count())
    digest = cfg.digest(seed)
    ckpt.save_checkpoint(out_dir / "checkpoint.mmbc", model.registry, digest)
    info = {
        "seed": seed,
        "config_digest": digest.hex(),
        "canonical_config": cfg.canonical_lines((seed,)),
        "data_digest": prepared.digests(),
        "test_auc": report.auc,
        "test_logloss": report.logloss,
    }
    (out_dir / "run_info.json").write_text(
        json.dumps(info, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    report.model = model  # type: ignore[attr-defined]
    return report


def _out_dir(cfg: RunConfig, args) -> Path:
    if cfg.out is not None:
        p = Path(cfg.out)
        return p if p.is_absolute() else Path.cwd() / p
    return Path.cwd() / "runs" / Path(args.config).stem


def _summarize(reports: dict[int, MetricsReport]) -> dict[str, float]:
    aucs = np.array([r.auc for r in reports.values()])
    lls = np.array([r.logloss for r in reports.values()])
    return {"auc_mean": float(aucs.mean()) if aucs.size else float("nan"),
            "auc_std": float(aucs.std()),
            "logloss_mean": float(lls.mean()),
            "logloss_std": float(lls.std())}


def _run_all_seeds(cfg: RunConfig, out_dir: Path,
                   prepared: PreparedData) -> dict[int, MetricsReport]:
    return {seed: run_single(cfg, seed, out_dir / f"seed_{seed}", prepared)
            for seed in cfg.seeds}


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    prepared = prepare_data(cfg)
    out_dir = _out_dir(cfg, args)
    reports = _run_all_seeds(cfg, out_dir, prepared)
    for seed, rep in reports.items():
        print(f"seed {seed}: test auc {rep.auc:.5f} logloss {rep.logloss:.5f}")
    s = _summarize(reports)
    print(f"test auc {s['auc_mean']:.5f} ± {s['auc_std']:.5f} | "
          f"logloss {s['logloss_mean']:.5f} ± {s['logloss_std']:.5f} "
          f"({len(reports)} seeds)")
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "test_auc", "test_logloss"])
        for seed, rep in reports.items():
            writer.writerow([seed, repr(rep.auc), repr(rep.logloss)])
        writer.writerow(["mean", repr(s["auc_mean"]), repr(s["logloss_mean"])])
        writer.writerow(["std", repr(s["auc_std"]), repr(s["logloss_std"])])
    return 0


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    seed = cfg.seeds[0]
    path = Path(args.checkpoint) if args.checkpoint else \
        _out_dir(cfg, args) / f"seed_{seed}" / "checkpoint.mmbc"
    prepared = prepare_data(cfg)
    model_seed = cfg.model_seed if cfg.model_seed is not None \
        else derive_seed(seed, "model-init")
    model = build(prepared.schema, prepared.vocab, cfg.embedding_dim,
                  cfg.attn_config(), TowerConfig(cfg.hidden_sizes), model_seed)
    ckpt.restore_model(model, ckpt.load_checkpoint(path),
                       expected_digest=cfg.digest(seed), force=args.force)
    report = evaluate(model, prepared.test, threads=eval_thread_count())
    print(json.dumps({"split": "test", "auc": report.auc,
                      "logloss": report.logloss, "n": report.n}, sort_keys=True))
    return 0


def _toggle_overrides(slug: str) -> dict[str, str]:
    use_max, use_mean, use_bit = _TOGGLES_BY_SLUG[slug]
    return {"attn.use_max": "true" if use_max else "false",
            "attn.use_mean": "true" if use_mean else "false",
            "attn.use_bitwise": "true" if use_bit else "false"}


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    prepared = prepare_data(cfg)
    out_dir = _out_dir(cfg, args)
    rows = []
    base_auc = None
    for display, slug in ABLATION_ROWS:
        combo_cfg = cfg.override(_toggle_overrides(slug))
        reports = _run_all_seeds(combo_cfg, out_dir / slug, prepared)
        s = _summarize(reports)
        if slug == "base":
            base_auc = s["auc_mean"]
            impr = "Base"
        else:
            impr = f"{(s['auc_mean'] - base_auc) / base_auc * 100.0:.2f}%"
        rows.append({"model": display, "slug": slug, "impr": impr, **s})
    width = max(len(r["model"]) for r in rows)
    print(f"{'Model':<{width}}  {'AUC':>8}  {'Impr.':>7}  {'LogLoss':>8}")
    for r in rows:
        print(f"{r['model']:<{width}}  {r['auc_mean']:>8.5f}  {r['impr']:>7}  "
              f"{r['logloss_mean']:>8.5f}")
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "auc_mean", "auc_std", "impr",
                         "logloss_mean", "logloss_std"])
        for r in rows:
            writer.writerow([r["model"], repr(r["auc_mean"]), repr(r["auc_std"]),
                             r["impr"], repr(r["logloss_mean"]), repr(r["logloss_std"])])
    return 0


_SWEEP_KEYS = {"reduction_ratio": "attn.reduction_ratio",
               "embedding_dim": "model.embedding_dim"}


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    key = _SWEEP_KEYS[args.axis]
    values = [part.strip() for part in args.values.split(",") if part.strip()]
    if not values:
        raise ConfigError("--values must list at least one value")
    prepared = prepare_data(cfg)  # swept axes never affect data preparation
    out_dir = _out_dir(cfg, args)
    rows = []
    for value in values:
        run_cfg = cfg.override({key: value})
        reports = _run_all_seeds(run_cfg, out_dir / f"{args.axis}_{value}", prepared)
        rows.append({"value": value, **_summarize(reports)})
    print(f"{args.axis:>16}  {'AUC':>8}  {'LogLoss':>8}")
    for r in rows:
        print(f"{r['value']:>16}  {r['auc_mean']:>8.5f}  {r['logloss_mean']:>8.5f}")
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([args.axis, "auc_mean", "auc_std",
                         "logloss_mean", "logloss_std"])
        for r in rows:
            writer.writerow([r["value"], repr(r["auc_mean"]), repr(r["auc_std"]),
                             repr(r["logloss_mean"]), repr(r["logloss_std"])])
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_run_config(args.config, args.override, args.seed, args.out)
    prepared = prepare_data(cfg)
    if prepared.schema.n_fields > 4:
        raise ConfigError("gradcheck needs a tiny model: at most 4 fields")
    if cfg.embedding_dim > 3:
        raise ConfigError("gradcheck needs a tiny model: embedding_dim at most 3")
    batch = prepared.train.take(slice(0, min(8, prepared.train.n)))
    worst = run_gradcheck(prepared.schema, prepared.vocab, batch,
                          cfg.embedding_dim, TowerConfig(cfg.hidden_sizes),
                          cfg.attn_config().reduction_ratio, cfg.seeds[0])
    overall = 0.0
    for name in sorted(worst):
        print(f"{name:<24} max relative error {worst[name]:.3e}")
        overall = max(overall, worst[name])
    ok = overall < GRADCHECK_TOL
    print(f"overall max relative error {overall:.3e} "
          f"({'PASS' if ok else 'FAIL'}, tolerance {GRADCHECK_TOL:.0e})")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    spec = load_synth_spec(args.spec)
    counts = synth_write_csv(spec, args.out)
    print(f"wrote {counts['train']}/{counts['valid']}/{counts['test']} "
          f"train/valid/test rows to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    cp = ckpt.load_checkpoint(args.checkpoint)
    print(f"checkpoint {args.checkpoint}")
    print(f"config digest {cp.digest.hex()}")
    print(f"{len(cp.entries)} parameters, {cp.payload.size} values")
    for name, shape, offset in cp.entries:
        print(f"  {name:<24} shape {str(tuple(shape)):<16} offset {offset}")
    return 0


# -- parser -----------------------------------------------------------------


def _add_run_flags(sp) -> None:
    sp.add_argument("--config", required=True, help="run config file")
    sp.add_argument("--seed", type=int, action="append",
                    help="override run.seeds (repeatable)")
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--override", action="append", default=[],
                    metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    sp.add_argument("--force", action="store_true",
                    help="ignore checkpoint/config digest mismatches")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmbattn",
        description="CTR prediction with max-mean and bit-wise attention")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, func, extra in (
            ("train", cmd_train, None),
            ("evaluate", cmd_evaluate, "eval"),
            ("ablate", cmd_ablate, None),
            ("sweep", cmd_sweep, "sweep"),
            ("gradcheck", cmd_gradcheck, None)):
        sp = sub.add_parser(name)
        _add_run_flags(sp)
        if extra == "eval":
            sp.add_argument("--checkpoint", default=None,
                            help="checkpoint path (default: <out>/seed_<s>/checkpoint.mmbc)")
        if extra == "sweep":
            sp.add_argument("--axis", required=True, choices=sorted(_SWEEP_KEYS))
            sp.add_argument("--values", required=True,
                            help="comma-separated values to sweep")
        sp.set_defaults(func=func)

    sp = sub.add_parser("synth")
    sp.add_argument("--spec", required=True, help="synthetic-data spec file")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("inspect-checkpoint")
    sp.add_argument("checkpoint", help="checkpoint file to inspect")
    sp.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MMBAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: generate data, train, compare methods, and print
parameter accounting.

Every run writes a manifest (command, config hash, seed, inputs, timestamps)
into an append-only run directory named by the config hash and seed. Exit
codes: 1 for configuration or usage errors, 2 for data errors, 3 for a
numeric abort during training.

The output root defaults to ./runs and can be overridden with the
AEFS_OUT_ROOT environment variable or the --out flag.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DataError,
    SyntheticSpec,
    generate_synthetic,
    read_format_a,
    read_format_b,
    write_format_b,
)
from .embedding import delta_el, delta_pae, full_param_count
from .metrics import auc, emit_report, metrics_row, welch_t_test
from .selection import k_for
from .training import (
    ConfigError,
    NumericAbort,
    TrainConfig,
    apply_overrides,
    evaluate,
    parse_config_text,
    prepare,
    save_checkpoint,
    selection_stats,
    train,
)

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    # usage problems are configuration errors, not data errors
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _out_root(flag_value: str | None) -> Path:
    if flag_value:
        return Path(flag_value)
    return Path(os.environ.get("AEFS_OUT_ROOT", "runs"))


def _write_manifest(run_dir: Path, command: str, config_hash: str, seed: int,
                    inputs: list[str], status: str, started_at: str,
                    finished_at: str | None = None):
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "inputs": inputs,
        "output_dir": str(run_dir),
        "started_at": started_at,
        "finished_at": finished_at,
        "status": status,
        "version": __version__,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())


def _make_run_dir(root: Path, name: str, force: bool) -> Path:
    run_dir = root / name
    if run_dir.exists():
        if not force:
            raise ConfigError(
                f"run directory {run_dir} already exists; rerun with --force or a new seed")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _percent(frac: Fraction) -> str:
    return f"{float(frac) * 100:g}%"


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_fields=args.fields,
        n_informative=args.informative,
        vocab_size=args.vocab,
        n_records=args.records,
        teacher_seed=args.seed,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    _write_manifest(out_dir, "synth", f"synth-{spec.teacher_seed}", spec.teacher_seed,
                    [], "running", started)
    sd = generate_synthetic(spec)
    write_format_b(sd.records, sd.schema, out_dir / "data.csv", out_dir / "schema.json")
    labels = [r.label for r in sd.records]
    teacher_auc = auc(sd.teacher_logits, labels) if spec.n_informative else 0.5
    meta = {
        "n_fields": spec.n_fields,
        "n_informative": spec.n_informative,
        "vocab_size": spec.vocab_size,
        "n_records": spec.n_records,
        "teacher_seed": spec.teacher_seed,
        "informative_fields": sd.informative_fields,
        "teacher_auc": teacher_auc,
        "positive_rate": float(np.mean(labels)),
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_manifest(out_dir, "synth", f"synth-{spec.teacher_seed}", spec.teacher_seed,
                    [], "done", started, _now())
    print(f"wrote {spec.n_records} records, {spec.n_fields} fields to {out_dir}")
    print(f"teacher_auc: {teacher_auc:.4f}")
    return 0


# ---------------------------------------------------------------------------
# train

def _load_config(args) -> TrainConfig:
    config = TrainConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        config = parse_config_text(path.read_text())
    overrides = {
        "method": args.method,
        "mode": args.mode,
        "seed": args.seed,
        "r": args.r,
        "d1": args.d1,
        "d2": args.d2,
        "backbone_main": args.backbone_main,
        "backbone_aux": args.backbone_aux,
        "pretrain_epochs": args.pretrain_epochs,
        "max_epochs": args.max_epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "min_freq": args.min_freq,
    }
    if args.no_eal:
        overrides["enable_eal"] = False
    if args.no_pal:
        overrides["enable_pal"] = False
    if args.no_topk_reweight:
        overrides["enable_topk_reweight"] = False
    return apply_overrides(config, overrides)


def _load_dataset(data_dir: Path):
    data_path = data_dir / "data.csv"
    schema_path = data_dir / "schema.json"
    if data_path.exists() and schema_path.exists():
        records, schema = read_format_b(data_path, schema_path)
    else:
        tsv = sorted(data_dir.glob("*.tsv")) + sorted(data_dir.glob("*.txt"))
        if not tsv:
            raise DataError(f"no data.csv+schema.json or .tsv file under {data_dir}")
        records, schema = read_format_a(tsv[0])
    informative = None
    meta_path = data_dir / "meta.json"
    if meta_path.exists():
        informative = json.loads(meta_path.read_text()).get("informative_fields")
    return records, schema, informative


def _run_single(config: TrainConfig, data, run_dir: Path,
                dump_selection: bool = False) -> dict:
    result = train(data, config)
    dump = run_dir / "selections.jsonl" if dump_selection else None
    test_metrics = evaluate(result.fitted, data.test, config.batch_size,
                            selection_dump_path=dump)

    n = data.n_fields
    dpae = delta_pae(config.d1, config.d2, Fraction(k_for(n, config.r), n)) \
        if config.method == "aefs" else Fraction(0)
    row = metrics_row(config.method, test_metrics, delta_pae=float(dpae), seed=config.seed)
    if config.method == "aefs" and data.informative_fields:
        stats = selection_stats(result.fitted, data.test, config.batch_size,
                                informative_fields=data.informative_fields)
        row["selection_precision"] = stats["precision"]

    (run_dir / "config.txt").write_text(config.to_text())
    (run_dir / "train_report.jsonl").write_text(result.report.to_jsonl())
    (run_dir / "vocab_sizes.json").write_text(json.dumps(
        {"vocab_sizes": data.vocab.vocab_sizes, "total_ids": data.vocab.total_ids},
        sort_keys=True) + "\n")
    save_checkpoint(result.fitted, run_dir / "model.ckpt")
    emit_report([row], run_dir / "report.jsonl", run_dir / "report.txt")
    return row


def cmd_train(args) -> int:
    config = _load_config(args)
    data_dir = Path(args.data)
    root = _out_root(args.out)
    run_dir = _make_run_dir(root, f"{config.config_hash()}-seed{config.seed}", args.force)
    started = _now()
    _write_manifest(run_dir, "train", config.config_hash(), config.seed,
                    [str(data_dir)], "running", started)
    records, schema, informative = _load_dataset(data_dir)
    data = prepare(records, schema, seed=config.seed, min_freq=config.min_freq,
                   informative_fields=informative)
    row = _run_single(config, data, run_dir, dump_selection=args.dump_selection)
    _write_manifest(run_dir, "train", config.config_hash(), config.seed,
                    [str(data_dir)], "done", started, _now())
    n_fields_known = "delta_pae" in row and row["delta_pae"] is not None
    print(f"run dir: {run_dir}")
    print(f"test AUC: {row['auc']:.4f}  Logloss: {row['logloss']:.4f}")
    if n_fields_known:
        print(f"delta_pae: {100 * row['delta_pae']:g}%")
    if "selection_precision" in row:
        print(f"selection precision: {row['selection_precision']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# compare

def cmd_compare(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if len(methods) < 2:
        raise ConfigError("compare needs at least 2 methods")
    if len(seeds) < 2:
        raise ConfigError("compare needs at least 2 seeds for significance")

    base = _load_config(args)
    data_dir = Path(args.data)
    root = _out_root(args.out)
    tag = base.config_hash()
    run_dir = _make_run_dir(root, f"compare-{tag}-{'-'.join(methods)}", args.force)
    started = _now()
    _write_manifest(run_dir, "compare", tag, seeds[0], [str(data_dir)], "running", started)

    records, schema, informative = _load_dataset(data_dir)
    prepared_by_seed: dict[int, object] = {}
    per_method: dict[str, list[dict]] = {}
    for method in methods:
        per_method[method] = []
        for seed in seeds:
            config = apply_overrides(base, {"method": method, "seed": seed})
            if seed not in prepared_by_seed:
                prepared_by_seed[seed] = prepare(records, schema, seed=seed,
                                                 min_freq=config.min_freq,
                                                 informative_fields=informative)
            cell_dir = run_dir / f"{method}-seed{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            row = _run_single(config, prepared_by_seed[seed], cell_dir)
            per_method[method].append(row)
            print(f"{method} seed {seed}: auc={row['auc']:.4f}", flush=True)

    rows = []
    for method, cells in per_method.items():
        aucs = [c["auc"] for c in cells]
        logs = [c["logloss"] for c in cells]
        rows.append({
            "method": method,
            "auc": float(np.mean(aucs)),
            "auc_std": float(np.std(aucs)),
            "logloss": float(np.mean(logs)),
            "delta_pae": cells[0]["delta_pae"],
            "n_seeds": len(cells),
        })
    emit_report(rows, run_dir / "report.jsonl", run_dir / "report.txt")

    ttests = []
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            p = welch_t_test([c["auc"] for c in per_method[a]],
                             [c["auc"] for c in per_method[b]])
            ttests.append({"method_a": a, "method_b": b, "p_auc": p})
    (run_dir / "ttests.jsonl").write_text(
        "".join(json.dumps(t, sort_keys=True) + "\n" for t in ttests))

    with open(run_dir / "report.txt", "a") as fh:
        fh.write("\npairwise Welch p-values (AUC)\n")
        for t in ttests:
            fh.write(f"{t['method_a']} vs {t['method_b']}: p={t['p_auc']:.4f}\n")

    _write_manifest(run_dir, "compare", tag, seeds[0], [str(data_dir)], "done",
                    started, _now())
    print((run_dir / "report.txt").read_text())
    return 0


# ---------------------------------------------------------------------------
# params

def cmd_params(args) -> int:
    vocab_path = Path(args.vocab_file)
    if not vocab_path.exists():
        raise DataError(f"vocab file {vocab_path} not found")
    obj = json.loads(vocab_path.read_text())
    if "vocab_sizes" in obj:
        total_ids = sum(obj["vocab_sizes"])
    elif "total_ids" in obj:
        total_ids = int(obj["total_ids"])
    else:
        raise DataError("vocab file needs a 'vocab_sizes' list or a 'total_ids' count")

    r = Fraction(args.r).limit_denominator(10**6)
    main_full = full_param_count([total_ids], args.d1)
    aux_full = full_param_count([total_ids], args.d2)
    dpae = delta_pae(args.d1, args.d2, r)
    del_ = delta_el(r)
    expected_activated = main_full * r + aux_full

    print(f"total feature ids: {total_ids}")
    print(f"main embedding parameters (d1={args.d1}): {main_full} ({main_full / 1e6:.2f}M)")
    print(f"aux embedding parameters (d2={args.d2}): {aux_full} ({aux_full / 1e6:.2f}M)")
    print(f"expected activated parameters at keep rate {float(r):g}: "
          f"{float(expected_activated):.0f} ({float(expected_activated) / 1e6:.2f}M)")
    print(f"delta_pae: {_percent(dpae)}")
    print(f"delta_el: {_percent(del_)}")
    return 0


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="aefs", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="generate a planted-signal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--fields", type=int, default=16)
    p.add_argument("--informative", type=int, default=8)
    p.add_argument("--vocab", type=int, default=50)
    p.add_argument("--records", type=int, default=200_000)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=cmd_synth)

    def add_train_flags(p):
        p.add_argument("--data", required=True, help="dataset directory")
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--method", choices=["none", "randomhalf", "adafs", "aefs"])
        p.add_argument("--mode", choices=["soft", "hard"])
        p.add_argument("--r", type=float)
        p.add_argument("--d1", type=int)
        p.add_argument("--d2", type=int)
        p.add_argument("--backbone-main", dest="backbone_main",
                       choices=["mlp", "deepfm", "dcn"])
        p.add_argument("--backbone-aux", dest="backbone_aux",
                       choices=["mlp", "deepfm", "dcn"])
        p.add_argument("--no-eal", action="store_true")
        p.add_argument("--no-pal", action="store_true")
        p.add_argument("--no-topk-reweight", action="store_true")
        p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--min-freq", dest="min_freq", type=int)
        p.add_argument("--out", help="output root (default $AEFS_OUT_ROOT or ./runs)")
        p.add_argument("--force", action="store_true",
                       help="allow writing into an existing run directory")

    p = sub.add_parser("train", help="train one method and evaluate on the test split")
    add_train_flags(p)
    p.add_argument("--dump-selection", action="store_true",
                   help="write per-instance selections for the test split")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("compare", help="train a method grid and report significance")
    add_train_flags(p)
    p.add_argument("--methods", required=True, help="comma-separated method list")
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("params", help="print embedding parameter accounting")
    p.add_argument("--vocab-file", dest="vocab_file", required=True,
                   help="JSON with 'vocab_sizes' or 'total_ids'")
    p.add_argument("--d1", type=int, default=32)
    p.add_argument("--d2", type=int, default=4)
    p.add_argument("--r", type=float, default=0.5)
    p.set_defaults(fn=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

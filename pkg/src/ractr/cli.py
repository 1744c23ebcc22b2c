"""Command-line front end: index building, ad-hoc retrieval, training,
evaluation, and the variant ablation, driven by a JSON config file.

Config keys (all optional unless a command needs them):
  data        {path, label_col, feature_cols, timestamp_col?, delimiter?, ratios?}
  dataset     path to an encoded .ratd file (alternative to data)
  index       path to a prebuilt .rati file
  checkpoint  path to a .ratm checkpoint (evaluate)
  out_dir     where a command writes its artifacts
  user_field  field name used for long-tail segment reports
  train       TrainConfig fields

Command-line flags override config values. Exit codes: 0 ok, 1 usage error,
2 data error, 3 internal failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import traceback

import numpy as np

from . import __version__
from .data import CsvSpec, Dataset, load_csv, load_dataset
from .errors import DataError, UsageError
from .model import VARIANTS, load_checkpoint, save_checkpoint
from .retrieval import RetrievalIndex, index_from_dataset, load_index, retrieve, save_index
from .synthetic import majority_task, singleton_pool, write_csv
from .training import TrainConfig, ablate, evaluate, train, write_ablation_csv


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; route through UsageError for exit 1."""

    def error(self, message):
        raise UsageError(message)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from None


def _load_any_dataset(cfg: dict, dataset_flag: str | None = None) -> Dataset:
    if dataset_flag:
        return load_dataset(dataset_flag)
    if "dataset" in cfg:
        return load_dataset(cfg["dataset"])
    if "data" in cfg:
        d = cfg["data"]
        if "path" not in d:
            raise UsageError("config data section needs a 'path'")
        return load_csv(d["path"], CsvSpec.from_dict(d))
    raise UsageError("config needs a 'data' or 'dataset' entry")


def _resolve_train_cfg(cfg: dict, args, base: dict | None = None) -> TrainConfig:
    d = dict(base or {})
    d.update(cfg.get("train", {}))
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        d["k"] = args.k
    if getattr(args, "variant", None) is not None:
        d["variant"] = args.variant
    return TrainConfig.from_dict(d)


def _out_dir(cfg: dict, args) -> str:
    out = getattr(args, "out", None) or cfg.get("out_dir")
    if not out:
        raise UsageError("no output directory: pass --out or set out_dir in the config")
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(obj, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _segments_list(args) -> list[str] | None:
    raw = getattr(args, "segments", None)
    if not raw:
        return None
    out = [s.strip() for s in raw.split(",") if s.strip()]
    if not out:
        raise UsageError("--segments given but empty")
    return out


def cmd_build_index(args) -> int:
    cfg = _load_config(args.config)
    ds = _load_any_dataset(cfg, args.dataset)
    out = args.out or os.path.join(cfg.get("out_dir", "."), "index.rati")
    t0 = time.perf_counter()
    index = index_from_dataset(ds)
    build_ms = (time.perf_counter() - t0) * 1000.0
    save_index(index, out)
    print(f"pool records: {index.pool_size}")
    print(f"distinct terms: {len(index.postings)}")
    print(f"build time: {build_ms:.1f} ms")
    print(f"index written to {out}")
    return 0


def _encode_query(ds: Dataset, fields: dict) -> np.ndarray:
    by_name = {fs.name: i for i, fs in enumerate(ds.schema)}
    ids = np.zeros(ds.num_fields, dtype=np.int64)
    for name, value in fields.items():
        if name not in by_name:
            raise DataError(f"query field {name!r} not in dataset schema")
        f = by_name[name]
        ids[f] = ds.schema[f].id_for(str(value))
    return ids


def cmd_retrieve(args) -> int:
    cfg = _load_config(args.config)
    index_path = args.index or cfg.get("index")
    if not index_path:
        raise UsageError("no index: pass --index or set 'index' in the config")
    index = load_index(index_path)
    ds = _load_any_dataset(cfg, args.dataset)
    if ds.num_fields != index.num_fields:
        raise DataError(f"index has {index.num_fields} fields, dataset schema has {ds.num_fields}")
    k = args.k if args.k is not None else cfg.get("train", {}).get("k", 5)

    if args.queries == "-":
        lines = sys.stdin.read().splitlines()
    else:
        try:
            with open(args.queries, "r", encoding="utf-8") as f:
                lines = f.read().splitlines()
        except OSError as e:
            raise UsageError(f"cannot read queries {args.queries}: {e}") from None

    out_f = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                q = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"queries line {lineno}: invalid JSON: {e}") from None
            if not isinstance(q, dict) or "fields" not in q:
                raise DataError(f"queries line {lineno}: expected an object with a 'fields' key")
            ids = _encode_query(ds, q["fields"])
            # ad-hoc queries score against the whole pool
            res = retrieve(index, ids, k, eligibility="all")
            neighbors = [int(index.record_indices[p]) if p >= 0 else -1
                         for p in res.neighbor_indices]
            rec = {
                "neighbors": neighbors,
                "scores": [float(s) for s in res.scores[:res.n_real]],
                "mask": [bool(m) for m in res.mask],
            }
            out_f.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if out_f is not sys.stdout:
            out_f.close()
    return 0


def _echo_run_config(out: str, command: str, cfg: dict, tcfg: TrainConfig) -> None:
    _write_json({
        "command": command,
        "config": cfg,
        "train": tcfg.to_dict(),
        "seed": tcfg.seed,
    }, os.path.join(out, "run_config.json"))


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    tcfg = _resolve_train_cfg(cfg, args)
    out = _out_dir(cfg, args)
    ds = _load_any_dataset(cfg)
    index = index_from_dataset(ds)

    res = train(ds, index, tcfg)

    summary = {
        "seed": tcfg.seed,
        "variant": tcfg.variant,
        "epochs_run": len(res.log),
        "best_epoch": res.best_epoch,
        "best_valid_auc": res.best_valid_auc,
        "stopped_early": res.stopped_early,
        "test_auc": None,
        "test_logloss": None,
        "test_n": None,
    }
    try:
        report = evaluate(res.model, ds, index, tcfg, split="test", neighbors=res.neighbors)
        summary["test_auc"] = report.auc
        summary["test_logloss"] = report.logloss
        summary["test_n"] = report.n
    except DataError as e:
        print(f"test evaluation skipped: {e}", file=sys.stderr)

    _echo_run_config(out, "train", cfg, tcfg)
    save_checkpoint(res.model, os.path.join(out, "checkpoint.ratm"),
                    extra_config={"train": tcfg.to_dict()})
    with open(os.path.join(out, "train_log.jsonl"), "w", encoding="utf-8") as f:
        for rec in res.log:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _write_json(summary, os.path.join(out, "summary.json"))

    print(f"epochs run: {len(res.log)} (early stop: {res.stopped_early})")
    print(f"best epoch: {res.best_epoch}  valid auc: {res.best_valid_auc:.6f}")
    if summary["test_auc"] is not None:
        print(f"test auc: {summary['test_auc']:.6f}  test logloss: {summary['test_logloss']:.6f}")
    print(f"artifacts written to {out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    ckpt_path = args.checkpoint or cfg.get("checkpoint")
    if not ckpt_path:
        raise UsageError("no checkpoint: pass --checkpoint or set 'checkpoint' in the config")
    model, ckpt_cfg = load_checkpoint(ckpt_path)
    tcfg = _resolve_train_cfg(cfg, args, base=ckpt_cfg.get("train"))
    ds = _load_any_dataset(cfg)
    index_path = args.index or cfg.get("index")
    index = load_index(index_path) if index_path else index_from_dataset(ds)
    if index.pool_size != ds.train_end:
        raise DataError(f"index covers {index.pool_size} records, train slice has {ds.train_end}")

    segments = _segments_list(args)
    report = evaluate(model, ds, index, tcfg, split=args.split,
                      segments=segments, user_field=cfg.get("user_field"))
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    tcfg = _resolve_train_cfg(cfg, args)
    out = _out_dir(cfg, args)
    ds = _load_any_dataset(cfg)
    index = index_from_dataset(ds)

    rows = ablate(ds, index, tcfg)
    _echo_run_config(out, "ablate", cfg, tcfg)
    csv_path = os.path.join(out, "ablation.csv")
    write_ablation_csv(rows, csv_path)

    print(f"{'variant':<10}{'auc':>10}{'logloss':>10}{'params':>10}{'runtime_us':>12}")
    for r in rows:
        print(f"{r.variant:<10}{r.auc:>10.4f}{r.logloss:>10.4f}{r.params:>10}{r.runtime_us:>12.1f}")
    print(f"table written to {csv_path}")
    return 0


def cmd_synth(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    if args.kind == "majority":
        ds = majority_task(n_history_groups=args.history_groups,
                           n_eval_groups=args.eval_groups,
                           eval_train_records=args.eval_train_records, seed=args.seed)
    else:
        ds = singleton_pool(seed=args.seed)
    csv_path = os.path.join(args.out_dir, "data.csv")
    write_csv(ds, csv_path)

    n = len(ds)
    config = {
        "data": {
            "path": csv_path,
            "label_col": "label",
            "timestamp_col": "ts",
            "feature_cols": [fs.name for fs in ds.schema],
            "ratios": [ds.train_end / n, (ds.valid_end - ds.train_end) / n,
                       (n - ds.valid_end) / n],
        },
        "out_dir": os.path.join(args.out_dir, "run"),
        "user_field": "key",
        "train": {"seed": args.seed},
    }
    cfg_path = os.path.join(args.out_dir, "config.json")
    _write_json(config, cfg_path)
    print(f"records: {n} (train {ds.train_end}, valid {ds.valid_end - ds.train_end}, "
          f"test {n - ds.valid_end})")
    print(f"csv written to {csv_path}")
    print(f"config written to {cfg_path}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="ractr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ractr {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    bi = sub.add_parser("build-index", help="build a retrieval index over the train slice")
    bi.add_argument("--config", help="JSON config file")
    bi.add_argument("--dataset", help="encoded .ratd dataset (overrides config)")
    bi.add_argument("--out", help="output index path (default out_dir/index.rati)")
    bi.set_defaults(func=cmd_build_index)

    rt = sub.add_parser("retrieve", help="score ad-hoc queries against an index")
    rt.add_argument("--config", help="JSON config file")
    rt.add_argument("--index", help="index .rati path (overrides config)")
    rt.add_argument("--dataset", help="encoded .ratd dataset for the schema (overrides config)")
    rt.add_argument("--queries", default="-",
                    help="JSONL file of {\"fields\": {...}} objects; - for stdin")
    rt.add_argument("--k", type=int, help="neighbors per query")
    rt.add_argument("--out", help="output JSONL path (default stdout)")
    rt.set_defaults(func=cmd_retrieve)

    tr = sub.add_parser("train", help="train a model and write checkpoint + log")
    tr.add_argument("--config", required=True, help="JSON config file")
    tr.add_argument("--out", help="output directory (overrides config out_dir)")
    tr.add_argument("--seed", type=int, help="training seed (overrides config)")
    tr.add_argument("--k", type=int, help="neighbors per target (overrides config)")
    tr.add_argument("--variant", choices=VARIANTS, help="block variant (overrides config)")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("evaluate", help="evaluate a checkpoint on a split")
    ev.add_argument("--config", required=True, help="JSON config file")
    ev.add_argument("--checkpoint", help=".ratm checkpoint (overrides config)")
    ev.add_argument("--index", help="index .rati path (default: rebuild from dataset)")
    ev.add_argument("--split", default="test", choices=("train", "valid", "test"))
    ev.add_argument("--segments", help="comma-separated tail<percent> segment names")
    ev.add_argument("--k", type=int, help="neighbors per target (overrides config)")
    ev.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    ev.add_argument("--out", help="also write the report JSON here")
    ev.set_defaults(func=cmd_evaluate)

    ab = sub.add_parser("ablate", help="train all four variants and write the comparison CSV")
    ab.add_argument("--config", required=True, help="JSON config file")
    ab.add_argument("--out", help="output directory (overrides config out_dir)")
    ab.add_argument("--seed", type=int, help="training seed (overrides config)")
    ab.add_argument("--k", type=int, help="neighbors per target (overrides config)")
    ab.set_defaults(func=cmd_ablate)

    sy = sub.add_parser("synth", help="generate a synthetic dataset plus a ready config")
    sy.add_argument("--out-dir", required=True, help="directory for data.csv and config.json")
    sy.add_argument("--kind", default="majority", choices=("majority", "singleton"))
    sy.add_argument("--seed", type=int, default=42)
    sy.add_argument("--history-groups", type=int, default=240)
    sy.add_argument("--eval-groups", type=int, default=400)
    sy.add_argument("--eval-train-records", type=int, default=4)
    sy.set_defaults(func=cmd_synth)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:  # --help / --version
        return 0 if e.code in (0, None) else 1
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 3
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())

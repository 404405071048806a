"""Command-line entry point: ``ffda {gen,train,eval,bench,ablate,attn}``.

Every subcommand reads an optional JSON ``--config`` and lets flags override
individual fields.  The merged config is written next to the outputs so a run
can be replayed with ``--config <out>/config.json``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attention import write_attention_csv
from .checkpoint import load_checkpoint
from .data import (Benchmark, DomainSplit, load_suite, make_base_dataset, make_eval_suite,
                   save_suite)
from .errors import CheckpointError, ConfigError, FFDAError, NumericError, SamplerError
from .methods import METHODS, check_compatible, get_method
from .metrics import (DOMAIN_VALUES, SIZE_VALUES, ablation_grid, attention_histogram,
                      evaluate_model, format_table, results_table, write_json)
from .train import TrainConfig, train

EXIT_OK, EXIT_MISSING, EXIT_MISMATCH, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("ffda")


class MissingInput(FFDAError):
    pass


def default_seed() -> int:
    return int(os.environ.get("XDA_SEED", "0"))


GEN_DEFAULTS = {"seed": None, "num_domains": 60, "num_classes": 10, "pool_per_class": 16,
                "val_tasks": 100, "test_tasks": 420, "suite_seed": 1}
EVAL_DEFAULTS = {"methods": "erm,bn,cxda", "suite": "meta_test", "ft_steps": 10, "ft_lr": None,
                 "threads": 1}


def _merge(defaults: dict, args: argparse.Namespace, keys) -> dict:
    cfg = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise MissingInput(f"config file {path} not found")
        cfg.update(json.loads(path.read_text()))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if cfg.get("seed") is None:
        cfg["seed"] = default_seed()
    return cfg


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _open_bench(directory) -> tuple[Benchmark, dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise MissingInput(f"no benchmark at {directory} (run `ffda gen` first)")
    manifest = json.loads(manifest_path.read_text())
    return Benchmark.from_config(manifest["benchmark"]), manifest


def _suite(directory, name: str):
    path = Path(directory) / "suites" / name
    if not (path / "index.json").exists():
        raise MissingInput(f"suite {name!r} not found under {directory}")
    return load_suite(path)


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    cfg = _merge(GEN_DEFAULTS, args, GEN_DEFAULTS)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"refusing to overwrite non-empty {out} (use --force)", file=sys.stderr)
        return EXIT_MISMATCH
    out.mkdir(parents=True, exist_ok=True)
    split = DomainSplit.by_ratio(cfg["num_domains"])
    if not split.meta_val or not split.meta_test:
        raise ConfigError(f"{cfg['num_domains']} domains leave an empty val or test split")
    bench = Benchmark(cfg["seed"], cfg["num_classes"], cfg["pool_per_class"], split)

    images, labels = make_base_dataset(cfg["seed"], cfg["num_classes"])
    base = out / "base"
    base.mkdir(exist_ok=True)
    images.astype("<f4").tofile(base / "images.bin")
    labels.astype("<i8").tofile(base / "labels.bin")
    checksums = {"base/images.bin": _sha256(base / "images.bin"),
                 "base/labels.bin": _sha256(base / "labels.bin")}
    counts = {"base_images": int(len(images)), "train_domains": len(split.meta_train),
              "val_domains": len(split.meta_val), "test_domains": len(split.meta_test)}
    for name, domains, n in (("meta_val", split.meta_val, cfg["val_tasks"]),
                             ("meta_test", split.meta_test, cfg["test_tasks"])):
        # small splits keep the 100-image support but spread it over fewer domains
        nd = min(5, len(domains))
        suite = make_eval_suite(bench, domains, n, cfg["suite_seed"] + (name == "meta_test"),
                                nd, 100 // nd)
        checksums[f"suites/{name}"] = save_suite(suite, out / "suites" / name,
                                                 {"split": name, "seed": cfg["suite_seed"]})
        counts[f"{name}_tasks"] = n
    manifest = {"seed": cfg["seed"], "benchmark": bench.config(), "counts": counts,
                "checksums": checksums,
                "domains": {d: bench.spec(d).to_dict() for d in split.all()}}
    write_json(manifest, out / "manifest.json")
    write_json(cfg, out / "config.json")
    print(f"benchmark written to {out}: {counts['train_domains']}/{counts['val_domains']}/"
          f"{counts['test_domains']} domains")
    return EXIT_OK


# ---------------------------------------------------------------- train

TRAIN_KEYS = ("method", "lr", "momentum", "weight_decay", "epochs", "steps_per_epoch",
              "eval_every", "seed", "n_domains", "per_domain", "n_query", "bench")


def cmd_train(args) -> int:
    defaults = TrainConfig().to_dict()
    defaults.update(seed=None, bench=None)
    cfg = _merge(defaults, args, TRAIN_KEYS)
    if args.no_augment:
        cfg["augment"] = False
    if not cfg.get("bench"):
        raise MissingInput("--bench is required")
    bench, _ = _open_bench(cfg["bench"])
    val = _suite(cfg["bench"], "meta_val")
    tc = TrainConfig.from_dict(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(cfg, out / "config.json")
    res = train(tc, bench, out, val_suite=val, progress=not args.quiet)
    final = res.history[-1]
    summary = {"method": tc.method, "seed": tc.seed, "best_val": res.best_val,
               "best_epoch": res.best_epoch, "final_val_avg": final["val_avg"],
               "final_val_w10": final["val_w10"], "checkpoint": str(res.best)}
    write_json(summary, out / "summary.json")
    print(f"final val avg {final['val_avg']:.1f} w10 {final['val_w10']:.1f}; "
          f"best {res.best_val:.1f} at epoch {res.best_epoch} -> {res.best}")
    return EXIT_OK


# ---------------------------------------------------------------- eval / bench


def _load_models(paths) -> dict:
    """``{method_tag: {seed: model}}`` from a list of checkpoint paths."""
    if not paths:
        raise MissingInput("at least one --ckpt is required")
    models: dict = {}
    for i, p in enumerate(paths):
        if not Path(p).exists():
            raise MissingInput(f"checkpoint {p} not found")
        model, header = load_checkpoint(p)
        seed = header.get("seed")
        models.setdefault(model.method, {})[i if seed is None else seed] = model
    return models


def _models_for(method_name: str, models: dict) -> dict:
    method = get_method(method_name)
    found = models.get(method.checkpoint)
    if not found:
        have = ", ".join(sorted(models)) or "none"
        raise CheckpointError(f"method {method_name!r} needs a {method.checkpoint!r} checkpoint; "
                              f"got {have}")
    for m in found.values():
        check_compatible(method, m)
    return found


def _task_kwargs(cfg: dict, model) -> dict:
    kw = {}
    if get_method(cfg["_method"]).needs_backprop:
        kw["ft_steps"] = int(cfg["ft_steps"])
        kw["ft_lr"] = float(cfg["ft_lr"]) if cfg.get("ft_lr") else 0.1 * model.train_lr
    return kw


def cmd_eval(args) -> int:
    cfg = _merge(EVAL_DEFAULTS, args, ("methods", "suite", "ft_steps", "ft_lr", "threads"))
    _open_bench(args.bench)
    suite = _suite(args.bench, cfg["suite"])
    models = _load_models(args.ckpt)
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    plan = {m: _models_for(m, models) for m in methods}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json({**cfg, "bench": args.bench, "ckpt": args.ckpt}, out / "config.json")
    reports = {}
    for name, per_seed in plan.items():
        reports[name] = []
        for seed, model in per_seed.items():
            kw = _task_kwargs({**cfg, "_method": name}, model)
            rep = evaluate_model(name, model, suite, seed, cfg["suite"],
                                 threads=int(cfg["threads"]), **kw)
            rep.write_csv(out / f"{name}_seed{seed}.csv")
            reports[name].append(rep)
    rows = results_table(reports)
    table = format_table(rows)
    (out / "table.txt").write_text(table + "\n")
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["method", "W10%", "Avg"])
        w.writeheader()
        w.writerows(rows)
    write_json({name: [r.summary() for r in reps] for name, reps in reports.items()},
               out / "summary.json")
    print(table)
    return EXIT_OK


BENCH_COLUMNS = ("method", "steps", "median_ms", "mean_ms", "accuracy")
WARMUP_TASKS = 5


def cmd_bench(args) -> int:
    _open_bench(args.bench)
    suite = _suite(args.bench, args.suite)
    if len(suite) < args.tasks + WARMUP_TASKS:
        raise ConfigError(f"suite has {len(suite)} tasks; bench needs {args.tasks + WARMUP_TASKS}")
    suite = suite[:args.tasks + WARMUP_TASKS]
    models = _load_models(args.ckpt)
    rows = []
    for name in [m.strip() for m in args.methods.split(",") if m.strip()]:
        model = next(iter(_models_for(name, models).values()))
        steps_list = args.ft_steps if get_method(name).needs_backprop else [0]
        for steps in steps_list:
            kw = _task_kwargs({"_method": name, "ft_steps": steps, "ft_lr": args.ft_lr}, model)
            rep = evaluate_model(name, model, suite, 0, args.suite, **kw)
            t = np.asarray(rep.times_ms[WARMUP_TASKS:])
            acc = float(np.mean(rep.accuracies[WARMUP_TASKS:]))
            rows.append({"method": name, "steps": steps, "median_ms": f"{np.median(t):.3f}",
                         "mean_ms": f"{t.mean():.3f}", "accuracy": f"{acc:.1f}"})
            print(",".join(str(rows[-1][c]) for c in BENCH_COLUMNS), flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------- ablate / attn


def ablation_domains(bench: Benchmark, count: int = 20) -> list:
    """Unseen domain ids beyond the split, so any domain count up to ``count`` is sampleable."""
    start = max(bench.split.all()) + 1
    return list(range(start, start + count))


def cmd_ablate(args) -> int:
    bench, _ = _open_bench(args.bench)
    models = _load_models(args.ckpt)
    model = next(iter(_models_for(args.method, models).values()))
    values = args.values or (DOMAIN_VALUES if args.axis == "domains" else SIZE_VALUES)
    domains = (bench.split.meta_test if args.domains == "test"
               else ablation_domains(bench, max(20, max(values) if args.axis == "domains" else 20)))
    kw = _task_kwargs({"_method": args.method, "ft_steps": 10, "ft_lr": None}, model)
    cells = ablation_grid(args.method, model, bench, domains, args.axis, values, args.tasks,
                          args.seed if args.seed is not None else default_seed(), **kw)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cols = ("axis", "value", "n_domains", "per_domain", "average", "worst_decile", "error")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for c in cells:
            w.writerow([getattr(c, k) if getattr(c, k) is not None else "" for k in cols])
            print(f"{c.axis}={c.value}: avg {c.average} w10 {c.worst_decile} {c.error}".rstrip())
    return EXIT_OK


def cmd_attn(args) -> int:
    _open_bench(args.bench)
    suite = _suite(args.bench, args.suite)
    models = _load_models(args.ckpt)
    model = next(iter(_models_for("cxda", models).values()))
    records: list = []
    evaluate_model("cxda", model, suite, 0, args.suite, records=records)
    hist = attention_histogram(records, bins=args.bins)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hist.write_csv(out / "attention_hist.csv")
    if args.records:
        write_attention_csv(records, out / "attention_weights.csv")
    write_json({"mean_same": hist.mean_same, "mean_diff": hist.mean_diff,
                "count_same": hist.count_same, "count_diff": hist.count_diff},
               out / "attention_summary.json")
    print(f"mean same-domain weight {hist.mean_same:.6f}, different-domain {hist.mean_diff:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ffda", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic benchmark and fixed eval suites")
    g.add_argument("--out", required=True)
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--num-domains", dest="num_domains", type=int)
    g.add_argument("--num-classes", dest="num_classes", type=int)
    g.add_argument("--pool-per-class", dest="pool_per_class", type=int)
    g.add_argument("--val-tasks", dest="val_tasks", type=int)
    g.add_argument("--test-tasks", dest="test_tasks", type=int)
    g.add_argument("--suite-seed", dest="suite_seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="episodic training with best-by-val checkpointing")
    t.add_argument("--bench")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--method", choices=("cxda", "erm", "cml"))
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps", dest="steps_per_epoch", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--n-domains", dest="n_domains", type=int)
    t.add_argument("--per-domain", dest="per_domain", type=int)
    t.add_argument("--n-query", dest="n_query", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate checkpoints and emit a results table")
    e.add_argument("--bench", required=True)
    e.add_argument("--ckpt", action="append", default=[])
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--methods")
    e.add_argument("--suite", choices=("meta_val", "meta_test"))
    e.add_argument("--ft-steps", dest="ft_steps", type=int)
    e.add_argument("--ft-lr", dest="ft_lr", type=float)
    e.add_argument("--threads", type=int)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time per task for each method")
    b.add_argument("--bench", required=True)
    b.add_argument("--ckpt", action="append", default=[])
    b.add_argument("--out", required=True)
    b.add_argument("--methods", default="erm,bn,cxda,ft_em,ft_im")
    b.add_argument("--suite", default="meta_test", choices=("meta_val", "meta_test"))
    b.add_argument("--tasks", type=int, default=100)
    b.add_argument("--ft-steps", dest="ft_steps", type=_int_list, default=[10])
    b.add_argument("--ft-lr", dest="ft_lr", type=float)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="accuracy vs domain count or support size")
    a.add_argument("--bench", required=True)
    a.add_argument("--ckpt", action="append", default=[])
    a.add_argument("--out", required=True)
    a.add_argument("--method", default="cxda", choices=sorted(METHODS))
    a.add_argument("--axis", required=True, choices=("domains", "support_size"))
    a.add_argument("--values", type=_int_list)
    a.add_argument("--tasks", type=int, default=100)
    a.add_argument("--domains", default="fresh", choices=("fresh", "test"),
                   help="sample from unseen fresh domains or the test split")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    h = sub.add_parser("attn", help="same- vs different-domain attention histograms")
    h.add_argument("--bench", required=True)
    h.add_argument("--ckpt", action="append", default=[])
    h.add_argument("--out", required=True)
    h.add_argument("--suite", default="meta_test", choices=("meta_val", "meta_test"))
    h.add_argument("--bins", type=int, default=50)
    h.add_argument("--records", action="store_true", help="also dump every attention weight")
    h.set_defaults(func=cmd_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, ConfigError, SamplerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())

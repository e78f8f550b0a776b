"""Command-line interface: ``credtrans {train,evaluate,predict,explain,paramcount}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 IO/data error.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .data import (
    CATEGORICAL, CONTINUOUS, Dataset, apply_split, default_synthetic_spec, generate_synthetic,
    load_csv, random_split_ids, read_split_index,
)
from .errors import ConfigError, DataError, NumericalError
from .explain import export, export_instances, extract_layers, summarize
from .kernels import BACKEND
from .model import CredibilityTransformer, ModelConfig
from .persistence import load_model, save_model, schema_to_dict
from .tokenizer import Covariate, Schema
from .training import (
    Ensemble, OptimizerConfig, evaluate, fit, null_deviance, train_ensemble,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4

TOP_KEYS = {"mode", "schema", "model", "optimizer", "data", "run"}
DATA_KEYS = {"path", "synthetic", "columns", "split", "test_fraction", "split_seed"}
SYNTH_KEYS = {"n", "seed"}
RUN_KEYS = {"seeds", "ensemble_size", "out", "workers"}
COVARIATE_KEYS = {"name", "kind", "embedding", "bins", "levels", "n_levels", "other_level"}


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    mode: str
    covariates: list[dict]
    model: ModelConfig
    optimizer: OptimizerConfig
    data: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [1])
    out: str = "runs"
    workers: int = 1

    def schema(self) -> Schema:
        covs = []
        for c in self.covariates:
            c = {k: v for k, v in c.items() if k != "n_levels"}
            covs.append(Covariate(**c))
        return Schema(covs, b=self.model.b)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "schema": {"covariates": self.covariates},
            "model": self.model.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "data": self.data,
            "run": {"seeds": self.seeds, "ensemble_size": len(self.seeds), "out": self.out,
                    "workers": self.workers},
        }


def _reject_unknown(block: dict, allowed: set, where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a mapping")
    unknown = set(block) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def parse_seeds(text) -> list[int]:
    """``"1,2,5"``, ``"1-20"`` or a list of ints."""
    items = text if isinstance(text, (list, tuple)) else str(text).split(",")
    seeds = []
    for item in map(str, items):
        m = re.fullmatch(r"\s*(\d+)\s*(?:-\s*(\d+)\s*)?", item)
        if m is None:
            raise ConfigError(f"cannot parse seeds {text!r}")
        lo = int(m.group(1))
        seeds.extend(range(lo, int(m.group(2) or lo) + 1))
    if not seeds:
        raise ConfigError("no seeds given")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    return seeds


def _typed(where: str, build, block):
    """Run a config constructor, reporting bad value types as config errors."""
    try:
        return build(block)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def resolve_config(raw: dict, args: argparse.Namespace | None = None) -> RunConfig:
    """Merge mode presets, the config file and command-line flags (in that order)."""
    raw = dict(raw or {})
    _reject_unknown(raw, TOP_KEYS, "config")
    mode = getattr(args, "mode", None) or raw.get("mode", "base")
    if mode not in ("base", "improved"):
        raise ConfigError(f"mode must be base or improved, got {mode!r}")

    schema = raw.get("schema") or {}
    _reject_unknown(schema, {"covariates"}, "schema")
    covariates = schema.get("covariates") or []
    if not covariates:
        raise ConfigError("schema.covariates is empty")
    for i, c in enumerate(covariates):
        _reject_unknown(c, COVARIATE_KEYS, f"schema.covariates[{i}]")
        if "name" not in c or "kind" not in c:
            raise ConfigError(f"schema.covariates[{i}] needs name and kind")

    model_block = dict(raw.get("model") or {})
    if getattr(args, "alpha", None) is not None:
        model_block["alpha"] = args.alpha
    preset = ModelConfig.improved() if mode == "improved" else ModelConfig.base()
    model = _typed("model", ModelConfig.from_dict, {**preset.to_dict(), **model_block})

    opt_block = dict(raw.get("optimizer") or {})
    opt_block.setdefault("preset", "adamw" if mode == "improved" else "nadam")
    optimizer = _typed("optimizer", OptimizerConfig.from_dict, opt_block)

    data = dict(raw.get("data") or {})
    _reject_unknown(data, DATA_KEYS, "data")
    if getattr(args, "data", None):
        data["path"] = args.data
        data.pop("synthetic", None)
    if getattr(args, "split", None):
        data["split"] = args.split
    if "synthetic" in data:
        _reject_unknown(data["synthetic"], SYNTH_KEYS, "data.synthetic")
    frac = data.get("test_fraction", 0.0)
    if not 0.0 <= float(frac) < 1.0:
        raise ConfigError("data.test_fraction must lie in [0, 1)")

    run = dict(raw.get("run") or {})
    _reject_unknown(run, RUN_KEYS, "run")
    if getattr(args, "seeds", None):
        seeds = parse_seeds(args.seeds)
    elif "seeds" in run:
        seeds = parse_seeds(run["seeds"])
        if "ensemble_size" in run and int(run["ensemble_size"]) != len(seeds):
            raise ConfigError("run.ensemble_size disagrees with the number of seeds")
    else:
        size = int(run.get("ensemble_size", 1))
        if size < 1:
            raise ConfigError("run.ensemble_size must be >= 1")
        seeds = list(range(1, size + 1))
    out = getattr(args, "out", None) or run.get("out", "runs")
    workers = int(getattr(args, "workers", None) or run.get("workers", 1))
    if workers < 1:
        raise ConfigError("run.workers must be >= 1")
    return RunConfig(mode, covariates, model, optimizer, data, seeds, str(out), workers)


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    return raw


# -------------------------------------------------------------------- data


def load_data(cfg: RunConfig, covariates=None) -> Dataset:
    pairs = covariates or [(c["name"], c["kind"]) for c in cfg.covariates]
    data = cfg.data
    if "path" in data:
        return load_csv(data["path"], pairs, data.get("columns"))
    if "synthetic" in data:
        synth = data["synthetic"]
        spec = default_synthetic_spec(int(synth.get("n", 20_000)))
        have = dict(spec.covariates)
        for name, kind in pairs:
            if have.get(name) != kind:
                raise ConfigError(f"synthetic data has no {kind} covariate {name!r}")
        return generate_synthetic(spec, int(synth.get("seed", 0)))
    raise ConfigError("data needs either path or synthetic (or pass --data)")


def split_data(cfg: RunConfig, data: Dataset) -> tuple[Dataset, Dataset | None]:
    if cfg.data.get("split"):
        learn, test = apply_split(data, read_split_index(cfg.data["split"]))
        return learn, (test if test.n else None)
    frac = float(cfg.data.get("test_fraction", 0.0))
    if frac > 0:
        ids = random_split_ids(data.n, frac, int(cfg.data.get("split_seed", 0)))
        return apply_split(data, ids)
    return data, None


def placeholder_data(cfg: RunConfig, n: int = 256) -> Dataset:
    """Stand-in rows with the configured level counts, for parameter counting."""
    cols = {}
    for c in cfg.covariates:
        if c["kind"] == CATEGORICAL:
            levels = c.get("levels")
            if levels is None:
                if "n_levels" not in c:
                    raise ConfigError(f"covariate {c['name']!r} needs levels or n_levels (or pass --data)")
                levels = [f"L{k}" for k in range(int(c["n_levels"]))]
            cols[c["name"]] = np.array([str(levels[i % len(levels)]) for i in range(n)])
        else:
            cols[c["name"]] = np.linspace(0.0, 1.0, n)
    return Dataset(cols, exposure=np.ones(n), counts=np.arange(n) % 2)


def check_levels(cfg: RunConfig, data: Dataset) -> None:
    for c in cfg.covariates:
        if c["kind"] == CATEGORICAL and "n_levels" in c:
            found = len(np.unique(data.columns[c["name"]]))
            if found != int(c["n_levels"]):
                raise ConfigError(f"covariate {c['name']!r}: config says n_levels={c['n_levels']}, "
                                  f"data has {found}")


def check_schema(model: CredibilityTransformer, data: Dataset) -> None:
    for cov in model.schema.covariates:
        col = data.columns.get(cov.name)
        if col is None:
            raise ConfigError(f"schema mismatch: data lacks covariate {cov.name!r}")
        is_numeric = np.issubdtype(np.asarray(col).dtype, np.number)
        if (cov.kind == CONTINUOUS) != is_numeric:
            raise ConfigError(f"schema mismatch: covariate {cov.name!r} is {cov.kind} in the model")


# ----------------------------------------------------------------- helpers


def x100(d: float | None):
    return None if d is None else round(100.0 * d, 3)


def mean_std(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        "mean": x100(float(arr.mean())),
        "std": x100(float(arr.std(ddof=1))) if arr.size >= 2 else None,
    }


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n")


def write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        for h in history:
            w.writerow([h["epoch"], repr(float(h["train_loss"])), repr(float(h["val_loss"]))])


def model_paths(items) -> list[Path]:
    """Model files from explicit paths or run directories (``run_*/model.json``)."""
    out = []
    for item in items:
        p = Path(item)
        if p.is_dir():
            found = sorted(p.glob("run_*/model.json"))
            if (p / "model.json").is_file():
                found.insert(0, p / "model.json")
            if not found:
                raise FileNotFoundError(f"no model.json under {p}")
            out.extend(found)
        else:
            out.append(p)
    return out


def load_members(items) -> tuple[list[CredibilityTransformer], list[dict]]:
    models, metas = [], []
    for p in model_paths(items):
        m, meta = load_model(p)
        meta["path"] = str(p)
        models.append(m)
        metas.append(meta)
    first = schema_to_dict(models[0].schema)
    for m, meta in zip(models[1:], metas[1:]):
        other = schema_to_dict(m.schema)
        if other != first:
            names = {c["name"] for c in first["covariates"]} ^ {c["name"] for c in other["covariates"]}
            field_name = sorted(names)[0] if names else "covariates"
            raise ConfigError(f"schema mismatch between ensemble members at field {field_name!r} ({meta['path']})")
    return models, metas


def _eval_block(model, learn: Dataset, test: Dataset | None) -> dict:
    return {
        "in_sample": x100(evaluate(model, learn)[0]),
        "out_of_sample": x100(evaluate(model, test)[0]) if test is not None else None,
    }


def results_report(members, learn, test, runs=None) -> dict:
    lam = learn.empirical_frequency
    report = {
        "data": {"learning": learn.summary(), "test": test.summary() if test is not None else None},
        "null_model": {
            "frequency": lam,
            "in_sample": x100(null_deviance(learn, lam)),
            "out_of_sample": x100(null_deviance(test, lam)) if test is not None else None,
        },
        "runs": [],
    }
    for k, m in enumerate(members):
        entry = _eval_block(m, learn, test)
        if runs is not None:
            run = runs[k]
            entry.update(seed=run.seed, best_epoch=run.best_epoch, epochs=len(run.history) - 1,
                         best_val_loss=x100(run.best_val_loss))
        report["runs"].append(entry)
    in_s = [r["in_sample"] / 100.0 for r in report["runs"]]
    report["summary"] = {"in_sample": mean_std(in_s)}
    if test is not None:
        report["summary"]["out_of_sample"] = mean_std([r["out_of_sample"] / 100.0 for r in report["runs"]])
    ens = Ensemble(list(members))
    report["ensemble"] = {"members": len(ens), **_eval_block(ens, learn, test)}
    return report


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = resolve_config(read_config(args.config), args)
    data = load_data(cfg)
    check_levels(cfg, data)
    learn, test = split_data(cfg, data)
    schema = cfg.schema()
    out = Path(cfg.out)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        ens = train_ensemble(schema, cfg.model, cfg.optimizer, learn, cfg.seeds, workers=cfg.workers)
        members, runs = ens.members, ens.runs
    else:
        members, runs = [], []
        for seed in cfg.seeds:
            model = CredibilityTransformer.build(schema, cfg.model, learn, seed)
            runs.append(fit(model, learn, cfg.optimizer, seed, log=log))
            members.append(model)
    for model, run in zip(members, runs):
        run_dir = out / f"run_{run.seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        save_model(run_dir / "model.json", model, history=run.history, seed=run.seed,
                   optimizer=cfg.optimizer.to_dict())
        write_history(run_dir / "history.csv", run.history)
    report = {
        "version": __version__,
        "command": "train",
        "backend": BACKEND,
        "config": cfg.to_dict(),
        "parameters": members[0].parameter_table(),
        **results_report(members, learn, test, runs),
    }
    write_json(out / "report.json", report)
    s = report["summary"]
    line = f"trained {len(members)} model(s); in-sample {s['in_sample']['mean']}"
    if "out_of_sample" in s:
        line += f", out-of-sample {s['out_of_sample']['mean']}"
    print(line + f" (x 10^-2); ensemble {report['ensemble']}; report at {out / 'report.json'}")
    return EXIT_OK


def _data_for_models(args, models) -> tuple[Dataset, Dataset, Dataset | None]:
    """Dataset for evaluate/predict/explain, from --config/--data/--split."""
    raw = read_config(args.config)
    if not raw:
        raw = {"schema": {"covariates": [{"name": c.name, "kind": c.kind} for c in models[0].schema.covariates]}}
    cfg = resolve_config(raw, argparse.Namespace(data=args.data, split=args.split))
    pairs = [(c.name, c.kind) for c in models[0].schema.covariates]
    data = load_data(cfg, pairs)
    for m in models:
        check_schema(m, data)
    return (data, *split_data(cfg, data))


def cmd_evaluate(args) -> int:
    models, metas = load_members(args.models)
    _, learn, test = _data_for_models(args, models)
    report = {"version": __version__, "command": "evaluate",
              "models": [m["path"] for m in metas], **results_report(models, learn, test)}
    out = Path(args.out or ".")
    write_json(out / "evaluation.json", report)
    with open(out / "evaluation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "in_sample", "out_of_sample"])
        for meta, r in zip(metas, report["runs"]):
            w.writerow([meta["path"], r["in_sample"], r["out_of_sample"]])
        w.writerow(["ensemble", report["ensemble"]["in_sample"], report["ensemble"]["out_of_sample"]])
        w.writerow(["null_model", report["null_model"]["in_sample"], report["null_model"]["out_of_sample"]])
    print(json.dumps({"ensemble": report["ensemble"], "null_model": report["null_model"]}))
    return EXIT_OK


def cmd_predict(args) -> int:
    models, _ = load_members(args.models)
    full, _, test = _data_for_models(args, models)
    data = test if (args.split and test is not None) else full
    mu = Ensemble(models).predict(data)
    out = Path(args.out) if args.out else None
    fh = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["id", "v", "mu", "v_mu"])
        for i in range(data.n):
            ident = data.ids[i]
            ident = ident.item() if isinstance(ident, np.generic) else ident
            w.writerow([ident, repr(float(data.exposure[i])), repr(float(mu[i])),
                        repr(float(data.exposure[i] * mu[i]))])
    finally:
        if out:
            fh.close()
    return EXIT_OK


def cmd_explain(args) -> int:
    models, _ = load_members([args.model])
    if len(models) != 1:
        raise ConfigError("explain takes exactly one model file")
    model = models[0]
    names = [c.name for c in model.schema.covariates]
    for name in args.scatter or ():
        if name not in names:
            raise ConfigError(f"unknown covariate {name!r} for scatter export")
    full, _, test = _data_for_models(args, models)
    data = test if (args.split and test is not None) else full
    out = Path(args.out or "explain")
    written = []
    for records in extract_layers(model, data):
        summary = summarize(records, data, scatter=args.scatter or ())
        target = out / f"layer_{records.layer}"
        if args.format == "json":
            written += export(summary, target / "summary.json", "json")
        else:
            written += export(summary, target, "csv")
        written.append(export_instances(records, data, target / "instances.csv"))
        print(f"layer {records.layer}: mean P {summary.mean_P:.4f} over {summary.count} instances")
    print(f"wrote {len(written)} files under {out}")
    return EXIT_OK


def cmd_paramcount(args) -> int:
    cfg = resolve_config(read_config(args.config), args)
    if args.data or "path" in cfg.data or "synthetic" in cfg.data:
        data = load_data(cfg)
        check_levels(cfg, data)
    else:
        data = placeholder_data(cfg)
    model = CredibilityTransformer.build(cfg.schema(), cfg.model, data, 0)
    table = model.parameter_table()
    if args.json:
        print(json.dumps(table, indent=2))
    else:
        width = max(len(k) for k in table)
        for k, v in table.items():
            print(f"{k:<{width}}  {v:>10,d}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="credtrans", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--data", help="CSV file (overrides data.path)")
        sp.add_argument("--split", help="test-set row ids, one 0-based id per line")
        sp.add_argument("--out", help="output directory or file")

    t = sub.add_parser("train", help="fit one model per seed and write a report")
    common(t, config_required=True)
    t.add_argument("--seeds", help="e.g. 1,2,3 or 1-20")
    t.add_argument("--alpha", type=float, help="credibility parameter in [0, 1]")
    t.add_argument("--mode", choices=("base", "improved"))
    t.add_argument("--workers", type=int, help="parallel training processes")
    t.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses to stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="deviance of models and their ensemble")
    e.add_argument("models", nargs="+", help="model.json files or run directories")
    common(e)
    e.set_defaults(func=cmd_evaluate)

    pr = sub.add_parser("predict", help="per-instance predictions as CSV (id, v, mu, v_mu)")
    pr.add_argument("models", nargs="+", help="model.json files or run directories")
    common(pr)
    pr.set_defaults(func=cmd_predict)

    x = sub.add_parser("explain", help="CLS attention summaries per layer")
    x.add_argument("model", help="one model.json file")
    common(x)
    x.add_argument("--format", choices=("csv", "json"), default="csv")
    x.add_argument("--scatter", nargs="*", default=[], help="covariates for (value, attention) pairs")
    x.set_defaults(func=cmd_explain)

    c = sub.add_parser("paramcount", help="parameter table of the configured architecture")
    c.add_argument("--config", required=True)
    c.add_argument("--data")
    c.add_argument("--alpha", type=float)
    c.add_argument("--mode", choices=("base", "improved"))
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_paramcount)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

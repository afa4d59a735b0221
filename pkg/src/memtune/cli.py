"""``memtune`` command line.

Exit codes: 0 success, 1 a check failed (or a numeric failure), 2 usage or
configuration error. ``MEMTUNE_SEED`` sets the default ``--seed``.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import gradcheck, memory, quant
from .data import DataError, load_dataset
from .model import METHODS, ConfigError, ToyViTConfig, canonical_method, load_checkpoint, save_checkpoint
from .train import TrainConfig, pretrain_backbone, run_finetune, write_metrics


class UsageError(Exception):
    pass


def _method(value):
    try:
        return canonical_method(value)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _on_off(value):
    v = value.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on or off, got {value!r}")


def _default_seed():
    raw = os.environ.get("MEMTUNE_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"MEMTUNE_SEED must be an integer, got {raw!r}") from None


def _write(text, out_path=None):
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# --- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args):
    results = gradcheck.run_suite(args.target, seed=args.seed, n_seeds=args.seeds, tol=args.tol)
    if args.format == "json":
        doc = [{"target": r.target, "seeds": r.seeds, "max_error": r.max_error, "passed": r.passed} for r in results]
        _write(json.dumps({"tol": args.tol, "results": doc}, indent=2) + "\n")
    else:
        _write(gradcheck.format_results(results) + "\n")
    failed = [r.target for r in results if not r.passed]
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)} (tol {args.tol:g})", file=sys.stderr)
        return 1
    return 0


# --- memory ------------------------------------------------------------------------

def _toy_config_from_file(path):
    if not path:
        return ToyViTConfig()
    doc = _read_json(path)
    return _build(ToyViTConfig, doc.get("model", doc), "model")


def _arch(args):
    if args.arch == "vit_b_16":
        return "vit_b_16"
    return _toy_config_from_file(args.config)


def cmd_estimate_mem(args):
    if args.spec:
        with open(args.spec) as fh:
            spec = memory.spec_from_json(fh.read())
        report = memory.estimate(spec)
    else:
        report = memory.estimate_method(_arch(args), args.method, args.batch, args.quantize)
    text = report.to_json(layers=args.layers) + "\n" if args.out == "json" else report.to_table(layers=args.layers) + "\n"
    _write(text, args.output)
    return 0


def cmd_compare_methods(args):
    arch = _arch(args)
    reports = [memory.estimate_method(arch, m, args.batch) for m in METHODS]
    if args.out == "json":
        doc = {"arch": reports[0].arch, "batch": args.batch,
               "methods": [r.to_dict(layers=False) for r in reports]}
        _write(json.dumps(doc, indent=2, sort_keys=True) + "\n", args.output)
    else:
        _write(memory.format_summary_table(reports) + "\n", args.output)
    return 0


# --- quant report -------------------------------------------------------------------------

def cmd_quant_report(args):
    lo, hi = args.range
    if args.grid_points < 2:
        raise UsageError("--grid-points must be at least 2")
    if not hi > lo:
        raise UsageError("--range needs lo < hi")
    x = np.linspace(lo, hi, args.grid_points)
    exact = quant.gelu_derivative_exact(x)
    approx = quant.gelu_derivative_approx(x)
    gap = np.abs(approx - exact)
    lines = ["x,exact,approx,gap"]
    lines += [f"{a!r},{b!r},{c!r},{d!r}" for a, b, c, d in zip(x.tolist(), exact.tolist(), approx.tolist(), gap.tolist())]
    _write("\n".join(lines) + "\n", args.output)
    print(f"max gap {gap.max():.16g} at x = {x[gap.argmax()]:.6g}", file=sys.stderr)
    return 0


# --- train ----------------------------------------------------------------------------------

def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _build(cls, doc, section):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise UsageError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    try:
        return cls(**doc)
    except (TypeError, ConfigError) as exc:
        raise UsageError(f"bad '{section}' section: {exc}") from None


TRAIN_SECTIONS = ("train", "model", "data", "pretrain")
DATA_KEYS = {"format", "path", "seed", "n", "n_classes", "fractions"}
PRETRAIN_KEYS = {"epochs", "seed", "n", "lr", "checkpoint"}


def load_train_config(path):
    doc = _read_json(path) if path else {}
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(doc) - set(TRAIN_SECTIONS))
    if unknown:
        raise UsageError(f"unknown config section(s): {', '.join(unknown)}")
    for key, allowed in (("data", DATA_KEYS), ("pretrain", PRETRAIN_KEYS)):
        extra = sorted(set(doc.get(key, {})) - allowed)
        if extra:
            raise UsageError(f"unknown key(s) in '{key}': {', '.join(extra)}")
    return doc


def cmd_train(args):
    doc = load_train_config(args.config)
    model_cfg = _build(ToyViTConfig, doc.get("model", {}), "model")
    train_doc = dict(doc.get("train", {}))
    for flag, key in (("method", "method"), ("quantize", "quantize"), ("seed", "seed"),
                      ("epochs", "total_epochs"), ("lr", "lr"), ("batch", "batch")):
        value = getattr(args, flag)
        if value is not None:
            train_doc[key] = value
    train_doc.setdefault("seed", _default_seed())
    train_doc["model"] = model_cfg
    config = _build(TrainConfig, train_doc, "train")

    data = {"format": "builtin-synthetic", "seed": 7, "n": 1000}
    data.update(doc.get("data", {}))
    if "fractions" in data:
        data["fractions"] = tuple(data["fractions"])
    dataset = load_dataset(data.pop("path", None), data.pop("format"), **data)

    pretrained = None
    pre = doc.get("pretrain", {})
    if pre.get("checkpoint"):
        pretrained = load_checkpoint(pre["checkpoint"])
    elif pre.get("epochs", 0) > 0:
        source = load_dataset(None, "builtin-synthetic", seed=pre.get("seed", 11), n=pre.get("n", 1000),
                              n_classes=dataset.n_classes)
        pretrained = pretrain_backbone(source, config.model_config(dataset.n_classes), epochs=pre["epochs"],
                                       lr=pre.get("lr", 1e-3), seed=config.seed)

    log = None
    if args.verbose:
        def log(rec):
            print(json.dumps(rec, sort_keys=True), file=sys.stderr)

    result = run_finetune(config, dataset, pretrained, log=log)
    write_metrics(result, args.out)
    if args.save_checkpoint:
        save_checkpoint(args.save_checkpoint, {k: p.value for k, p in result.model.params.items()})
    sys.stdout.write(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    return 0


# --- parser ------------------------------------------------------------------------------------

def _range(value):
    try:
        lo, hi = (float(v) for v in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {value!r}") from None
    return lo, hi


def build_parser():
    parser = argparse.ArgumentParser(prog="memtune", description="Memory-efficient fine-tuning toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--target", choices=gradcheck.TARGETS + ("all",), default="all")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=20, help="random instances per target")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.set_defaults(func=cmd_gradcheck)

    def mem_args(p):
        p.add_argument("--arch", choices=("vit_b_16", "toy_vit"), default="vit_b_16")
        p.add_argument("--config", help="JSON file with a 'model' section for --arch toy_vit")
        p.add_argument("--batch", type=int, default=32)
        p.add_argument("--out", choices=("json", "table"), default="table")
        p.add_argument("--output", help="write to this file instead of stdout")

    p = sub.add_parser("estimate-mem", help="theoretical training memory for one method")
    mem_args(p)
    p.add_argument("--method", type=_method, default="S2A")
    p.add_argument("--quantize", type=_on_off)
    p.add_argument("--spec", help="JSON model description to estimate instead of a built-in arch")
    p.add_argument("--layers", action="store_true", help="include per-layer rows")
    p.set_defaults(func=cmd_estimate_mem)

    p = sub.add_parser("compare-methods", help="memory table for every method")
    mem_args(p)
    p.set_defaults(func=cmd_compare_methods)

    p = sub.add_parser("train", help="fine-tune the toy ViT")
    p.add_argument("--config", help="JSON config with train/model/data/pretrain sections")
    p.add_argument("--method", type=_method)
    p.add_argument("--quantize", type=_on_off)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--out", default="runs/latest", help="directory for metrics.jsonl and summary.json")
    p.add_argument("--save-checkpoint")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quant-report", help="CSV of the GELU derivative and its approximation")
    p.add_argument("--grid-points", type=int, default=120001)
    p.add_argument("--range", type=_range, default=(-6.0, 6.0))
    p.add_argument("--output")
    p.set_defaults(func=cmd_quant_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if getattr(args, "seed", "absent") is None:
            args.seed = _default_seed() if args.command != "train" else None
        return args.func(args)
    except (UsageError, ConfigError, DataError, KeyError) as exc:
        print(f"memtune: error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"memtune: numeric failure: {exc}", file=sys.stderr)
        return 1

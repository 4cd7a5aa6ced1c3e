"""Command-line entry point: ``unilateral-da <subcommand> [flags]``.

Every subcommand accepts ``--config FILE``, a UTF-8 JSON object whose keys are
the same names as the flags (underscored). Values given on the command line
win over the file, and the file wins over built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from . import data as D
from . import harness as H
from . import nets
from . import train as T

log = logging.getLogger("unilateral_da")


class CliError(Exception):
    pass


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip() != "")
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _csv_strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


_FIELD_TYPES = {int: int, float: float, str: str}


def _add(p: argparse.ArgumentParser, name: str, **kw):
    """Register ``--name`` plus its dashed spelling; default None marks 'not given'."""
    flags = [f"--{name}"]
    if "_" in name:
        flags.append("--" + name.replace("_", "-"))
    p.add_argument(*flags, dest=name, default=None, **kw)


def _add_dataclass_flags(p, cls, skip=()):
    for f in fields(cls):
        if f.name in skip:
            continue
        t = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str}.get(str(f.type))
        if t in _FIELD_TYPES:
            _add(p, f.name, type=t, help=f"{cls.__name__}.{f.name}")


def _hp_flags(p):
    g = p.add_argument_group("hyperparameters")
    _add_dataclass_flags(g, T.HyperParams)


def _settings(args, keys: Sequence[str]) -> dict:
    """Merge config-file values and explicit flags for ``keys``."""
    merged = dict(args._file)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _hparams(args, base: T.HyperParams = H.BENCHMARK_HPARAMS) -> T.HyperParams:
    names = [f.name for f in fields(T.HyperParams)]
    s = _settings(args, names)
    nested = s.get("hparams", {})
    vals = {**nested, **{k: s[k] for k in names if k in s}}
    return replace(base, **vals)


def _arch(args) -> nets.ArchitectureSpec:
    spec = args._file.get("arch", {})
    if getattr(args, "num_classes", None) is not None:
        spec = {**spec, "num_classes": args.num_classes}
    return nets.ArchitectureSpec(**spec)


def _require(s: dict, *keys):
    for k in keys:
        if s.get(k) in (None, ""):
            raise CliError(f"missing required setting --{k}")


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    names = [f.name for f in fields(D.SyntheticConfig) if f.name not in ("prototypes",)]
    s = _settings(args, names + ["out"])
    _require(s, "out")
    cfg_vals = {**s.get("synthetic", {}), **{k: s[k] for k in names + ["prototypes"] if k in s}}
    cfg = D.SyntheticConfig(**cfg_vals)
    bench = D.synth_generate(cfg)
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    for name in bench._fields:
        D.write_dataset(getattr(bench, name), out / f"{name}.csv")
    print(f"wrote {', '.join(f'{n}.csv' for n in bench._fields)} to {out}")
    return 0


def cmd_pretrain(args) -> int:
    s = _settings(args, ["source", "out", "num_classes"])
    _require(s, "source", "out")
    spec = _arch(args)
    hp = _hparams(args)
    src = D.read_dataset(s["source"], spec.num_classes, D.SOURCE)
    frozen, cache, report = T.stage1_pretrain(src, spec, hp)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(frozen, out)
    cache.save(out.with_suffix(".cache.npz"))
    report.metrics = T.evaluate(frozen, src)
    out.with_suffix(".report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"stage 1 done in {report.seconds:.1f}s; source accuracy {report.metrics['overall']:.4f}; "
          f"checkpoint {out.with_suffix('.json')}")
    return 0


def _present(s: dict, C: int) -> Optional[tuple[int, ...]]:
    if s.get("present") is not None:
        return tuple(s["present"])
    if s.get("missing") is not None:
        return tuple(range(C - int(s["missing"])))
    return None


def cmd_adapt(args) -> int:
    s = _settings(args, ["checkpoint", "cache", "source", "target", "test", "out", "missing", "present"])
    _require(s, "checkpoint", "source", "target", "out")
    frozen = nets.load_checkpoint(s["checkpoint"])
    spec = frozen.spec
    cache_path = s.get("cache") or Path(s["checkpoint"]).with_suffix(".cache.npz")
    cache = T.FeatureCache.load(cache_path)
    hp = _hparams(args)
    src = D.read_dataset(s["source"], spec.num_classes, D.SOURCE)
    tgt = D.read_dataset(s["target"], spec.num_classes, D.TARGET)
    present = _present(s, spec.num_classes)
    if present is not None:
        tgt = D.filter_target_classes(tgt, 0, present)
    params, report = T.stage2_adapt(src, tgt, frozen, cache, spec, hp)
    out = Path(s["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    nets.save_checkpoint(params, out)
    if s.get("test"):
        test = D.read_dataset(s["test"], spec.num_classes, D.TARGET)
        report.metrics = T.evaluate(params, test, present)
    out.with_suffix(".report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    msg = f"stage 2 done in {report.seconds:.1f}s; consistency {report.cons_initial:.4f} -> {report.cons_final:.4f}"
    if report.metrics:
        msg += f"; test accuracy {report.metrics['overall']:.4f}"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    s = _settings(args, ["checkpoint", "data", "missing", "present"])
    _require(s, "checkpoint", "data")
    params = nets.load_checkpoint(s["checkpoint"])
    ds = D.read_dataset(s["data"], params.spec.num_classes, D.TARGET)
    _print_json(T.evaluate(params, ds, _present(s, params.spec.num_classes)))
    return 0


def cmd_preprocess(args) -> int:
    names = [f.name for f in fields(D.PreprocessConfig)]
    s = _settings(args, names + ["input", "out", "label", "first_id", "classes"])
    _require(s, "input", "out", "label")
    cfg = D.PreprocessConfig(**{k: s[k] for k in names if k in s})
    rec = D.read_recording(s["input"])
    ds = D.preprocess_recording(rec, int(s["label"]), cfg, first_id=int(s.get("first_id") or 0),
                                classes=int(s.get("classes") or 10))
    D.write_dataset(ds, s["out"])
    print(f"wrote {len(ds)} vectors of width {ds.dim} to {s['out']}")
    return 0


def _experiment(args) -> H.ExperimentConfig:
    names = [f.name for f in fields(H.ExperimentConfig) if f.name not in ("synthetic", "hparams", "arch")]
    s = _settings(args, names)
    vals = {k: s[k] for k in names if k in s}
    if "synthetic" in s:
        vals["synthetic"] = None if s["synthetic"] is None else D.SyntheticConfig(**s["synthetic"])
    vals["hparams"] = _hparams(args)
    vals["arch"] = _arch(args)
    return H.ExperimentConfig(**vals)


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    resume = bool(args.resume or args._file.get("resume"))
    rows = H.sweep(cfg, resume=resume)
    csv_path, json_path = H.write_reports(rows, cfg.output_dir)
    failed = sum(r.error is not None for r in rows)
    print(H.render_report(H.aggregate(rows), "csv"), end="")
    print(f"{len(rows)} cells ({failed} failed); reports in {csv_path} and {json_path}")
    return 0 if not failed else 3


def cmd_report(args) -> int:
    s = _settings(args, ["rows", "output_dir", "format", "out"])
    rows_path = s.get("rows") or (Path(s["output_dir"]) / "rows.jsonl" if s.get("output_dir") else None)
    if rows_path is None:
        raise CliError("missing required setting --rows (or --output_dir)")
    if not Path(rows_path).exists():
        raise CliError(f"no result rows at {rows_path}")
    fmt = s.get("format") or "csv"
    aggs = H.aggregate(H.read_rows(rows_path))
    if s.get("out"):
        H.emit_report(aggs, fmt, s["out"])
        print(f"wrote {fmt} report to {s['out']}")
    else:
        print(H.render_report(aggs, fmt), end="")
    return 0


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unilateral-da", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="JSON file supplying any of the flags")
        p.set_defaults(func=func, _sub=p)
        return p

    p = command("synth", cmd_synth, "generate the synthetic benchmark as CSV files")
    _add(p, "out", help="output directory")
    _add_dataclass_flags(p, D.SyntheticConfig, skip=("amplitude_range", "prototypes"))

    p = command("pretrain", cmd_pretrain, "stage 1: source-only training, checkpoint and feature cache")
    _add(p, "source", help="source dataset CSV")
    _add(p, "out", help="checkpoint path prefix")
    _add(p, "num_classes", type=int)
    _hp_flags(p)

    p = command("adapt", cmd_adapt, "stage 2: adversarial adaptation from a stage-1 checkpoint")
    for name, h in [("checkpoint", "stage-1 checkpoint"), ("cache", "feature cache (.npz)"),
                    ("source", "source CSV"), ("target", "target training CSV (labels unused)"),
                    ("test", "optional labelled target test CSV"), ("out", "output checkpoint prefix")]:
        _add(p, name, help=h)
    _add(p, "missing", type=int, help="drop the top M labels from the target set")
    _add(p, "present", type=_csv_ints, help="explicit comma-separated present classes")
    _hp_flags(p)

    p = command("eval", cmd_eval, "accuracy of a checkpoint on a labelled dataset")
    _add(p, "checkpoint")
    _add(p, "data", help="labelled dataset CSV")
    _add(p, "missing", type=int)
    _add(p, "present", type=_csv_ints)

    p = command("preprocess", cmd_preprocess, "raw recording -> spectrum dataset CSV")
    _add(p, "input", help="text file, one sample per line")
    _add(p, "out", help="output CSV")
    _add(p, "label", type=int)
    _add(p, "first_id", type=int)
    _add(p, "classes", type=int, help="class count recorded in the dataset (default 10)")
    _add_dataclass_flags(p, D.PreprocessConfig)

    p = command("sweep", cmd_sweep, "run methods x missing counts x seeds and write reports")
    _add(p, "methods", type=_csv_strs, help="comma-separated subset of " + ",".join(H.METHODS))
    _add(p, "missing_counts", type=_csv_ints, help="comma-separated missing-class counts")
    _add(p, "class_order", type=_csv_ints)
    for name in ("seeds", "seed", "workers"):
        _add(p, name, type=int)
    for name in ("source_path", "target_path", "test_path", "output_dir"):
        _add(p, name)
    _add(p, "num_classes", type=int)
    p.add_argument("--resume", action="store_true", help="keep finished cells from a previous run")
    g = p.add_argument_group("hyperparameters")
    _add_dataclass_flags(g, T.HyperParams, skip=("seed",))

    p = command("report", cmd_report, "aggregate result rows into a report")
    _add(p, "rows", help="rows.jsonl written by sweep")
    _add(p, "output_dir", help="sweep output directory (reads rows.jsonl inside)")
    _add(p, "format", choices=["csv", "json"])
    _add(p, "out", help="write here instead of stdout")
    return parser


# keys a config file may carry beyond the subcommand's own flags
_NESTED = {"hparams", "synthetic", "arch", "resume", "amplitude_range", "prototypes"}


def _check_keys(cfg: dict, sub: argparse.ArgumentParser):
    known = {a.dest for a in sub._actions} | _NESTED
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise CliError(f"unknown config key(s): {', '.join(unknown)}")


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError(f"config {path} must hold a JSON object")
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args._file = _load_config(args.config)
        _check_keys(args._file, args._sub)
        return args.func(args)
    except (CliError, ValueError, TypeError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"unilateral-da {args.command}: error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1


if __name__ == "__main__":
    sys.exit(main())

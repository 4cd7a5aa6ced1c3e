"""Experiment sweeps: baseline vs. DANN vs. DANN with unilateral alignment.

A sweep runs every (method, missing-count, replicate) cell, streams one JSON
line per finished cell to ``rows.jsonl`` and aggregates replicates into
mean/std rows that :func:`emit_report` renders as CSV or JSON.

Seeds are derived per replicate, not per method, so the ``dann`` and
``dann_unilateral`` cells of one replicate start from identical networks and
batches.  That makes ``dann`` bit-identical to ``dann_unilateral`` with
``lambda_cons=0`` and lets one Stage-1 run serve every cell of a replicate.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import data as D
from . import train as T
from .nets import ArchitectureSpec

log = logging.getLogger(__name__)

METHODS = ("baseline", "dann", "dann_unilateral")
REPORT_COLUMNS = ("method", "missing", "mean_acc", "std_acc", "mean_present", "mean_missing")

# Optimizer settings that train the default synthetic benchmark within the
# acceptance time budget. HyperParams() itself keeps the plain-SGD defaults.
BENCHMARK_HPARAMS = T.HyperParams(
    learning_rate=0.02, batch_size=16, stage1_epochs=20, stage2_epochs=40,
    lambda_d=1.0, lambda_cons=50.0, momentum=0.9, grl_schedule="dann",
)


class HarnessError(ValueError):
    pass


def derive_seed(*parts: int) -> int:
    """Stable 31-bit seed from a tuple of non-negative integers."""
    return int(np.random.default_rng([int(p) for p in parts]).integers(2**31))


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep. ``missing_counts`` entries m keep target classes of rank < C - m.

    The rank is given by ``class_order`` (default: label order, so the present
    classes are {0, ..., C-m-1}). Either ``synthetic`` or all three dataset
    paths supply the data; with paths, every replicate sees the same data and
    only the training seeds change.
    """

    methods: tuple[str, ...] = METHODS
    missing_counts: tuple[int, ...] = (8, 0)
    seeds: int = 5
    seed: int = 0
    synthetic: Optional[D.SyntheticConfig] = field(default_factory=D.SyntheticConfig)
    source_path: Optional[str] = None
    target_path: Optional[str] = None
    test_path: Optional[str] = None
    hparams: T.HyperParams = BENCHMARK_HPARAMS
    arch: ArchitectureSpec = ArchitectureSpec()
    class_order: Optional[tuple[int, ...]] = None
    output_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "missing_counts", tuple(int(m) for m in self.missing_counts))
        if not self.methods:
            raise HarnessError("methods must be non-empty")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise HarnessError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
        if len(set(self.methods)) != len(self.methods):
            raise HarnessError("methods must not repeat")
        if not self.missing_counts:
            raise HarnessError("missing_counts must be non-empty")
        C = self.arch.num_classes
        if any(not 0 <= m < C for m in self.missing_counts):
            raise HarnessError(f"missing counts must be in [0, {C - 1}]")
        if len(set(self.missing_counts)) != len(self.missing_counts):
            raise HarnessError("missing_counts must not repeat")
        if self.seeds < 1:
            raise HarnessError("seeds must be >= 1")
        if self.workers < 1:
            raise HarnessError("workers must be >= 1")
        paths = (self.source_path, self.target_path, self.test_path)
        if any(paths) and not all(paths):
            raise HarnessError("source_path, target_path and test_path go together")
        if not any(paths) and self.synthetic is None:
            raise HarnessError("need either a synthetic config or dataset paths")
        if self.synthetic is not None and self.synthetic.num_classes != C and not any(paths):
            raise HarnessError("synthetic num_classes disagrees with the architecture")
        if self.class_order is not None:
            order = tuple(int(c) for c in self.class_order)
            if sorted(order) != list(range(C)):
                raise HarnessError(f"class_order must be a permutation of 0..{C - 1}")
            object.__setattr__(self, "class_order", order)

    def present_classes(self, missing: int) -> tuple[int, ...]:
        order = self.class_order or tuple(range(self.arch.num_classes))
        return tuple(sorted(order[:self.arch.num_classes - missing]))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if d.get("synthetic") is not None and not isinstance(d["synthetic"], D.SyntheticConfig):
            d["synthetic"] = D.SyntheticConfig(**d["synthetic"])
        if "hparams" in d and not isinstance(d["hparams"], T.HyperParams):
            d["hparams"] = replace(BENCHMARK_HPARAMS, **d["hparams"])
        if "arch" in d and not isinstance(d["arch"], ArchitectureSpec):
            d["arch"] = ArchitectureSpec(**d["arch"])
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise HarnessError(f"unknown ExperimentConfig field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class ResultRow:
    """One cell. ``seed`` is the replicate index; ``missing_acc`` is None at count 0."""

    method: str
    missing: int
    seed: int
    overall: Optional[float]
    present: Optional[float]
    missing_acc: Optional[float]
    balanced: Optional[float] = None
    seconds: float = 0.0
    error: Optional[str] = None
    cons_initial: Optional[float] = None
    cons_final: Optional[float] = None

    def __post_init__(self):
        for name in ("overall", "present", "missing_acc", "balanced"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise HarnessError(f"{name} accuracy {v} outside [0, 1]")

    @property
    def key(self) -> tuple[str, int, int]:
        return (self.method, self.missing, self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.missing == 0:
            del d["missing_acc"]
        for name in ("error", "cons_initial", "cons_final"):
            if d[name] is None:
                del d[name]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        return cls(**{"missing_acc": None, **d})


@dataclass(frozen=True)
class AggregateRow:
    method: str
    missing: int
    n: int
    mean_acc: float
    std_acc: float
    mean_present: Optional[float]
    mean_missing: Optional[float]
    min_acc: float
    max_acc: float


# ------------------------------------------------------------------ cells

def run_method(method: str, source: D.Dataset, target: D.Dataset, test: D.Dataset,
               spec: ArchitectureSpec, hp: T.HyperParams, seed: int,
               pretrained: Optional[tuple] = None) -> ResultRow:
    """Run one method and score it on ``test``.

    ``target`` must already be class-filtered; its ``present`` attribute decides
    the present/missing split. ``pretrained`` is an optional ``(frozen, cache)``
    pair from :func:`~unilateral_da.train.stage1_pretrain` trained on
    ``source``; without it Stage 1 runs here with ``seed``. ``seed`` also drives
    Stage 2. The baseline never looks at ``target`` beyond its class list.
    """
    if method not in METHODS:
        raise HarnessError(f"unknown method {method!r}")
    t0 = time.perf_counter()
    hp = replace(hp, seed=seed)
    if pretrained is None:
        frozen, cache, _ = T.stage1_pretrain(source, spec, hp)
    else:
        frozen, cache = pretrained
    present = target.present if target.present is not None else tuple(range(spec.num_classes))
    cons = (None, None)
    if method == "baseline":
        params = frozen
    else:
        if method == "dann":
            hp = replace(hp, lambda_cons=0.0)
        params, report = T.stage2_adapt(source, target, frozen, cache, spec, hp)
        cons = (report.cons_initial, report.cons_final)
    m = T.evaluate(params, test, present)
    return ResultRow(method, spec.num_classes - len(present), seed, m["overall"], m["present"],
                     m["missing"], m["balanced"], time.perf_counter() - t0, None, *cons)


def _load_replicate_data(cfg: ExperimentConfig, replicate: int):
    if cfg.source_path:
        C = cfg.arch.num_classes
        src = D.read_dataset(cfg.source_path, C, D.SOURCE)
        tgt = D.read_dataset(cfg.target_path, C, D.TARGET)
        test = D.read_dataset(cfg.test_path, C, D.TARGET)
        return src, tgt, test
    synth = replace(cfg.synthetic, seed=derive_seed(cfg.seed, 0, replicate))
    bench = D.synth_generate(synth)
    return bench.source, bench.target, bench.test


def _run_replicate(cfg: ExperimentConfig, replicate: int, cells: Sequence[tuple[str, int]],
                   emit: Optional[Callable[[ResultRow], None]] = None) -> list[ResultRow]:
    """All requested cells of one replicate, sharing one Stage-1 run."""
    rows: list[ResultRow] = []

    def record(row: ResultRow):
        rows.append(row)
        if emit is not None:
            emit(row)

    def failed(method, missing, exc):
        log.warning("cell %s/%d/%d failed: %s", method, missing, replicate, exc)
        record(ResultRow(method, missing, replicate, None, None, None, None, 0.0,
                         f"{type(exc).__name__}: {exc}"))

    try:
        src, tgt_full, test = _load_replicate_data(cfg, replicate)
        s1_hp = replace(cfg.hparams, seed=derive_seed(cfg.seed, 1, replicate))
        t0 = time.perf_counter()
        frozen, cache, _ = T.stage1_pretrain(src, cfg.arch, s1_hp)
        s1_seconds = time.perf_counter() - t0
    except Exception as exc:  # noqa: BLE001 - every cell of the replicate fails alike
        for method, missing in cells:
            failed(method, missing, exc)
        return rows
    for method, missing in cells:
        try:
            tgt = D.filter_target_classes(tgt_full, 0, cfg.present_classes(missing))
            seed = derive_seed(cfg.seed, 2, missing, replicate)
            row = run_method(method, src, tgt, test, cfg.arch, cfg.hparams, seed, (frozen, cache))
            record(replace(row, seed=replicate, seconds=row.seconds + s1_seconds))
        except Exception as exc:  # noqa: BLE001 - failed cells never abort the sweep
            failed(method, missing, exc)
    return rows


def _replicate_job(args):
    cfg, replicate, cells = args
    return _run_replicate(cfg, replicate, cells)


def read_rows(path) -> list[ResultRow]:
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rows.append(ResultRow.from_dict(json.loads(line)))
        except (ValueError, TypeError) as exc:
            raise HarnessError(f"{path}:{lineno}: bad result row ({exc})") from None
    return rows


def sweep(config: ExperimentConfig, resume: bool = False) -> list[ResultRow]:
    """Run methods x missing-counts x replicates; rows go to ``<output_dir>/rows.jsonl``.

    With ``resume`` the cells already present without an error marker are kept
    and skipped. The returned rows are ordered by method, count, replicate in
    config order, independent of completion order.
    """
    out = Path(config.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    except OSError as exc:
        raise HarnessError(f"cannot write to output directory {out}: {exc}") from None
    rows_path = out / "rows.jsonl"
    done: dict[tuple, ResultRow] = {}
    if resume:
        done = {r.key: r for r in read_rows(rows_path) if r.error is None}
    with open(rows_path, "w", encoding="utf-8") as fh:
        for r in done.values():
            fh.write(json.dumps(r.to_dict()) + "\n")

    cells = [(m, k) for m in config.methods for k in config.missing_counts]
    jobs = []
    for rep in range(config.seeds):
        todo = [(m, k) for m, k in cells if (m, k, rep) not in done]
        if todo:
            jobs.append((config, rep, todo))

    with open(rows_path, "a", encoding="utf-8") as fh:
        def emit(row: ResultRow):
            fh.write(json.dumps(row.to_dict()) + "\n")
            fh.flush()

        new: list[ResultRow] = []
        if config.workers == 1 or len(jobs) <= 1:
            for cfg, rep, todo in jobs:
                new.extend(_run_replicate(cfg, rep, todo, emit))
        else:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                for rows in pool.map(_replicate_job, jobs):
                    for row in rows:
                        emit(row)
                    new.extend(rows)

    by_key = {**done, **{r.key: r for r in new}}
    order = {m: i for i, m in enumerate(config.methods)}
    korder = {k: i for i, k in enumerate(config.missing_counts)}
    return sorted(by_key.values(), key=lambda r: (order[r.method], korder[r.missing], r.seed))


# -------------------------------------------------------------- aggregation

def aggregate(rows: Iterable[ResultRow]) -> list[AggregateRow]:
    """Mean and population std per (method, missing-count), in first-seen order.

    Failed rows are ignored; a group left without successful rows is dropped
    with a warning.
    """
    groups: dict[tuple[str, int], list[ResultRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.missing), []).append(r)
    out = []
    for (method, missing), members in groups.items():
        ok = [r for r in members if r.error is None and r.overall is not None]
        if not ok:
            log.warning("no successful rows for %s at %d missing; group omitted", method, missing)
            continue
        acc = np.array([r.overall for r in ok])
        pres = [r.present for r in ok if r.present is not None]
        miss = [r.missing_acc for r in ok if r.missing_acc is not None]
        out.append(AggregateRow(
            method, missing, len(ok),
            float(acc.mean()), float(acc.std()),
            float(np.mean(pres)) if pres else None,
            float(np.mean(miss)) if miss and missing else None,
            float(acc.min()), float(acc.max()),
        ))
    return out


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else "%.4f" % v


def _report_records(aggs: Sequence[AggregateRow]) -> list[dict]:
    recs = []
    for a in aggs:
        vals = {"mean_acc": a.mean_acc, "std_acc": a.std_acc,
                "mean_present": a.mean_present, "mean_missing": a.mean_missing}
        rec = {"method": a.method, "missing": a.missing}
        rec.update({k: (None if v is None else float(_fmt(v))) for k, v in vals.items()})
        recs.append(rec)
    return recs


def render_report(aggs: Sequence[AggregateRow], fmt: str = "csv") -> str:
    recs = _report_records(aggs)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in recs:
            w.writerow([r["method"], r["missing"]] + [_fmt(r[c]) for c in REPORT_COLUMNS[2:]])
        return buf.getvalue()
    if fmt == "json":
        return json.dumps(recs, indent=2) + "\n"
    raise HarnessError(f"unknown report format {fmt!r}; use csv or json")


def emit_report(aggs: Sequence[AggregateRow], fmt: str, path) -> Path:
    """Write the report; values carry 4 decimal places, blanks/nulls mark absent splits."""
    text = render_report(aggs, fmt)
    path = Path(path)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise HarnessError(f"cannot write report to {path}: {exc}") from None
    return path


def read_report(path) -> list[dict]:
    """Parse a CSV or JSON report back into records (floats or None)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text)
    recs = []
    for r in csv.DictReader(io.StringIO(text)):
        rec = {"method": r["method"], "missing": int(r["missing"])}
        for c in REPORT_COLUMNS[2:]:
            rec[c] = float(r[c]) if r[c] != "" else None
        recs.append(rec)
    return recs


def write_reports(rows: Sequence[ResultRow], output_dir) -> tuple[Path, Path]:
    aggs = aggregate(rows)
    out = Path(output_dir)
    return emit_report(aggs, "csv", out / "report.csv"), emit_report(aggs, "json", out / "report.json")


__all__ = [
    "METHODS", "BENCHMARK_HPARAMS", "HarnessError", "ExperimentConfig", "ResultRow", "AggregateRow",
    "derive_seed", "run_method", "sweep", "aggregate", "render_report", "emit_report", "read_report",
    "read_rows", "write_reports",
]

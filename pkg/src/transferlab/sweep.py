"""Knob sweeps: train on source, attack, refit heads on both domains, relative DT accuracy, correlations."""

from __future__ import annotations

import csv
import dataclasses
import io
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from transferlab.augment import scaled
from transferlab.data import EmpiricalDataset
from transferlab.robustness import AttackConfig, robust_accuracy
from transferlab.train import (
    ArchSpec,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    fine_tune_linear,
    sgd_train,
)

ROW_COLUMNS = (
    "knob",
    "value",
    "seed",
    "clean_acc_src",
    "robust_acc_src",
    "acc_src_ft",
    "acc_tgt",
    "rel_dt",
    "status",
)


@dataclass(frozen=True)
class DomainSplit:
    train: EmpiricalDataset
    test: EmpiricalDataset


def split_dataset(data: EmpiricalDataset, test_fraction: float) -> DomainSplit:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(len(data) * test_fraction))
    n_test = min(max(n_test, 1), len(data) - 1)
    train, test = data.split(len(data) - n_test)
    return DomainSplit(train, test)


@dataclass(frozen=True)
class SweepConfig:
    base: TrainConfig
    arch: ArchSpec
    knob: str
    values: tuple[float, ...]
    seeds: tuple[int, ...]
    source: DomainSplit
    target: DomainSplit
    attack: AttackConfig
    vanilla_value: float = 0.0
    ridge: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.values:
            raise ValueError("sweep values must be nonempty")
        if not self.seeds:
            raise ValueError("sweep seeds must be nonempty")
        set_knob(self.base, self.knob, self.vanilla_value)  # validates the path


def set_knob(config: TrainConfig, knob: str, value: float) -> TrainConfig:
    """Return ``config`` with the dotted ``knob`` set to ``value``.

    Supported paths: ``train.<field>``, ``regularizer.<field>`` and
    ``augmentation.magnitude`` (rescales every magnitude of the augmentation).
    """
    section, _, name = knob.partition(".")
    if section == "train" and name in {f.name for f in dataclasses.fields(TrainConfig)}:
        cur = getattr(config, name)
        return dataclasses.replace(config, **{name: type(cur)(value) if isinstance(cur, (int, float)) else value})
    if section == "regularizer":
        reg = config.regularizer
        fields_ = {f.name for f in dataclasses.fields(reg)}
        if name in ("lambda", "lam"):
            name = "strength"
        if name not in fields_:
            raise ValueError(f"unknown regularizer field {name!r}")
        cur = getattr(reg, name)
        val = int(value) if isinstance(cur, int) and not isinstance(cur, bool) else float(value)
        return dataclasses.replace(config, regularizer=dataclasses.replace(reg, **{name: val}))
    if section in ("augmentation", "augment") and name == "magnitude":
        if config.augmentation is None:
            raise ValueError("knob augmentation.magnitude needs an augmentation in the base config")
        return dataclasses.replace(config, augmentation=scaled(config.augmentation, float(value)))
    raise ValueError(f"unknown knob {knob!r}")


@dataclass(frozen=True)
class CellResult:
    value: float
    seed: int
    clean_acc_src: float
    robust_acc_src: float
    acc_src_ft: float
    acc_tgt: float
    status: str


def run_cell(cfg: SweepConfig, value: float, seed: int) -> CellResult:
    """Train at one knob value and seed; failures are returned as a ``failed`` cell."""
    nan = float("nan")
    try:
        tc = dataclasses.replace(set_knob(cfg.base, cfg.knob, value), seed=seed)
        model = sgd_train(tc, cfg.source.train, cfg.arch)
        clean = evaluate(model, cfg.source.test, "argmax_accuracy")
        attack = dataclasses.replace(cfg.attack, seed=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            robust = robust_accuracy(model, cfg.source.test, attack)
        head_s, _ = fine_tune_linear(model.extractor, cfg.source.train, cfg.ridge)
        head_t, _ = fine_tune_linear(model.extractor, cfg.target.train, cfg.ridge)
        acc_s = evaluate(model.with_head(head_s), cfg.source.test, "argmax_accuracy")
        acc_t = evaluate(model.with_head(head_t), cfg.target.test, "argmax_accuracy")
        vals = (clean, robust, acc_s, acc_t)
        if not all(np.isfinite(vals)):
            raise TrainingDiverged("non-finite accuracy")
        return CellResult(value, seed, clean, robust, acc_s, acc_t, "ok")
    except (FloatingPointError, np.linalg.LinAlgError):
        return CellResult(value, seed, nan, nan, nan, nan, "failed")


@dataclass(frozen=True)
class SweepRow:
    knob: str
    value: float
    seed: int
    clean_acc_src: float
    robust_acc_src: float
    acc_src_ft: float
    acc_tgt: float
    rel_dt: float
    status: str


@dataclass(frozen=True)
class CorrelationStat:
    name: str
    value: float
    defined: bool


@dataclass(frozen=True)
class SweepReport:
    rows: tuple[SweepRow, ...]
    stats: tuple[CorrelationStat, ...]
    n_failed: int

    def stat(self, name: str) -> CorrelationStat:
        for s in self.stats:
            if s.name == name:
                return s
        raise KeyError(name)


def _run_cell_args(args):
    return run_cell(*args)


def run_sweep(cfg: SweepConfig, threads: int = 1) -> SweepReport:
    """Every (value, seed) cell plus the vanilla cell per seed, paired for ``rel_dt``."""
    cells = [(v, s) for v in cfg.values for s in cfg.seeds]
    need_vanilla = cfg.vanilla_value not in cfg.values
    jobs = cells + ([(cfg.vanilla_value, s) for s in cfg.seeds] if need_vanilla else [])
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_run_cell_args, [(cfg, v, s) for v, s in jobs]))
    else:
        results = [run_cell(cfg, v, s) for v, s in jobs]
    by_key = {(r.value, r.seed): r for r in results}
    rows = []
    for v, s in cells:
        r = by_key[(v, s)]
        van = by_key[(cfg.vanilla_value, s)]
        status = r.status if van.status == "ok" else "failed"
        if status == "ok":
            rel = (r.acc_tgt - r.acc_src_ft) - (van.acc_tgt - van.acc_src_ft)
        else:
            rel = float("nan")
        rows.append(
            SweepRow(cfg.knob, v, s, r.clean_acc_src, r.robust_acc_src, r.acc_src_ft, r.acc_tgt, rel, status)
        )
    return SweepReport(tuple(rows), compute_stats(rows), sum(r.status != "ok" for r in rows))


# --- statistics ----------------------------------------------------------------------------------


def _corr(kind: str, x: np.ndarray, y: np.ndarray) -> tuple[float, bool]:
    if x.size < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan"), False
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if kind == "pearson":
            val = float(stats.pearsonr(x, y)[0])
        else:
            val = float(stats.spearmanr(x, y)[0])
    return val, bool(np.isfinite(val))


def compute_stats(rows: Sequence[SweepRow]) -> tuple[CorrelationStat, ...]:
    ok = [r for r in rows if r.status == "ok"]
    knob = np.array([r.value for r in ok])
    robust = np.array([r.robust_acc_src for r in ok])
    rel = np.array([r.rel_dt for r in ok])
    out = []
    for name, x in (("robust_acc", robust), ("knob", knob)):
        for kind in ("pearson", "spearman"):
            v, d = _corr(kind, x, rel)
            out.append(CorrelationStat(f"{kind}_{name}_rel_dt", v, d))
    return tuple(out)


# --- CSV output and report --------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if np.isfinite(v) else "nan"
    return str(v)


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write(",".join(ROW_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(getattr(r, c)) for c in ROW_COLUMNS) + "\n")
    return buf.getvalue()


def rows_from_csv(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or tuple(reader.fieldnames) != ROW_COLUMNS:
        raise ValueError(f"rows.csv header must be {','.join(ROW_COLUMNS)}")
    rows = []
    for line in reader:
        rows.append(
            SweepRow(
                line["knob"],
                float(line["value"]),
                int(line["seed"]),
                *(float(line[c]) for c in ROW_COLUMNS[3:8]),
                line["status"],
            )
        )
    return rows


def write_sweep(report: SweepReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rows.csv").write_text(rows_to_csv(report.rows))
    write_report(report.rows, out)


def write_report(rows: Sequence[SweepRow], out_dir: str | Path) -> SweepReport:
    """Write summary.csv and plot-data CSVs for a set of rows."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = compute_stats(rows)
    n_failed = sum(r.status != "ok" for r in rows)
    lines = ["stat,value,defined"]
    lines += [f"{s.name},{_fmt(s.value)},{str(s.defined).lower()}" for s in st]
    lines.append(f"n_rows,{len(rows)},true")
    lines.append(f"n_failed,{n_failed},true")
    lines.append("baseline,per-seed vanilla pairing,true")
    (out / "summary.csv").write_text("\n".join(lines) + "\n")
    ok = [r for r in rows if r.status == "ok"]
    plot = ["x_robust_acc,y_rel_dt,knob,value,seed"]
    plot += [f"{_fmt(r.robust_acc_src)},{_fmt(r.rel_dt)},{r.knob},{_fmt(r.value)},{r.seed}" for r in ok]
    (out / "plot_robust_vs_reldt.csv").write_text("\n".join(plot) + "\n")
    plot = ["x_knob,y_rel_dt,knob,seed"]
    plot += [f"{_fmt(r.value)},{_fmt(r.rel_dt)},{r.knob},{r.seed}" for r in ok]
    (out / "plot_knob_vs_reldt.csv").write_text("\n".join(plot) + "\n")
    return SweepReport(tuple(rows), st, n_failed)


def report(sweep_dirs: Sequence[str | Path], out_dir: str | Path) -> SweepReport:
    """Merge finished sweep directories (rows concatenated) and write the report into ``out_dir``."""
    rows: list[SweepRow] = []
    for d in sweep_dirs:
        path = Path(d) / "rows.csv"
        if not path.exists():
            warnings.warn(f"missing {path}; report is partial", stacklevel=2)
            continue
        rows.extend(rows_from_csv(path.read_text()))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rows.csv").write_text(rows_to_csv(rows))
    return write_report(rows, out)

"""
Metrics, efficiency accounting, the Pareto table and the three deadlock
diagnostics (subspace locking, truncation trap, affine unlock).

Every report is a list of flat rows; the CSV writers emit them in long
format so they can be plotted without reshaping.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from modepinn.constants import (
    DEFAULT_EVAL_NT,
    DEFAULT_EVAL_NX,
    DEFAULT_RANK,
    DEFAULT_SEEDS,
    AdapterKind,
    DiagnosticKind,
    ProblemFamily,
)
from modepinn.errors import DimensionError, MetricError
from modepinn.model import P2innModel, predict, trainable_count
from modepinn.pde import BatchCounts, CdrParams, ProblemSpec, sample_batch
from modepinn.refsolve import GridField, helmholtz_exact, strang_cdr
from modepinn.train import TrainConfig, finetune, pinn_loss

EFFICIENCY_TOLERANCE = 1e-9
REPORTED_EFFICIENCY_TOLERANCE = 0.05
TEST_BATCH_SEED_OFFSET = 10_000
LONG_HEADER = ("method", "setting", "seed", "metric", "value")


def _pair(pred, truth) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise DimensionError(
            "prediction has {} values, ground truth {}".format(pred.size, truth.size)
        )
    return pred, truth


def rel_l2(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    norm = np.linalg.norm(truth)
    if norm == 0.0:
        raise MetricError("relative error undefined for a zero ground truth")
    return float(np.linalg.norm(pred - truth) / norm)


def abs_l2(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.linalg.norm(pred - truth))


def max_err(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.max(np.abs(pred - truth)))


def rel_linf(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    peak = np.max(np.abs(truth))
    if peak == 0.0:
        raise MetricError("relative max error undefined for a zero ground truth")
    return float(np.max(np.abs(pred - truth)) / peak)


def explained_variance(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    variance = np.var(truth)
    if variance == 0.0:
        raise MetricError("explained variance undefined for a constant ground truth")
    return float(1.0 - np.var(truth - pred) / variance)


@dataclass(frozen=True)
class ErrorReport:
    rel_l2: float
    abs_l2: float
    max_err: float
    explained_variance: float
    rel_linf: float
    n_points: int

    @property
    def rel_l2_pct(self) -> float:
        return 100.0 * self.rel_l2

    def metrics(self) -> Dict[str, float]:
        return {
            "rel_l2": self.rel_l2,
            "rel_l2_pct": self.rel_l2_pct,
            "abs_l2": self.abs_l2,
            "max_err": self.max_err,
            "explained_variance": self.explained_variance,
            "rel_linf": self.rel_linf,
        }


def error_report(pred, truth) -> ErrorReport:
    pred, truth = _pair(pred, truth)
    return ErrorReport(
        rel_l2=rel_l2(pred, truth),
        abs_l2=abs_l2(pred, truth),
        max_err=max_err(pred, truth),
        explained_variance=explained_variance(pred, truth),
        rel_linf=rel_linf(pred, truth),
        n_points=int(pred.size),
    )


def efficiency(loss: float, params: int) -> float:
    """1 / (loss x params in thousands)."""
    if not loss > 0 or not params > 0:
        raise MetricError(
            "efficiency needs positive loss and parameter count, got {} and {}".format(loss, params)
        )
    return 1.0 / (loss * params / 1000.0)


def row_efficiency(loss: float, params: int) -> Optional[float]:
    """Efficiency of a table row; undefined (None) for a model with nothing to train."""
    if params == 0:
        return None
    return efficiency(loss, params)


@dataclass(frozen=True)
class ParetoRow:
    method: str
    params: int
    train_loss: float
    test_loss: float
    rel_l2: float
    efficiency: Optional[float]
    reported_efficiency: Optional[float] = None

    @property
    def efficiency_mismatch(self) -> bool:
        if self.reported_efficiency is None or self.efficiency is None:
            return False
        return abs(self.reported_efficiency - self.efficiency) > REPORTED_EFFICIENCY_TOLERANCE * max(
            abs(self.efficiency), 1e-12
        )

    def recomputed_efficiency(self) -> Optional[float]:
        return row_efficiency(self.train_loss, self.params)


def make_row(
    method: str,
    params: int,
    train_loss: float,
    test_loss: float,
    rel_l2_value: float,
    reported_efficiency: Optional[float] = None,
) -> ParetoRow:
    row = ParetoRow(
        method=method,
        params=int(params),
        train_loss=float(train_loss),
        test_loss=float(test_loss),
        rel_l2=float(rel_l2_value),
        efficiency=row_efficiency(train_loss, params),
        reported_efficiency=reported_efficiency,
    )
    if row.efficiency_mismatch:
        logging.warning(
            "%s: reported efficiency %.4g disagrees with 1/(loss x kP) = %.4g",
            method,
            reported_efficiency,
            row.efficiency,
        )
    return row


def dominates(a: ParetoRow, b: ParetoRow) -> bool:
    """a is no worse in parameters and error, and strictly better in one."""
    no_worse = a.params <= b.params and a.rel_l2 <= b.rel_l2
    strictly = a.params < b.params or a.rel_l2 < b.rel_l2
    return no_worse and strictly


@dataclass(frozen=True)
class ParetoEntry:
    row: ParetoRow
    rank: int
    dominated_by: Tuple[str, ...]

    @property
    def dominated(self) -> bool:
        return bool(self.dominated_by)


PARETO_HEADER = (
    "rank",
    "method",
    "params",
    "params_k",
    "train_loss",
    "test_loss",
    "rel_l2",
    "rel_l2_pct",
    "efficiency",
    "reported_efficiency",
    "efficiency_mismatch",
    "dominated",
    "dominated_by",
)


def pareto_report(rows: Sequence[ParetoRow]) -> List[ParetoEntry]:
    """Rows ranked by efficiency (best first) with dominance flags.

    Rows without an efficiency (frozen models) rank last but still take part
    in dominance on parameters and error.
    """
    if not rows:
        raise ValueError("pareto_report needs at least one row")
    for row in rows:
        expected = row.recomputed_efficiency()
        if expected is None or row.efficiency is None:
            consistent = expected is None and row.efficiency is None
        else:
            consistent = abs(expected - row.efficiency) <= EFFICIENCY_TOLERANCE * max(row.efficiency, 1.0)
        if not consistent:
            raise MetricError("{}: stored efficiency does not match its loss and count".format(row.method))
    ordered = sorted(
        rows, key=lambda r: (r.efficiency is None, -(r.efficiency or 0.0), r.method)
    )
    return [
        ParetoEntry(
            row=row,
            rank=rank,
            dominated_by=tuple(other.method for other in ordered if dominates(other, row)),
        )
        for rank, row in enumerate(ordered, start=1)
    ]


def write_pareto_csv(entries: Sequence[ParetoEntry], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PARETO_HEADER)
    for entry in entries:
        row = entry.row
        writer.writerow(
            [
                entry.rank,
                row.method,
                row.params,
                repr(row.params / 1000.0),
                repr(row.train_loss),
                repr(row.test_loss),
                repr(row.rel_l2),
                repr(100.0 * row.rel_l2),
                "" if row.efficiency is None else repr(row.efficiency),
                "" if row.reported_efficiency is None else repr(row.reported_efficiency),
                int(row.efficiency_mismatch),
                int(entry.dominated),
                "|".join(entry.dominated_by),
            ]
        )


def reference_field(mu, spec: ProblemSpec, nx: int = DEFAULT_EVAL_NX, nt: int = DEFAULT_EVAL_NT) -> GridField:
    if spec.family == ProblemFamily.HELMHOLTZ:
        return helmholtz_exact(mu, nx, nt, bounds=spec.x_bounds)
    return strang_cdr(mu, spec, nx, nt)


def evaluate_model(
    model: P2innModel,
    mu,
    spec: ProblemSpec,
    nx: int = DEFAULT_EVAL_NX,
    nt: int = DEFAULT_EVAL_NT,
    truth: Optional[GridField] = None,
) -> ErrorReport:
    """Pointwise prediction on the reference solver's own grid."""
    truth = truth if truth is not None else reference_field(mu, spec, nx, nt)
    pred = predict(model, truth.points(), mu.as_vector())
    return error_report(pred, truth.values)


@dataclass(frozen=True)
class SweepReport:
    labels: Tuple[str, ...]
    reports: Tuple[ErrorReport, ...]

    @property
    def mean_rel_l2(self) -> float:
        return float(np.mean([r.rel_l2 for r in self.reports]))

    @property
    def mean_abs_l2(self) -> float:
        return float(np.mean([r.abs_l2 for r in self.reports]))


def sweep_errors(
    model: P2innModel,
    params: Iterable[Any],
    spec: ProblemSpec,
    nx: int = DEFAULT_EVAL_NX,
    nt: int = DEFAULT_EVAL_NT,
) -> SweepReport:
    """Errors at every parameter of an interpolation or extrapolation sweep, plus their means."""
    params = list(params)
    reports = tuple(evaluate_model(model, mu, spec, nx, nt) for mu in params)
    sweep = SweepReport(labels=tuple(mu.label() for mu in params), reports=reports)
    logging.info(
        "Sweep over %s equations: mean rel-L2 %.4e, mean abs-L2 %.4e",
        len(params),
        sweep.mean_rel_l2,
        sweep.mean_abs_l2,
    )
    return sweep


def pareto_row_for_model(
    method: str,
    model: P2innModel,
    mu,
    spec: ProblemSpec,
    counts: BatchCounts,
    seed: int,
    nx: int = DEFAULT_EVAL_NX,
    nt: int = DEFAULT_EVAL_NT,
    reported_efficiency: Optional[float] = None,
) -> ParetoRow:
    """Train loss on the fine-tuning batch stream's first batch, test loss on an unseen batch."""
    train_batch = sample_batch(spec, counts, np.random.default_rng(seed))
    test_batch = sample_batch(spec, counts, np.random.default_rng(seed + TEST_BATCH_SEED_OFFSET))
    train_loss = pinn_loss(model, train_batch, mu)[0].total
    test_loss = pinn_loss(model, test_batch, mu)[0].total
    report = evaluate_model(model, mu, spec, nx, nt)
    # a checkpoint without adapters is the frozen baseline whatever its training flags
    params = 0 if model.adapter_kind == AdapterKind.NONE else trainable_count(model)
    return make_row(
        method, params, train_loss, test_loss, report.rel_l2, reported_efficiency
    )


@dataclass(frozen=True)
class DiagnosticRow:
    method: str
    setting: str
    seed: str
    metric: str
    value: float


@dataclass(frozen=True)
class DiagnosticConfig:
    kinds: Tuple[DiagnosticKind, ...] = tuple(DiagnosticKind)
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    rank: int = DEFAULT_RANK
    train: TrainConfig = TrainConfig(iterations=5000)
    base_mu: CdrParams = CdrParams()
    ood_betas: Tuple[float, ...] = (15.0, 20.0)
    stiff_mu: CdrParams = CdrParams(beta=5.0, rho=15.0)
    affine_mu: CdrParams = CdrParams(beta=5.0)
    phases_deg: Tuple[float, ...] = (0.0, 90.0, 180.0)
    spec: ProblemSpec = ProblemSpec.cdr()
    nx: int = DEFAULT_EVAL_NX
    nt: int = DEFAULT_EVAL_NT


@dataclass
class DiagnosticReport:
    rows: List[DiagnosticRow] = field(default_factory=list)

    def add(self, method: str, setting: str, seed: Any, metrics: Dict[str, float]) -> None:
        for name, value in metrics.items():
            self.rows.append(DiagnosticRow(method, setting, str(seed), name, float(value)))

    def values(self, method: str, setting: str, metric: str) -> List[float]:
        """Per-seed values, aggregates excluded."""
        return [
            r.value
            for r in self.rows
            if r.method == method and r.setting == setting and r.metric == metric
            and r.seed not in ("mean", "std")
        ]

    def with_aggregates(self) -> "DiagnosticReport":
        groups: Dict[Tuple[str, str, str], List[float]] = {}
        for r in self.rows:
            if r.seed not in ("mean", "std"):
                groups.setdefault((r.method, r.setting, r.metric), []).append(r.value)
        rows = [r for r in self.rows if r.seed not in ("mean", "std")]
        for (method, setting, metric), values in groups.items():
            rows.append(DiagnosticRow(method, setting, "mean", metric, float(np.mean(values))))
            rows.append(DiagnosticRow(method, setting, "std", metric, float(np.std(values))))
        return DiagnosticReport(rows=rows)


def write_long_csv(rows: Iterable[DiagnosticRow], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(LONG_HEADER)
    for r in rows:
        writer.writerow([r.method, r.setting, r.seed, r.metric, repr(r.value)])


def _run_metrics(model: P2innModel, history, mu, spec: ProblemSpec, cfg: DiagnosticConfig) -> Dict[str, float]:
    report = evaluate_model(model, mu, spec, cfg.nx, cfg.nt)
    metrics = {
        "rel_l2": report.rel_l2,
        "rel_l2_pct": report.rel_l2_pct,
        "abs_l2": report.abs_l2,
        "trainable": float(trainable_count(model)),
    }
    totals = history.totals
    if totals:
        early = totals[max(0, len(totals) // 10 - 1)]
        metrics["early_loss"] = early
        metrics["final_loss"] = totals[-1]
        metrics["plateau_ratio"] = totals[-1] / early if early > 0 else 1.0
    return metrics


def _subspace_locking(pretrained: P2innModel, cfg: DiagnosticConfig, report: DiagnosticReport) -> None:
    methods = (
        ("frozen", AdapterKind.NONE),
        ("svd_diag", AdapterKind.SVD_DIAG),
        ("mode", AdapterKind.MODE),
    )
    for seed in cfg.seeds:
        train = replace(cfg.train, seed=seed)
        for beta in cfg.ood_betas:
            mu = replace(cfg.base_mu, beta=beta)
            for name, kind in methods:
                model, history = finetune(pretrained, mu, kind, cfg.rank, train, cfg.spec)
                report.add(name, "beta={:g}".format(beta), seed, _run_metrics(model, history, mu, cfg.spec, cfg))


def _mean_tau(model: P2innModel) -> float:
    return float(np.mean([float(np.asarray(layer.adapter.tau)) for _, layer in model.adapted_layers()]))


def _truncation_trap(pretrained: P2innModel, cfg: DiagnosticConfig, report: DiagnosticReport) -> None:
    setting = "rho={:g}".format(cfg.stiff_mu.rho)
    variants = (("mode_tau_zero", ("tau",)), ("mode_tau_trainable", ()))
    for seed in cfg.seeds:
        train = replace(cfg.train, seed=seed)
        for name, frozen in variants:
            model, history = finetune(
                pretrained,
                cfg.stiff_mu,
                AdapterKind.MODE,
                cfg.rank,
                train,
                cfg.spec,
                frozen_fields=frozen,
                overrides={"tau": 0.0},
            )
            metrics = _run_metrics(model, history, cfg.stiff_mu, cfg.spec, cfg)
            metrics["final_tau"] = _mean_tau(model)
            report.add(name, setting, seed, metrics)


def _affine_unlock(pretrained: P2innModel, cfg: DiagnosticConfig, report: DiagnosticReport) -> None:
    variants = (
        ("frozen", AdapterKind.NONE, ()),
        ("svd_diag", AdapterKind.SVD_DIAG, ()),
        ("mode_bias_frozen", AdapterKind.MODE, ("delta_b",)),
        ("mode", AdapterKind.MODE, ()),
    )
    for seed in cfg.seeds:
        train = replace(cfg.train, seed=seed)
        for degrees in cfg.phases_deg:
            spec = replace(cfg.spec, phase=float(np.deg2rad(degrees)))
            for name, kind, frozen in variants:
                model, history = finetune(
                    pretrained, cfg.affine_mu, kind, cfg.rank, train, spec, frozen_fields=frozen
                )
                report.add(
                    name,
                    "phase={:g}".format(degrees),
                    seed,
                    _run_metrics(model, history, cfg.affine_mu, spec, cfg),
                )


_EXPERIMENTS = {
    DiagnosticKind.SUBSPACE: _subspace_locking,
    DiagnosticKind.TRUNCATION: _truncation_trap,
    DiagnosticKind.AFFINE: _affine_unlock,
}


def deadlock_diagnostics(
    pretrained: P2innModel, cfg: DiagnosticConfig = DiagnosticConfig()
) -> Dict[DiagnosticKind, DiagnosticReport]:
    """One long-format report per requested experiment, with mean and std rows."""
    if pretrained.config.param_in != 3:
        raise DimensionError("deadlock diagnostics need a CDR model with three coefficients")
    reports = {}
    for kind in cfg.kinds:
        logging.info("Running %s diagnostic over seeds %s", kind.value, list(cfg.seeds))
        report = DiagnosticReport()
        _EXPERIMENTS[kind](pretrained, cfg, report)
        reports[kind] = report.with_aggregates()
    return reports

import logging
import math
import os
import sys
from dataclasses import replace
from logging.handlers import RotatingFileHandler
from typing import List, Optional, Sequence

import click

from modepinn import constants
from modepinn.bench import (
    DiagnosticConfig,
    DiagnosticReport,
    deadlock_diagnostics,
    evaluate_model,
    pareto_report,
    pareto_row_for_model,
    sweep_errors,
    write_long_csv,
    write_pareto_csv,
)
from modepinn.checkpoint import load_checkpoint_file, save_checkpoint_file
from modepinn.constants import (
    AdapterKind,
    DiagnosticKind,
    DiffusionScheme,
    InitialConditionKind,
    ProblemFamily,
)
from modepinn.directory_utils import (
    ensure_run_directory_exists,
    get_checkpoint_path,
    get_config_echo_path,
    get_diagnostics_file_path,
    get_history_file_path,
    get_log_dir,
    get_metrics_file_path,
    get_pareto_file_path,
)
from modepinn.errors import ConfigError, DimensionError
from modepinn.model import build_p2inn
from modepinn.pde import CdrParams, HelmholtzParams, ProblemSpec
from modepinn.refsolve import helmholtz_exact, strang_cdr, write_field_binary, write_field_csv
from modepinn.run_config import RunConfig, coefficient_names, read_run_config, with_overrides
from modepinn.selftest import run_selftest
from modepinn.train import HISTORY_HEADER, SWEEP_PRESETS, finetune, pretrain
from modepinn.utils import (
    get_absolute_path,
    parse_coefficients,
    write_csv_file,
    write_json_file,
)
from modepinn.validator import (
    initialize_bench_validators,
    initialize_finetune_validators,
    initialize_pretrain_validators,
    run_validators,
)

USAGE_ERRORS = (ConfigError, DimensionError, FileNotFoundError)
_BASE_RECORD_FACTORY = logging.getLogRecordFactory()


def _configure_run_logging(log_filedir: Optional[str], run_id: str):
    handlers = [logging.StreamHandler(sys.stdout)]
    if log_filedir is not None:
        os.makedirs(name=log_filedir, exist_ok=True)
        handlers.append(
            RotatingFileHandler(
                filename=log_filedir + constants.LOG_FILE, maxBytes=10000000, backupCount=5
            )
        )
    logging.basicConfig(
        handlers=handlers,
        level=logging.INFO,
        format="%(asctime)s - %(levelname)s - %(run_id)s - %(message)s",
        datefmt="%d/%m/%Y %H:%M:%S",
        force=True,
    )

    def record_factory(*args, **kwargs):
        record = _BASE_RECORD_FACTORY(*args, **kwargs)
        record.run_id = run_id
        return record

    logging.setLogRecordFactory(record_factory)


def _read_config_file(file_path: str, **overrides) -> RunConfig:
    file_path = get_absolute_path(file_path)
    if not os.path.exists(file_path):
        raise FileNotFoundError("cannot find config file: {}".format(file_path))
    return with_overrides(read_run_config(file_path), **overrides)


def _exit_code_for(error: Exception) -> int:
    return 2 if isinstance(error, USAGE_ERRORS) else 1


def _fail(error: Exception):
    logging.error("Exception:", exc_info=1)
    click.echo("Error: {}".format(error), err=True)
    sys.exit(_exit_code_for(error))


def _start_run(cfg: RunConfig, command: str) -> None:
    ensure_run_directory_exists(cfg.output_dir, cfg.run_id)
    _configure_run_logging(get_log_dir(cfg.output_dir, cfg.run_id), cfg.run_id)
    write_json_file(get_config_echo_path(cfg.output_dir, cfg.run_id), cfg.echo())
    logging.info("Started %s run %s", command, cfg.run_id)


def _write_history(cfg: RunConfig, phase: str, history) -> str:
    path = get_history_file_path(cfg.output_dir, cfg.run_id, phase)
    write_csv_file(path, HISTORY_HEADER, history.rows)
    return path


def _parse_target(text: Optional[str], family: ProblemFamily, current) -> Optional[tuple]:
    if text is None:
        return None
    names = coefficient_names(family)
    try:
        values = parse_coefficients(text, names)
    except ValueError as e:
        raise ConfigError("bad --mu {!r}: {}".format(text, e)) from None
    return tuple(values.get(name, float(old)) for name, old in zip(names, current))


@click.command(name="pretrain")
@click.option("--config", "config_path", required=True, help="Path to the run configuration INI file.")
@click.option("--iterations", type=int, default=None, help="Override [train] iterations.")
@click.option("--seed", type=int, default=None, help="Override the training seed.")
@click.option("--output-dir", default=None, help="Override [output] output_dir.")
@click.option("--run-id", default=None, help="Override [output] run_id.")
def pretrain_cmd(config_path, iterations, seed, output_dir, run_id):
    """Pre-train a P2INN over the configured source distribution."""
    try:
        cfg = _read_config_file(
            config_path, iterations=iterations, seed=seed, output_dir=output_dir, run_id=run_id
        )
        run_validators(initialize_pretrain_validators(cfg))
        _start_run(cfg, "pretrain")
        model = build_p2inn(cfg.architecture, cfg.model_seed)
        trained, history = pretrain(model, cfg.source_distribution(), cfg.train, cfg.problem)
        checkpoint_path = get_checkpoint_path(cfg.output_dir, cfg.run_id)
        save_checkpoint_file(trained, checkpoint_path, cfg.echo())
        history_path = _write_history(cfg, "pretrain", history)
        logging.info("Wrote checkpoint %s and history %s", checkpoint_path, history_path)
        click.echo(checkpoint_path)
    except Exception as e:
        _fail(e)


@click.command(name="finetune")
@click.option("--config", "config_path", required=True, help="Path to the run configuration INI file.")
@click.option("--checkpoint", "checkpoint_path", required=True, help="Pre-trained checkpoint.")
@click.option(
    "--adapter",
    type=click.Choice([kind.value for kind in AdapterKind]),
    default=None,
    help="Override [adapter] kind.",
)
@click.option("--rank", type=int, default=None, help="Override [adapter] rank.")
@click.option("--mu", default=None, help="Target coefficients, e.g. beta=15,nu=0,rho=0.")
@click.option("--iterations", type=int, default=None, help="Override [adapter] iterations.")
@click.option("--seed", type=int, default=None, help="Override the training seed.")
@click.option("--output-dir", default=None, help="Override [output] output_dir.")
@click.option("--run-id", default=None, help="Override [output] run_id.")
def finetune_cmd(config_path, checkpoint_path, adapter, rank, mu, iterations, seed, output_dir, run_id):
    """Attach adapters to a frozen checkpoint and fine-tune them on one target equation."""
    try:
        cfg = _read_config_file(
            config_path,
            adapter_kind=AdapterKind(adapter) if adapter else None,
            adapter_rank=rank,
            adapter_iterations=iterations,
            seed=seed,
            output_dir=output_dir,
            run_id=run_id,
        )
        target = _parse_target(mu, cfg.problem.family, cfg.target)
        cfg = with_overrides(cfg, target=target)
        checkpoint_path = get_absolute_path(checkpoint_path)
        if not os.path.isfile(checkpoint_path):
            raise FileNotFoundError("cannot find checkpoint: {}".format(checkpoint_path))
        model, _ = load_checkpoint_file(checkpoint_path)
        if model.adapter_kind != AdapterKind.NONE:
            raise ConfigError("{} already carries {} adapters".format(checkpoint_path, model.adapter_kind.value))
        run_validators(initialize_finetune_validators(cfg, model))
        _start_run(cfg, "finetune")

        mu_star = cfg.target_params()
        adapted, history = finetune(
            model,
            mu_star,
            cfg.adapter_kind,
            cfg.adapter_rank,
            cfg.adapter_train,
            cfg.problem,
            frozen_fields=cfg.frozen_fields,
            overrides=cfg.adapter_overrides(),
        )
        for name, layer in adapted.adapted_layers():
            count = sum(value.size for value in layer.trainables(name).values())
            click.echo("{}: {} trainable".format(name, count))

        report = evaluate_model(adapted, mu_star, cfg.problem, cfg.eval_nx, cfg.eval_nt)
        metrics = dict(report.metrics())
        metrics["trainable"] = float(sum(v.size for v in adapted.trainable_parameters().values()))
        if history.rows:
            metrics["final_loss"] = history.totals[-1]
        rows = DiagnosticReport()
        rows.add(cfg.adapter_kind.value, mu_star.label(), cfg.adapter_train.seed, metrics)

        save_checkpoint_file(
            adapted, get_checkpoint_path(cfg.output_dir, cfg.run_id, adapted=True), cfg.echo()
        )
        if history.rows:
            _write_history(cfg, "finetune", history)
        with open(get_metrics_file_path(cfg.output_dir, cfg.run_id), "w", newline="") as f:
            write_long_csv(rows.rows, f)
        logging.info(
            "Fine-tuned %s at %s: rel-L2 %.4e (%.2f%%)",
            cfg.adapter_kind.value,
            mu_star.label(),
            report.rel_l2,
            report.rel_l2_pct,
        )
    except Exception as e:
        _fail(e)


@click.command(name="reference")
@click.option(
    "--family",
    type=click.Choice([family.value for family in ProblemFamily]),
    required=True,
    help="Equation family.",
)
@click.option("--beta", type=float, default=0.0, show_default=True)
@click.option("--nu", type=float, default=0.0, show_default=True)
@click.option("--rho", type=float, default=0.0, show_default=True)
@click.option("--a", "a_value", type=float, default=2.5, show_default=True, help="Helmholtz wave number.")
@click.option(
    "--ic",
    type=click.Choice([kind.value for kind in InitialConditionKind]),
    default=InitialConditionKind.GAUSS_WIDE.value,
    show_default=True,
)
@click.option("--phase", type=float, default=0.0, show_default=True, help="Initial-condition shift in degrees.")
@click.option("--nx", type=int, default=constants.DEFAULT_EVAL_NX, show_default=True)
@click.option("--nt", type=int, default=constants.DEFAULT_EVAL_NT, show_default=True, help="Stored levels (or ny).")
@click.option(
    "--scheme",
    type=click.Choice([scheme.value for scheme in DiffusionScheme]),
    default=DiffusionScheme.CRANK_NICOLSON.value,
    show_default=True,
)
@click.option("--output-dir", required=True, help="Directory receiving reference.csv and reference.bin.")
def reference_cmd(family, beta, nu, rho, a_value, ic, phase, nx, nt, scheme, output_dir):
    """Write a ground-truth field on a tensor grid."""
    output_dir = get_absolute_path(output_dir)
    try:
        os.makedirs(output_dir, exist_ok=True)
        _configure_run_logging(os.path.join(output_dir, "logs"), "reference")
        if ProblemFamily(family) == ProblemFamily.HELMHOLTZ:
            params = HelmholtzParams(a=a_value)
            grid = helmholtz_exact(params, nx, nt)
        else:
            params = CdrParams(beta=beta, nu=nu, rho=rho)
            spec = ProblemSpec.cdr(ic=InitialConditionKind(ic), phase=math.radians(phase))
            grid = strang_cdr(params, spec, nx, nt, DiffusionScheme(scheme))
        description = "{} {}".format(family, params.label())
        with open(os.path.join(output_dir, constants.REFERENCE_CSV_FILE), "w", newline="") as f:
            write_field_csv(grid, f, description)
        with open(os.path.join(output_dir, constants.REFERENCE_BIN_FILE), "wb") as f:
            write_field_binary(grid, f)
        logging.info("Wrote %s reference field %sx%s to %s", description, grid.nt, grid.nx, output_dir)
    except Exception as e:
        _fail(e)


def _method_names(headers: Sequence[dict], paths: Sequence[str]) -> List[str]:
    kinds = [header["adapter_kind"] for header in headers]
    return [
        kind if kinds.count(kind) == 1 else "{}:{}".format(kind, os.path.basename(path))
        for kind, path in zip(kinds, paths)
    ]


@click.command(name="bench")
@click.option("--config", "config_path", required=True, help="Path to the run configuration INI file.")
@click.option("--checkpoint", "checkpoint_paths", multiple=True, help="Adapted checkpoint; repeat for several.")
@click.option(
    "--diagnostics",
    type=click.Choice([kind.value for kind in DiagnosticKind] + ["all"]),
    multiple=True,
    help="Deadlock diagnostic to run; repeat for several.",
)
@click.option("--pretrained", "pretrained_path", default=None, help="Frozen checkpoint for the diagnostics.")
@click.option("--sweep", multiple=True, type=click.Choice(sorted(SWEEP_PRESETS)), help="Evaluation sweep.")
@click.option("--seed", "seeds", type=int, multiple=True, help="Diagnostic seed; repeat for several.")
@click.option("--output-dir", default=None, help="Override [output] output_dir.")
@click.option("--run-id", default=None, help="Override [output] run_id.")
def bench_cmd(config_path, checkpoint_paths, diagnostics, pretrained_path, sweep, seeds, output_dir, run_id):
    """Pareto table over adapted checkpoints, plus optional deadlock diagnostics."""
    try:
        cfg = _read_config_file(config_path, output_dir=output_dir, run_id=run_id)
        checkpoint_paths = [get_absolute_path(path) for path in checkpoint_paths]
        run_validators(initialize_bench_validators(cfg, checkpoint_paths))
        _start_run(cfg, "bench")

        loaded = [load_checkpoint_file(path) for path in checkpoint_paths]
        methods = _method_names([header for _, header in loaded], checkpoint_paths)
        mu_star = cfg.target_params()
        rows = []
        sweeps = DiagnosticReport()
        for method, (model, _) in zip(methods, loaded):
            if model.config.param_in != cfg.problem.param_dim:
                raise DimensionError(
                    "{} takes {} coefficients, {} has {}".format(
                        method, model.config.param_in, cfg.problem.family.value, cfg.problem.param_dim
                    )
                )
            rows.append(
                pareto_row_for_model(
                    method,
                    model,
                    mu_star,
                    cfg.problem,
                    cfg.adapter_train.counts,
                    cfg.adapter_train.seed,
                    cfg.eval_nx,
                    cfg.eval_nt,
                )
            )
            for name in sweep:
                result = sweep_errors(model, SWEEP_PRESETS[name]().all_params(), cfg.problem, cfg.eval_nx, cfg.eval_nt)
                for label, report in zip(result.labels, result.reports):
                    sweeps.add(method, "{}:{}".format(name, label), cfg.adapter_train.seed, report.metrics())
                sweeps.add(
                    method,
                    name,
                    cfg.adapter_train.seed,
                    {"mean_rel_l2": result.mean_rel_l2, "mean_abs_l2": result.mean_abs_l2},
                )

        entries = pareto_report(rows)
        with open(get_pareto_file_path(cfg.output_dir, cfg.run_id), "w", newline="") as f:
            write_pareto_csv(entries, f)
        for entry in entries:
            click.echo(
                "{} {}: params={} rel_l2={:.4e} efficiency={}{}".format(
                    entry.rank,
                    entry.row.method,
                    entry.row.params,
                    entry.row.rel_l2,
                    "n/a" if entry.row.efficiency is None else "{:.4g}".format(entry.row.efficiency),
                    " dominated by " + ",".join(entry.dominated_by) if entry.dominated else "",
                )
            )
        if sweeps.rows:
            with open(get_metrics_file_path(cfg.output_dir, cfg.run_id), "w", newline="") as f:
                write_long_csv(sweeps.rows, f)

        kinds = _diagnostic_kinds(diagnostics)
        if kinds:
            pretrained = _pretrained_model(pretrained_path, loaded)
            diag_cfg = DiagnosticConfig(
                kinds=kinds,
                seeds=tuple(seeds) or constants.DEFAULT_SEEDS,
                rank=cfg.adapter_rank,
                train=cfg.adapter_train,
                base_mu=mu_star,
                spec=replace(cfg.problem, phase=0.0),
                nx=cfg.eval_nx,
                nt=cfg.eval_nt,
            )
            for kind, report in deadlock_diagnostics(pretrained, diag_cfg).items():
                path = get_diagnostics_file_path(cfg.output_dir, cfg.run_id, kind.value)
                with open(path, "w", newline="") as f:
                    write_long_csv(report.rows, f)
                logging.info("Wrote %s diagnostic to %s", kind.value, path)
    except Exception as e:
        _fail(e)


def _diagnostic_kinds(requested: Sequence[str]):
    if "all" in requested:
        return tuple(DiagnosticKind)
    return tuple(DiagnosticKind(value) for value in dict.fromkeys(requested))


def _pretrained_model(path: Optional[str], loaded):
    if path is not None:
        path = get_absolute_path(path)
        if not os.path.isfile(path):
            raise FileNotFoundError("cannot find checkpoint: {}".format(path))
        model, _ = load_checkpoint_file(path)
    else:
        frozen = [model for model, _ in loaded if model.adapter_kind == AdapterKind.NONE]
        if not frozen:
            raise ConfigError("diagnostics need --pretrained or a checkpoint without adapters")
        model = frozen[0]
    if model.adapter_kind != AdapterKind.NONE:
        raise ConfigError("diagnostics start from a checkpoint without adapters")
    return model


@click.command(name="selftest")
def selftest_cmd():
    """Run the invariant suite and print pass/fail per property."""
    _configure_run_logging(None, "selftest")
    results = run_selftest()
    failed = [result.property_name for result in results if not result.passed]
    if failed:
        click.echo("Failed properties: {}".format(", ".join(failed)), err=True)
        sys.exit(1)
    click.echo("All {} properties passed".format(len(results)))

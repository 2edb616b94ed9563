import logging
import os

from modepinn import constants


def get_run_dir(output_dir: str, run_id: str) -> str:
    return os.path.join(output_dir, run_id)


def get_log_dir(output_dir: str, run_id: str) -> str:
    return os.path.join(get_run_dir(output_dir, run_id), "logs")


def get_checkpoint_path(output_dir: str, run_id: str, adapted: bool = False) -> str:
    filename = constants.ADAPTED_CHECKPOINT_FILE if adapted else constants.CHECKPOINT_FILE
    return os.path.join(get_run_dir(output_dir, run_id), filename)


def get_history_file_path(output_dir: str, run_id: str, phase: str = "") -> str:
    filename = constants.HISTORY_FILE
    if phase:
        filename = "{}-{}".format(phase, filename)
    return os.path.join(get_run_dir(output_dir, run_id), filename)


def get_metrics_file_path(output_dir: str, run_id: str) -> str:
    return os.path.join(get_run_dir(output_dir, run_id), constants.METRICS_FILE)


def get_pareto_file_path(output_dir: str, run_id: str) -> str:
    return os.path.join(get_run_dir(output_dir, run_id), constants.PARETO_FILE)


def get_diagnostics_file_path(output_dir: str, run_id: str, kind: str) -> str:
    return os.path.join(get_run_dir(output_dir, run_id), "diagnostics-{}.csv".format(kind))


def get_config_echo_path(output_dir: str, run_id: str) -> str:
    return os.path.join(get_run_dir(output_dir, run_id), constants.CONFIG_ECHO_FILE)


def does_directory_exist(dirname: str) -> bool:
    return os.path.exists(dirname) and os.path.isdir(dirname)


def ensure_run_directory_exists(output_dir: str, run_id: str) -> str:
    run_dir = get_run_dir(output_dir, run_id)
    if not does_directory_exist(run_dir):
        logging.info("Creating run directory %s", run_dir)
    os.makedirs(name=run_dir, exist_ok=True)
    return run_dir

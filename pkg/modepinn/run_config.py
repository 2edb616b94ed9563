"""
Run configuration read from an INI file.

Sections: [model] [problem] [train] [adapter] [output]. Missing keys fall back
to the defaults in ``constants``; CLI flags override single keys through
``with_overrides``.
"""

import logging
import math
import os
from configparser import ConfigParser, Error as ConfigParserError
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Optional, Tuple

from modepinn import constants
from modepinn.constants import (
    ADAPTER_SECTION,
    MODEL_SECTION,
    OUTPUT_DIR_KEY,
    OUTPUT_SECTION,
    PROBLEM_SECTION,
    RUN_ID_KEY,
    SEED_KEY,
    TRAIN_SECTION,
    ActivationKind,
    AdapterKind,
    BoundaryConditionKind,
    InitialConditionKind,
    ProblemFamily,
)
from modepinn.errors import ConfigError
from modepinn.model import ARCHITECTURE_PRESETS, ArchitectureConfig
from modepinn.pde import BatchCounts, ProblemSpec
from modepinn.train import LossWeights, SourceDistribution, TrainConfig
from modepinn.utils import flatten_json_data, get_absolute_path

CDR_COEFFICIENTS = ("beta", "nu", "rho")
HELMHOLTZ_COEFFICIENTS = ("a",)
DEFAULT_OUTPUT_DIR = "runs"
DEFAULT_RUN_ID = "run"
DEFAULT_SOURCES = {ProblemFamily.CDR: "convection", ProblemFamily.HELMHOLTZ: "helmholtz"}


def coefficient_names(family: ProblemFamily) -> Tuple[str, ...]:
    return CDR_COEFFICIENTS if family == ProblemFamily.CDR else HELMHOLTZ_COEFFICIENTS


@dataclass(frozen=True)
class RunConfig:
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    model_seed: int = 0
    preset: str = "custom"
    problem: ProblemSpec = field(default_factory=ProblemSpec.cdr)
    target: Tuple[float, ...] = (0.0, 0.0, 0.0)
    source: str = DEFAULT_SOURCES[ProblemFamily.CDR]
    train: TrainConfig = field(default_factory=TrainConfig)
    adapter_kind: AdapterKind = AdapterKind.MODE
    adapter_rank: int = constants.DEFAULT_RANK
    adapter_train: TrainConfig = field(
        default_factory=lambda: TrainConfig(learning_rate=constants.DEFAULT_FINETUNE_LEARNING_RATE)
    )
    frozen_fields: Tuple[str, ...] = ()
    tau_init: Optional[float] = None
    output_dir: str = DEFAULT_OUTPUT_DIR
    run_id: str = DEFAULT_RUN_ID
    eval_nx: int = constants.DEFAULT_EVAL_NX
    eval_nt: int = constants.DEFAULT_EVAL_NT

    def __post_init__(self):
        if len(self.target) != self.problem.param_dim:
            raise ConfigError(
                "{} target needs {} coefficients, got {}".format(
                    self.problem.family.value, self.problem.param_dim, len(self.target)
                )
            )
        if self.architecture.param_in != self.problem.param_dim:
            raise ConfigError("architecture param_in does not match the problem family")
        if self.adapter_rank < 1:
            raise ConfigError("adapter rank must be at least 1, got {}".format(self.adapter_rank))
        if self.eval_nx < 2 or self.eval_nt < 2:
            raise ConfigError("evaluation grids need at least two points per axis")
        if not self.run_id or os.sep in self.run_id:
            raise ConfigError("run_id must be a plain directory name, got {!r}".format(self.run_id))

    def target_params(self):
        return self.problem.params_from_vector(self.target)

    def source_distribution(self) -> SourceDistribution:
        return SourceDistribution.parse(self.source, self.problem.family)

    def adapter_overrides(self) -> Optional[Dict[str, float]]:
        return None if self.tau_init is None else {"tau": self.tau_init}

    def echo(self) -> Dict[str, Any]:
        """Flattened dotted-key form, enums by value."""
        return flatten_json_data(_plain(asdict(self)))


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _enum(enum_cls, text: str, key: str):
    try:
        return enum_cls(text.strip().lower())
    except ValueError:
        raise ConfigError(
            "invalid value {!r} for {}, expected one of {}".format(
                text, key, [member.value for member in enum_cls]
            )
        ) from None


def _get(config: ConfigParser, section: str, key: str, convert, fallback):
    raw = config.get(section, key, fallback=None)
    if raw is None or raw.strip() == "":
        return fallback
    try:
        return convert(raw.strip())
    except ValueError:
        raise ConfigError("invalid value {!r} for [{}] {}".format(raw, section, key)) from None


def _int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(text)
    return int(value)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _widths(text: str) -> Tuple[int, ...]:
    return tuple(_int(part) for part in text.split(",") if part.strip())


def _names(text: str) -> Tuple[str, ...]:
    return tuple(part.strip() for part in text.split(",") if part.strip())


def _train_config(config: ConfigParser, section: str, base: TrainConfig) -> TrainConfig:
    counts = BatchCounts(
        n_f=_get(config, section, "n_f", _int, base.counts.n_f),
        n_u=_get(config, section, "n_u", _int, base.counts.n_u),
        n_b=_get(config, section, "n_b", _int, base.counts.n_b),
    )
    weights = LossWeights(
        w_pde=_get(config, section, "w_pde", float, base.weights.w_pde),
        w_ic=_get(config, section, "w_ic", float, base.weights.w_ic),
        w_bc=_get(config, section, "w_bc", float, base.weights.w_bc),
    )
    return TrainConfig(
        iterations=_get(config, section, "iterations", _int, base.iterations),
        equations_per_batch=_get(config, section, "equations_per_batch", _int, base.equations_per_batch),
        counts=counts,
        learning_rate=_get(config, section, "learning_rate", float, base.learning_rate),
        weights=weights,
        bc_derivatives=_get(config, section, "bc_derivatives", _bool, base.bc_derivatives),
        log_every=_get(config, section, "log_every", _int, base.log_every),
        seed=_get(config, section, SEED_KEY, _int, base.seed),
    )


def _problem(config: ConfigParser) -> ProblemSpec:
    family = _enum(ProblemFamily, config.get(PROBLEM_SECTION, "family", fallback="cdr"), "family")
    if family == ProblemFamily.HELMHOLTZ:
        base = ProblemSpec.helmholtz()
        if config.get(PROBLEM_SECTION, "ic", fallback="").strip():
            raise ConfigError("Helmholtz problems take no initial condition")
        bc = _enum(BoundaryConditionKind, config.get(PROBLEM_SECTION, "bc", fallback="dirichlet"), "bc")
        return replace(base, bc=bc)
    ic = _enum(InitialConditionKind, config.get(PROBLEM_SECTION, "ic", fallback="gauss_wide"), "ic")
    bc = _enum(BoundaryConditionKind, config.get(PROBLEM_SECTION, "bc", fallback="periodic"), "bc")
    phase_deg = _get(config, PROBLEM_SECTION, "phase", float, 0.0)
    x_bounds = (
        _get(config, PROBLEM_SECTION, "x_min", float, constants.CDR_X_BOUNDS[0]),
        _get(config, PROBLEM_SECTION, "x_max", float, constants.CDR_X_BOUNDS[1]),
    )
    t_bounds = (
        constants.CDR_T_BOUNDS[0],
        _get(config, PROBLEM_SECTION, "t_max", float, constants.CDR_T_BOUNDS[1]),
    )
    return ProblemSpec(
        family=family,
        x_bounds=x_bounds,
        t_bounds=t_bounds,
        ic=ic,
        bc=bc,
        phase=math.radians(phase_deg),
    )


def _architecture(config: ConfigParser, param_in: int) -> Tuple[ArchitectureConfig, str]:
    activation = _enum(ActivationKind, config.get(MODEL_SECTION, "activation", fallback="tanh"), "activation")
    preset = config.get(MODEL_SECTION, "preset", fallback="").strip()
    if preset:
        if preset not in ARCHITECTURE_PRESETS:
            raise ConfigError(
                "unknown architecture preset {!r}, expected one of {}".format(preset, sorted(ARCHITECTURE_PRESETS))
            )
        return ARCHITECTURE_PRESETS[preset](param_in=param_in, activation=activation), preset
    try:
        architecture = ArchitectureConfig(
            param_in=param_in,
            coord_widths=_get(config, MODEL_SECTION, "coord_widths", _widths, constants.DEFAULT_COORD_WIDTHS),
            param_widths=_get(config, MODEL_SECTION, "param_widths", _widths, constants.DEFAULT_PARAM_WIDTHS),
            decoder_widths=_get(config, MODEL_SECTION, "decoder_widths", _widths, constants.DEFAULT_DECODER_WIDTHS),
            activation=activation,
        )
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return architecture, "custom"


def parse_run_config(config: ConfigParser) -> RunConfig:
    problem = _problem(config)
    architecture, preset = _architecture(config, problem.param_dim)
    names = coefficient_names(problem.family)
    defaults = {"beta": 0.0, "nu": 0.0, "rho": 0.0, "a": 2.5}
    target = tuple(_get(config, PROBLEM_SECTION, name, float, defaults[name]) for name in names)

    train = _train_config(config, TRAIN_SECTION, TrainConfig())
    adapter_train = _train_config(
        config,
        ADAPTER_SECTION,
        replace(train, learning_rate=constants.DEFAULT_FINETUNE_LEARNING_RATE),
    )
    cfg = RunConfig(
        architecture=architecture,
        model_seed=_get(config, MODEL_SECTION, SEED_KEY, _int, 0),
        preset=preset,
        problem=problem,
        target=target,
        source=config.get(PROBLEM_SECTION, "source", fallback=DEFAULT_SOURCES[problem.family]).strip(),
        train=train,
        adapter_kind=_enum(AdapterKind, config.get(ADAPTER_SECTION, "kind", fallback="mode"), "kind"),
        adapter_rank=_get(config, ADAPTER_SECTION, "rank", _int, constants.DEFAULT_RANK),
        adapter_train=adapter_train,
        frozen_fields=_get(config, ADAPTER_SECTION, "freeze", _names, ()),
        tau_init=_get(config, ADAPTER_SECTION, "tau_init", float, None),
        output_dir=get_absolute_path(
            config.get(OUTPUT_SECTION, OUTPUT_DIR_KEY, fallback=DEFAULT_OUTPUT_DIR).strip()
        ),
        run_id=config.get(OUTPUT_SECTION, RUN_ID_KEY, fallback=DEFAULT_RUN_ID).strip(),
        eval_nx=_get(config, OUTPUT_SECTION, "eval_nx", _int, constants.DEFAULT_EVAL_NX),
        eval_nt=_get(config, OUTPUT_SECTION, "eval_nt", _int, constants.DEFAULT_EVAL_NT),
    )
    # fail early on a bad source description
    cfg.source_distribution()
    return cfg


def read_run_config(file_path: str) -> RunConfig:
    if not os.path.exists(file_path):
        raise FileNotFoundError("cannot find config file: {}".format(file_path))
    config = ConfigParser()
    try:
        config.read(file_path)
    except ConfigParserError as e:
        raise ConfigError("cannot parse config file {}: {}".format(file_path, e)) from None
    cfg = parse_run_config(config)
    logging.debug("Read run config %s from %s", cfg.run_id, file_path)
    return cfg


def with_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Replace top-level fields; ``adapter_iterations`` targets fine-tuning and ``seed`` lands in both train configs."""
    overrides = {k: v for k, v in overrides.items() if v is not None}
    iterations = overrides.pop("iterations", None)
    adapter_iterations = overrides.pop("adapter_iterations", None)
    seed = overrides.pop("seed", None)
    train, adapter_train = cfg.train, cfg.adapter_train
    if iterations is not None:
        train = replace(train, iterations=iterations)
    if adapter_iterations is not None:
        adapter_train = replace(adapter_train, iterations=adapter_iterations)
    if seed is not None:
        train = replace(train, seed=seed)
        adapter_train = replace(adapter_train, seed=seed)
    if "output_dir" in overrides:
        overrides["output_dir"] = get_absolute_path(overrides["output_dir"])
    try:
        return replace(cfg, train=train, adapter_train=adapter_train, **overrides)
    except ValueError as e:
        raise ConfigError(str(e)) from None

# constants.py

"""This module defines project-level constants."""

import math
from enum import Enum

LOG_FILE = "/modepinn.log"
CHECKPOINT_FILE = "checkpoint.bin"
ADAPTED_CHECKPOINT_FILE = "checkpoint-adapted.bin"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
PARETO_FILE = "pareto.csv"
CONFIG_ECHO_FILE = "config-echo.json"
REFERENCE_CSV_FILE = "reference.csv"
REFERENCE_BIN_FILE = "reference.bin"
CHECKPOINT_MAGIC = b"MODEPINN"
CHECKPOINT_VERSION = 1
DESK_RUNS_ENV = "MODEPINN_DESK_RUNS"

# config sections
MODEL_SECTION = "model"
PROBLEM_SECTION = "problem"
TRAIN_SECTION = "train"
ADAPTER_SECTION = "adapter"
OUTPUT_SECTION = "output"
SEED_KEY = "seed"
OUTPUT_DIR_KEY = "output_dir"
RUN_ID_KEY = "run_id"

# defaults
DEFAULT_COORD_WIDTHS = (32, 32)
DEFAULT_PARAM_WIDTHS = (32, 32)
DEFAULT_DECODER_WIDTHS = (50, 50, 50)
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_FINETUNE_LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LOSS_WEIGHTS = (1.0, 100.0, 100.0)
DEFAULT_EQUATIONS_PER_BATCH = 10
DEFAULT_N_F = 1000
DEFAULT_N_U = 200
DEFAULT_N_B = 200
DIVERGENCE_THRESHOLD = 1e6
LORA_INIT_STD = 0.01
DEFAULT_RANK = 4
DEFAULT_EVAL_NX = 256
DEFAULT_EVAL_NT = 101
DEFAULT_SEEDS = (0, 1, 2)

CDR_X_BOUNDS = (0.0, 2.0 * math.pi)
CDR_T_BOUNDS = (0.0, 1.0)
HELMHOLTZ_BOUNDS = (-1.0, 1.0)
HELMHOLTZ_KAPPA = 1.0
GAUSS_WIDE_SIGMA = math.pi / 2.0
GAUSS_NARROW_SIGMA = math.pi / 4.0


class ActivationKind(Enum):
    TANH = "tanh"
    SILU = "silu"


class ProblemFamily(Enum):
    CDR = "cdr"
    HELMHOLTZ = "helmholtz"


class InitialConditionKind(Enum):
    GAUSS_WIDE = "gauss_wide"
    GAUSS_NARROW = "gauss_narrow"
    SINUSOID = "sinusoid"


class BoundaryConditionKind(Enum):
    PERIODIC = "periodic"
    DIRICHLET = "dirichlet"


class DiffusionScheme(Enum):
    CRANK_NICOLSON = "crank_nicolson"
    EXPLICIT = "explicit"


class AdapterKind(Enum):
    NONE = "none"
    MODE = "mode"
    SVD_DIAG = "svd_diag"
    LORA = "lora"
    IA3 = "ia3"
    BIAS_ONLY = "bias_only"
    FULL = "full"


class DiagnosticKind(Enum):
    SUBSPACE = "subspace"
    TRUNCATION = "truncation"
    AFFINE = "affine"

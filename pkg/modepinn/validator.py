import logging
import os
from abc import ABCMeta, abstractmethod
from typing import List, Sequence

from modepinn.constants import CHECKPOINT_MAGIC, AdapterKind
from modepinn.directory_utils import does_directory_exist
from modepinn.errors import ConfigError, DimensionError
from modepinn.model import ArchitectureConfig, P2innModel, default_layer_range
from modepinn.run_config import RunConfig
from modepinn.script_models import ValidationResponse, ValidationResponseStatus

RANKED_KINDS = (AdapterKind.MODE, AdapterKind.SVD_DIAG, AdapterKind.LORA)


class RunValidators(metaclass=ABCMeta):
    @abstractmethod
    def validate(self) -> ValidationResponse:
        pass


def _response(name: str, msg: str, passed: bool) -> ValidationResponse:
    return ValidationResponse(
        validation_name=name,
        validation_msg=msg,
        validation_status=ValidationResponseStatus.PASSED if passed else ValidationResponseStatus.FAILED,
    )


class OutputDirectoryValidator(RunValidators):
    def __init__(self, output_dir: str):
        self.output_dir = output_dir
        self.validation_name = "Validation to check the output directory is creatable"

    def _nearest_existing(self) -> str:
        path = os.path.abspath(self.output_dir)
        while not os.path.exists(path):
            parent = os.path.dirname(path)
            if parent == path:
                break
            path = parent
        return path

    def validate(self) -> ValidationResponse:
        existing = self._nearest_existing()
        if not does_directory_exist(existing):
            return _response(self.validation_name, "{} is not a directory".format(existing), False)
        if not os.access(existing, os.W_OK):
            return _response(self.validation_name, "{} is not writable".format(existing), False)
        return _response(self.validation_name, "Output directory usable", True)


class CheckpointFileValidator(RunValidators):
    def __init__(self, checkpoint_path: str):
        self.checkpoint_path = checkpoint_path
        self.validation_name = "Validation to check the checkpoint file exists"

    def validate(self) -> ValidationResponse:
        if not os.path.isfile(self.checkpoint_path):
            return _response(
                self.validation_name, "checkpoint not found: {}".format(self.checkpoint_path), False
            )
        with open(self.checkpoint_path, "rb") as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            return _response(
                self.validation_name, "{} is not a modepinn checkpoint".format(self.checkpoint_path), False
            )
        return _response(self.validation_name, "Checkpoint present", True)


class CheckpointSetValidator(RunValidators):
    def __init__(self, checkpoint_paths: Sequence[str]):
        self.checkpoint_paths = list(checkpoint_paths)
        self.validation_name = "Validation to check at least one checkpoint is given"

    def validate(self) -> ValidationResponse:
        if not self.checkpoint_paths:
            return _response(self.validation_name, "no checkpoints given", False)
        return _response(
            self.validation_name, "{} checkpoints given".format(len(self.checkpoint_paths)), True
        )


class ArchitectureValidator(RunValidators):
    def __init__(self, model: P2innModel, expected: ArchitectureConfig):
        self.model = model
        self.expected = expected
        self.validation_name = "Validation to check the checkpoint matches the configured architecture"

    def validate(self) -> ValidationResponse:
        if self.model.config != self.expected:
            return _response(
                self.validation_name,
                "checkpoint layers {} do not match configured layers {}".format(
                    self.model.config.layer_shapes(), self.expected.layer_shapes()
                ),
                False,
            )
        return _response(self.validation_name, "Architecture matches", True)


class AdapterRankValidator(RunValidators):
    def __init__(self, model: P2innModel, kind: AdapterKind, rank: int):
        self.model = model
        self.kind = kind
        self.rank = rank
        self.validation_name = "Validation to check the adapter rank fits the adapted layers"

    def validate(self) -> ValidationResponse:
        if self.kind not in RANKED_KINDS:
            return ValidationResponse(
                validation_name=self.validation_name,
                validation_msg="{} adapters have no rank".format(self.kind.value),
                validation_status=ValidationResponseStatus.SKIPPED,
            )
        depth = len(self.model.decoder)
        for index in default_layer_range(self.kind, depth):
            layer = self.model.decoder[index - 1]
            limit = min(layer.out_dim, layer.in_dim)
            if self.rank > limit:
                return _response(
                    self.validation_name,
                    "rank {} exceeds decoder.{} dimensions {}x{}".format(
                        self.rank, index, layer.out_dim, layer.in_dim
                    ),
                    False,
                )
        return _response(self.validation_name, "Rank {} fits".format(self.rank), True)


def initialize_pretrain_validators(cfg: RunConfig) -> List[RunValidators]:
    return [OutputDirectoryValidator(output_dir=cfg.output_dir)]


def initialize_finetune_validators(cfg: RunConfig, model: P2innModel) -> List[RunValidators]:
    return [
        OutputDirectoryValidator(output_dir=cfg.output_dir),
        ArchitectureValidator(model=model, expected=cfg.architecture),
        AdapterRankValidator(model=model, kind=cfg.adapter_kind, rank=cfg.adapter_rank),
    ]


def initialize_bench_validators(cfg: RunConfig, checkpoint_paths: Sequence[str]) -> List[RunValidators]:
    return [
        CheckpointSetValidator(checkpoint_paths=checkpoint_paths),
        OutputDirectoryValidator(output_dir=cfg.output_dir),
    ] + [CheckpointFileValidator(checkpoint_path=path) for path in checkpoint_paths]


def run_validators(validators: Sequence[RunValidators]) -> None:
    """Raise on the first failure; architecture and rank failures are dimension errors."""
    for v in validators:
        validation_response = v.validate()
        if validation_response.validation_status == ValidationResponseStatus.FAILED:
            logging.error("Validation error: %s", validation_response.validation_msg)
            if isinstance(v, (ArchitectureValidator, AdapterRankValidator)):
                raise DimensionError(validation_response.validation_msg)
            raise ConfigError(validation_response.validation_msg)
        logging.debug("%s: %s", validation_response.validation_name, validation_response.validation_msg)

"""
Binary checkpoints.

Layout: magic, ``<I`` format version, ``<Q`` header length, header JSON
(sorted keys), base parameter blobs in header order, then the adapter
section: ``<Q`` layer count and per layer a length-prefixed kind tag, a
length-prefixed layer name, ``<Q`` rank and the trainable blobs in field
order. SVD factors are not stored; loading recomputes them from W0.
"""

import json
import struct
from typing import Any, BinaryIO, Dict, Optional, Tuple

from modepinn.adapters import adapter_field_names, restore_adapter
from modepinn.autodiff import value_of
from modepinn.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, AdapterKind
from modepinn.errors import DimensionError
from modepinn.linalg import read_matrix, write_matrix
from modepinn.model import ArchitectureConfig, LayerSpec, P2innModel

_LENGTH = "<Q"


def _write_text(stream: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    stream.write(struct.pack(_LENGTH, len(data)))
    stream.write(data)


def _read_exact(stream: BinaryIO, size: int) -> bytes:
    data = stream.read(size)
    if len(data) != size:
        raise EOFError("truncated checkpoint")
    return data


def _read_length(stream: BinaryIO) -> int:
    return struct.unpack(_LENGTH, _read_exact(stream, struct.calcsize(_LENGTH)))[0]


def _read_text(stream: BinaryIO) -> str:
    return _read_exact(stream, _read_length(stream)).decode("utf-8")


def checkpoint_header(model: P2innModel, run_config: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "architecture": model.config.echo(),
        "seed": model.seed,
        "parameter_order": list(model.base_parameters()),
        "frozen_layers": [name for name, layer in model.named_layers() if layer.frozen],
        "adapter_kind": model.adapter_kind.value,
        "adapter_rank": model.adapter_rank,
        "frozen_fields": {
            name: sorted(layer.frozen_fields) for name, layer in model.adapted_layers()
        },
        "run_config": run_config or {},
    }


def save_checkpoint(
    model: P2innModel, stream: BinaryIO, run_config: Optional[Dict[str, Any]] = None
) -> None:
    header = json.dumps(checkpoint_header(model, run_config), sort_keys=True).encode("utf-8")
    stream.write(CHECKPOINT_MAGIC)
    stream.write(struct.pack("<I", CHECKPOINT_VERSION))
    stream.write(struct.pack(_LENGTH, len(header)))
    stream.write(header)
    for value in model.base_parameters().values():
        write_matrix(stream, value)
    adapted = model.adapted_layers()
    stream.write(struct.pack(_LENGTH, len(adapted)))
    for name, layer in adapted:
        adapter = layer.adapter
        _write_text(stream, adapter.kind.value)
        _write_text(stream, name)
        stream.write(struct.pack(_LENGTH, adapter.rank))
        for field_name in adapter.trainable_fields:
            write_matrix(stream, value_of(getattr(adapter, field_name)))


def load_checkpoint(stream: BinaryIO) -> Tuple[P2innModel, Dict[str, Any]]:
    magic = _read_exact(stream, len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise ValueError("not a modepinn checkpoint")
    (version,) = struct.unpack("<I", _read_exact(stream, 4))
    if version != CHECKPOINT_VERSION:
        raise ValueError("unsupported checkpoint version {}".format(version))
    header = json.loads(_read_exact(stream, _read_length(stream)).decode("utf-8"))
    config = ArchitectureConfig.from_echo(header["architecture"])

    blobs = {name: read_matrix(stream) for name in header["parameter_order"]}
    frozen = set(header["frozen_layers"])
    groups: Dict[str, list] = {}
    for group, shapes in config.layer_shapes().items():
        layers = []
        for index, (d_out, d_in) in enumerate(shapes, start=1):
            name = "{}.{}".format(group, index)
            weight = blobs[name + ".weight"]
            bias = blobs[name + ".bias"].reshape(-1)
            if weight.shape != (d_out, d_in):
                raise DimensionError(
                    "{} stored as {}x{}, architecture says {}x{}".format(
                        name, weight.shape[0], weight.shape[1], d_out, d_in
                    )
                )
            layers.append(LayerSpec(weight=weight, bias=bias, frozen=name in frozen))
        groups[group] = layers
    model = P2innModel(
        config=config,
        seed=int(header["seed"]),
        adapter_kind=AdapterKind(header["adapter_kind"]),
        adapter_rank=int(header["adapter_rank"]),
        **groups,
    )

    layers = dict(model.named_layers())
    for _ in range(_read_length(stream)):
        kind = AdapterKind(_read_text(stream))
        name = _read_text(stream)
        rank = _read_length(stream)
        layer = layers[name]
        values = {field_name: read_matrix(stream) for field_name in adapter_field_names(kind)}
        layer.adapter = restore_adapter(kind, layer.weight, layer.bias, rank, values)
        layer.frozen_fields = frozenset(header["frozen_fields"].get(name, ()))
    return model, header


def save_checkpoint_file(model: P2innModel, path: str, run_config: Optional[Dict[str, Any]] = None) -> None:
    with open(path, "wb") as f:
        save_checkpoint(model, f, run_config)


def load_checkpoint_file(path: str) -> Tuple[P2innModel, Dict[str, Any]]:
    with open(path, "rb") as f:
        return load_checkpoint(f)


def ensure_architecture(model: P2innModel, expected: ArchitectureConfig) -> None:
    if model.config != expected:
        raise DimensionError(
            "checkpoint architecture {} does not match configured {}".format(
                model.config.layer_shapes(), expected.layer_shapes()
            )
        )

"""
The P2INN network: a coordinate encoder and a parameter encoder whose latents
are concatenated (coordinate latent first) and decoded to a scalar field.

Layers are plain (weight, bias) pairs. Training never touches them directly;
``bind_layers`` turns every layer into an ``AffineMap`` whose trainable pieces
are registered on a tape, so the same network serves evaluation and
differentiation.
"""

import copy
import logging
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from modepinn.adapters import AdapterParams, adapter_field_names, init_adapter
from modepinn.autodiff import (
    AffineMap,
    Jet1D,
    Jet2D,
    Tape,
    TaylorBundle,
    concat_bundles,
    constant_bundle,
    input_bundle,
    propagate,
    value_of,
)
from modepinn.constants import (
    DEFAULT_COORD_WIDTHS,
    DEFAULT_DECODER_WIDTHS,
    DEFAULT_PARAM_WIDTHS,
    DEFAULT_RANK,
    ActivationKind,
    AdapterKind,
)
from modepinn.errors import DimensionError

GROUPS = ("coord_encoder", "param_encoder", "decoder")


@dataclass(frozen=True)
class ArchitectureConfig:
    coord_in: int = 2
    param_in: int = 3
    coord_widths: Tuple[int, ...] = DEFAULT_COORD_WIDTHS
    param_widths: Tuple[int, ...] = DEFAULT_PARAM_WIDTHS
    decoder_widths: Tuple[int, ...] = DEFAULT_DECODER_WIDTHS
    activation: ActivationKind = ActivationKind.TANH

    def __post_init__(self):
        for name in ("coord_widths", "param_widths", "decoder_widths"):
            widths = tuple(int(w) for w in getattr(self, name))
            if not widths or min(widths) < 1:
                raise ValueError("{} needs at least one positive width, got {}".format(name, widths))
            object.__setattr__(self, name, widths)
        if self.coord_in < 1 or self.param_in < 1:
            raise ValueError("input widths must be positive")

    @property
    def latent_width(self) -> int:
        return self.coord_widths[-1] + self.param_widths[-1]

    def layer_shapes(self) -> Dict[str, List[Tuple[int, int]]]:
        """(d_out, d_in) per layer of each sub-network."""

        def chain(widths):
            return [(widths[i + 1], widths[i]) for i in range(len(widths) - 1)]

        return {
            "coord_encoder": chain((self.coord_in,) + self.coord_widths),
            "param_encoder": chain((self.param_in,) + self.param_widths),
            "decoder": chain((self.latent_width,) + self.decoder_widths + (1,)),
        }

    def full_param_count(self) -> int:
        return sum(
            d_out * d_in + d_out
            for shapes in self.layer_shapes().values()
            for d_out, d_in in shapes
        )

    def echo(self) -> Dict[str, Any]:
        return {
            "coord_in": self.coord_in,
            "param_in": self.param_in,
            "coord_widths": list(self.coord_widths),
            "param_widths": list(self.param_widths),
            "decoder_widths": list(self.decoder_widths),
            "activation": self.activation.value,
        }

    @classmethod
    def from_echo(cls, echo: Dict[str, Any]) -> "ArchitectureConfig":
        return cls(
            coord_in=int(echo["coord_in"]),
            param_in=int(echo["param_in"]),
            coord_widths=tuple(echo["coord_widths"]),
            param_widths=tuple(echo["param_widths"]),
            decoder_widths=tuple(echo["decoder_widths"]),
            activation=ActivationKind(echo["activation"]),
        )

    @classmethod
    def desk(
        cls, param_in: int = 3, activation: ActivationKind = ActivationKind.TANH
    ) -> "ArchitectureConfig":
        return cls(param_in=param_in, activation=activation)

    @classmethod
    def paper_scale(
        cls, param_in: int = 3, activation: ActivationKind = ActivationKind.TANH
    ) -> "ArchitectureConfig":
        """76,872 scalars for the three-coefficient CDR family."""
        return cls(
            param_in=param_in,
            coord_widths=(77, 77),
            param_widths=(77, 77),
            decoder_widths=(80,) * 9,
            activation=activation,
        )


ARCHITECTURE_PRESETS = {
    "desk": ArchitectureConfig.desk,
    "paper_scale": ArchitectureConfig.paper_scale,
}


@dataclass(eq=False)
class LayerSpec:
    weight: np.ndarray
    bias: np.ndarray
    frozen: bool = False
    adapter: Optional[AdapterParams] = None
    frozen_fields: FrozenSet[str] = frozenset()

    @property
    def in_dim(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.weight.shape[0])

    def check(self, name: str) -> None:
        if self.weight.ndim != 2 or self.bias.shape != (self.out_dim,):
            raise DimensionError(
                "{}: bias {} does not match weight {}".format(
                    name, self.bias.shape, self.weight.shape
                )
            )
        if self.adapter is not None:
            merged_w, merged_b = self.adapter.merge_to_dense(self.weight, self.bias)
            if merged_w.shape != self.weight.shape or merged_b.shape != self.bias.shape:
                raise DimensionError(
                    "{}: adapter does not match layer {}x{}".format(
                        name, self.out_dim, self.in_dim
                    )
                )

    def trainables(self, name: str) -> Dict[str, np.ndarray]:
        if self.adapter is not None:
            return {
                "{}.{}".format(name, key): np.asarray(value_of(value))
                for key, value in self.adapter.trainables().items()
                if key not in self.frozen_fields
            }
        if self.frozen:
            return {}
        return {"{}.weight".format(name): self.weight, "{}.bias".format(name): self.bias}


@dataclass(eq=False)
class P2innModel:
    config: ArchitectureConfig
    coord_encoder: List[LayerSpec]
    param_encoder: List[LayerSpec]
    decoder: List[LayerSpec]
    seed: int = 0
    adapter_kind: AdapterKind = AdapterKind.NONE
    adapter_rank: int = 0

    def __post_init__(self):
        self.check()

    @property
    def activation(self) -> ActivationKind:
        return self.config.activation

    def group(self, name: str) -> List[LayerSpec]:
        return getattr(self, name)

    def named_layers(self) -> Iterator[Tuple[str, LayerSpec]]:
        for group in GROUPS:
            for index, layer in enumerate(self.group(group), start=1):
                yield "{}.{}".format(group, index), layer

    def check(self) -> None:
        latent = self.coord_encoder[-1].out_dim + self.param_encoder[-1].out_dim
        if self.decoder[0].in_dim != latent:
            raise DimensionError(
                "decoder input width {} != coordinate latent {} + parameter latent {}".format(
                    self.decoder[0].in_dim,
                    self.coord_encoder[-1].out_dim,
                    self.param_encoder[-1].out_dim,
                )
            )
        expected = self.config.layer_shapes()
        for group in GROUPS:
            actual = [(layer.out_dim, layer.in_dim) for layer in self.group(group)]
            if actual != expected[group]:
                raise DimensionError(
                    "{} layers {} do not match architecture {}".format(
                        group, actual, expected[group]
                    )
                )
        if self.decoder[-1].out_dim != 1:
            raise DimensionError("decoder must end in a scalar output")
        for name, layer in self.named_layers():
            layer.check(name)

    def base_parameters(self) -> Dict[str, np.ndarray]:
        """Foundational weights and biases in checkpoint order."""
        params = {}
        for name, layer in self.named_layers():
            params[name + ".weight"] = layer.weight
            params[name + ".bias"] = layer.bias
        return params

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        params = {}
        for name, layer in self.named_layers():
            params.update(layer.trainables(name))
        return params

    def adapted_layers(self) -> List[Tuple[str, LayerSpec]]:
        return [(name, layer) for name, layer in self.named_layers() if layer.adapter is not None]

    def set_trainables(self, values: Dict[str, np.ndarray]) -> None:
        layers = dict(self.named_layers())
        per_layer: Dict[str, Dict[str, np.ndarray]] = {}
        for key, value in values.items():
            layer_name, _, field_name = key.rpartition(".")
            if layer_name not in layers:
                raise KeyError("unknown parameter {}".format(key))
            per_layer.setdefault(layer_name, {})[field_name] = value
        for layer_name, fields in per_layer.items():
            layer = layers[layer_name]
            if layer.adapter is not None:
                layer.adapter = layer.adapter.with_trainables(fields)
                continue
            if layer.frozen:
                raise KeyError("{} is frozen".format(layer_name))
            if "weight" in fields:
                layer.weight = np.asarray(fields["weight"], dtype=np.float64)
            if "bias" in fields:
                layer.bias = np.asarray(fields["bias"], dtype=np.float64)

    def copy(self) -> "P2innModel":
        return copy.deepcopy(self)


def _xavier_uniform(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-limit, limit, size=(d_out, d_in))


def build_p2inn(cfg: ArchitectureConfig, rng_seed: int) -> P2innModel:
    rng = np.random.default_rng(rng_seed)
    groups = {}
    for group, shapes in cfg.layer_shapes().items():
        groups[group] = [
            LayerSpec(weight=_xavier_uniform(rng, d_out, d_in), bias=np.zeros(d_out))
            for d_out, d_in in shapes
        ]
    model = P2innModel(config=cfg, seed=rng_seed, **groups)
    logging.debug(
        "Built P2INN with %s parameters (seed %s)", cfg.full_param_count(), rng_seed
    )
    return model


def _bind_layer(name: str, layer: LayerSpec, tape: Optional[Tape], activate: bool) -> AffineMap:
    w0, b0 = layer.weight, layer.bias
    if layer.adapter is not None:
        adapter = layer.adapter
        if tape is not None:
            adapter = adapter.with_trainables(
                {
                    key: tape.parameter("{}.{}".format(name, key), value)
                    for key, value in adapter.trainables().items()
                    if key not in layer.frozen_fields
                }
            )
        return AffineMap(
            linear=lambda h, a=adapter: a.linear(w0, h), bias=adapter.bias(b0), activate=activate
        )
    weight, bias = w0, b0
    if tape is not None and not layer.frozen:
        weight = tape.parameter(name + ".weight", w0)
        bias = tape.parameter(name + ".bias", b0)
    return AffineMap(linear=lambda h, w=weight: h @ w.T, bias=bias, activate=activate)


def bind_layers(model: P2innModel, tape: Optional[Tape] = None) -> Dict[str, List[AffineMap]]:
    """AffineMaps per sub-network; trainables become tape parameters when a tape is given."""
    maps = {}
    for group in GROUPS:
        layers = model.group(group)
        maps[group] = [
            _bind_layer(
                "{}.{}".format(group, index),
                layer,
                tape,
                activate=not (group == "decoder" and index == len(layers)),
            )
            for index, layer in enumerate(layers, start=1)
        ]
    return maps


def parameter_rows(model: P2innModel, mu, n: int) -> np.ndarray:
    rows = np.asarray(mu, dtype=np.float64)
    if rows.ndim == 1:
        rows = np.tile(rows, (n, 1))
    if rows.shape != (n, model.config.param_in):
        raise DimensionError(
            "PDE parameters of shape {} do not fit {} points with {} coefficients".format(
                rows.shape, n, model.config.param_in
            )
        )
    return rows


def forward_batch(
    model: P2innModel,
    coords: np.ndarray,
    mu,
    directions: Sequence[str] = ("x", "t"),
    second: Sequence[str] = ("x",),
    maps: Optional[Dict[str, List[AffineMap]]] = None,
) -> TaylorBundle:
    """Output bundle at every row of ``coords``; the parameter latent carries no derivatives."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != model.config.coord_in:
        raise DimensionError(
            "coordinates must have shape (n, {}), got {}".format(model.config.coord_in, coords.shape)
        )
    maps = maps if maps is not None else bind_layers(model)
    mu_rows = parameter_rows(model, mu, coords.shape[0])
    h_coord = propagate(
        maps["coord_encoder"],
        input_bundle(coords, directions, second),
        model.activation,
        where="coordinate encoder",
    )
    h_param = propagate(
        maps["param_encoder"], TaylorBundle(value=mu_rows), model.activation, where="parameter encoder"
    )
    latent = concat_bundles(h_coord, constant_bundle(h_param.value, h_coord))
    return propagate(maps["decoder"], latent, model.activation, where="decoder")


def predict(model: P2innModel, coords: np.ndarray, mu) -> np.ndarray:
    out = forward_batch(model, coords, mu, directions=(), second=())
    return np.asarray(value_of(out.value)).reshape(-1)


def forward_u(model: P2innModel, x: float, t: float, mu) -> float:
    return float(predict(model, np.array([[x, t]]), mu)[0])


def model_jet(model: P2innModel, x: float, t: float, mu) -> Jet1D:
    out = forward_batch(model, np.array([[x, t]]), mu)
    return Jet1D(
        u=float(out.value[0, 0]),
        u_x=float(out.first["x"][0, 0]),
        u_t=float(out.first["t"][0, 0]),
        u_xx=float(out.second["x"][0, 0]),
    )


def model_jet_2d(model: P2innModel, x: float, y: float, mu) -> Jet2D:
    out = forward_batch(model, np.array([[x, y]]), mu, directions=("x", "y"), second=("x", "y"))
    return Jet2D(
        u=float(out.value[0, 0]),
        u_xx=float(out.second["x"][0, 0]),
        u_yy=float(out.second["y"][0, 0]),
    )


def default_layer_range(kind: AdapterKind, depth: int) -> Tuple[int, ...]:
    """Decoder layers (1-based) that receive adapters: the intermediate ones, or all for full."""
    if kind == AdapterKind.FULL:
        return tuple(range(1, depth + 1))
    return tuple(range(2, depth))


def attach_adapters(
    model: P2innModel,
    kind: AdapterKind,
    k: int = DEFAULT_RANK,
    layer_range: Optional[Iterable[int]] = None,
    frozen_fields: Iterable[str] = (),
    overrides: Optional[Dict[str, float]] = None,
    seed: int = 0,
) -> P2innModel:
    """Freeze every foundational scalar and put adapters on the chosen decoder layers.

    ``overrides`` replaces initial adapter values (e.g. tau=0 for the truncation
    diagnostic); ``frozen_fields`` keeps named adapter fields out of training.
    """
    if model.adapter_kind != AdapterKind.NONE:
        raise ValueError("model already carries {} adapters".format(model.adapter_kind.value))
    adapted = model.copy()
    for _, layer in adapted.named_layers():
        layer.frozen = True
    if kind == AdapterKind.NONE:
        return adapted

    depth = len(adapted.decoder)
    indices = tuple(layer_range) if layer_range is not None else default_layer_range(kind, depth)
    if not indices:
        raise DimensionError("decoder of depth {} has no intermediate layer to adapt".format(depth))
    for index in indices:
        if not 1 <= index <= depth:
            raise DimensionError("decoder layer {} outside 1..{}".format(index, depth))

    frozen = frozenset(frozen_fields)
    known = set(adapter_field_names(kind))
    unknown = (frozen | set(overrides or {})) - known
    if unknown:
        raise ValueError("{} adapters have no fields {}".format(kind.value, sorted(unknown)))

    rng = np.random.default_rng(seed)
    for index in indices:
        layer = adapted.decoder[index - 1]
        adapter = init_adapter(kind, layer.weight, layer.bias, k, rng)
        if overrides:
            current = adapter.trainables()
            adapter = adapter.with_trainables(
                {
                    key: np.full(np.shape(current[key]), float(value))
                    for key, value in overrides.items()
                }
            )
        layer.adapter = adapter
        layer.frozen_fields = frozen
    adapted.adapter_kind = kind
    adapted.adapter_rank = adapted.decoder[indices[0] - 1].adapter.rank
    logging.info(
        "Attached %s adapters to decoder layers %s (%s trainable scalars)",
        kind.value,
        list(indices),
        trainable_count(adapted),
    )
    return adapted


def trainable_count(model: P2innModel) -> int:
    return int(sum(np.size(v) for v in model.trainable_parameters().values()))


def merge_adapters(model: P2innModel) -> P2innModel:
    """Fold every adapter into its dense layer; the result has no adapters."""
    merged = model.copy()
    for _, layer in merged.named_layers():
        if layer.adapter is not None:
            layer.weight, layer.bias = layer.adapter.merge_to_dense(layer.weight, layer.bias)
            layer.adapter = None
            layer.frozen_fields = frozenset()
    merged.adapter_kind = AdapterKind.NONE
    merged.adapter_rank = 0
    return merged

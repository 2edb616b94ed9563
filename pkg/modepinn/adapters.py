"""
Per-layer reparameterizations over a frozen affine map (W0, b0).

Every adapter splits its pre-activation into ``linear(w0, h)`` and
``bias(b0)``: the jet engine applies the linear part to every Taylor
component and adds the bias to the value only. The formulas are written with
plain operators, so the same code runs on numpy arrays and on tape variables.
Rows of ``h`` are samples: a layer maps h (..., d_in) to (..., d_out).
"""

from abc import ABCMeta, abstractmethod
from dataclasses import dataclass, replace
from typing import Any, ClassVar, Dict, Optional, Tuple

import numpy as np

from modepinn.autodiff import value_of
from modepinn.constants import LORA_INIT_STD, AdapterKind
from modepinn.errors import DimensionError
from modepinn.linalg import SvdFactors, residual_spectrum, svd_truncate


def _check_input(h, d_in: int) -> None:
    shape = value_of(h).shape
    if not shape or shape[-1] != d_in:
        raise DimensionError(
            "layer expects inputs of width {}, got shape {}".format(d_in, shape)
        )


def _check_layer(w0: np.ndarray, b0: np.ndarray) -> None:
    if w0.ndim != 2 or b0.shape != (w0.shape[0],):
        raise DimensionError(
            "bias of shape {} does not match weight {}".format(b0.shape, w0.shape)
        )


@dataclass(frozen=True, eq=False)
class AdapterParams(metaclass=ABCMeta):
    kind: ClassVar[AdapterKind]
    trainable_fields: ClassVar[Tuple[str, ...]]

    @property
    def rank(self) -> int:
        return 0

    def trainables(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.trainable_fields}

    def with_trainables(self, values: Dict[str, Any]) -> "AdapterParams":
        unknown = set(values) - set(self.trainable_fields)
        if unknown:
            raise KeyError("unknown {} fields: {}".format(self.kind.value, sorted(unknown)))
        return replace(self, **values)

    def param_count(self) -> int:
        return int(sum(value_of(v).size for v in self.trainables().values()))

    @abstractmethod
    def linear(self, w0: np.ndarray, h):
        pass

    def bias(self, b0: np.ndarray):
        return b0

    def forward(self, w0: np.ndarray, b0: np.ndarray, h):
        _check_layer(w0, b0)
        _check_input(h, w0.shape[1])
        return self.linear(w0, h) + self.bias(b0)

    @abstractmethod
    def merge_to_dense(self, w0: np.ndarray, b0: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pass


@dataclass(frozen=True, eq=False)
class ModeParams(AdapterParams):
    """Dense k x k core phi, residual awakener tau and bias drift delta_b.

    The residual spectrum is reached through tau * W0 h minus tau times the
    principal part, so W_res is never formed.
    """

    phi: Any
    tau: Any
    delta_b: Any
    factors: SvdFactors

    kind: ClassVar[AdapterKind] = AdapterKind.MODE
    trainable_fields: ClassVar[Tuple[str, ...]] = ("phi", "tau", "delta_b")

    @property
    def rank(self) -> int:
        return self.factors.k

    def core(self):
        return self.phi + (1.0 - self.tau) * np.diag(self.factors.sigma_k)

    def linear(self, w0, h):
        f = self.factors
        return self.tau * (h @ w0.T) + ((h @ f.v_k) @ self.core().T) @ f.u_k.T

    def bias(self, b0):
        return b0 + self.delta_b

    def merge_to_dense(self, w0, b0):
        f = self.factors
        core = value_of(self.core())
        tau = float(value_of(self.tau))
        return tau * w0 + f.u_k @ core @ f.v_k.T, b0 + value_of(self.delta_b)


@dataclass(frozen=True, eq=False)
class SvdDiagParams(AdapterParams):
    """Native singular-value fine-tuning: U_k diag(alpha) V_k^T, residual dropped."""

    alpha: Any
    factors: SvdFactors

    kind: ClassVar[AdapterKind] = AdapterKind.SVD_DIAG
    trainable_fields: ClassVar[Tuple[str, ...]] = ("alpha",)

    @property
    def rank(self) -> int:
        return self.factors.k

    def linear(self, w0, h):
        f = self.factors
        return ((h @ f.v_k) * self.alpha) @ f.u_k.T

    def merge_to_dense(self, w0, b0):
        f = self.factors
        return (f.u_k * value_of(self.alpha)) @ f.v_k.T, b0.copy()


@dataclass(frozen=True, eq=False)
class LoraParams(AdapterParams):
    a: Any
    b: Any

    kind: ClassVar[AdapterKind] = AdapterKind.LORA
    trainable_fields: ClassVar[Tuple[str, ...]] = ("a", "b")

    @property
    def rank(self) -> int:
        return int(value_of(self.a).shape[0])

    def linear(self, w0, h):
        return h @ w0.T + (h @ self.a.T) @ self.b.T

    def merge_to_dense(self, w0, b0):
        return w0 + value_of(self.b) @ value_of(self.a), b0.copy()


@dataclass(frozen=True, eq=False)
class Ia3Params(AdapterParams):
    """Output-side elementwise scaling of W0 h."""

    scale: Any

    kind: ClassVar[AdapterKind] = AdapterKind.IA3
    trainable_fields: ClassVar[Tuple[str, ...]] = ("scale",)

    def linear(self, w0, h):
        return (h @ w0.T) * self.scale

    def merge_to_dense(self, w0, b0):
        return value_of(self.scale)[:, None] * w0, b0.copy()


@dataclass(frozen=True, eq=False)
class BiasOnlyParams(AdapterParams):
    delta_b: Any

    kind: ClassVar[AdapterKind] = AdapterKind.BIAS_ONLY
    trainable_fields: ClassVar[Tuple[str, ...]] = ("delta_b",)

    def linear(self, w0, h):
        return h @ w0.T

    def bias(self, b0):
        return b0 + self.delta_b

    def merge_to_dense(self, w0, b0):
        return w0.copy(), b0 + value_of(self.delta_b)


@dataclass(frozen=True, eq=False)
class FullParams(AdapterParams):
    weight: Any
    bias_vector: Any

    kind: ClassVar[AdapterKind] = AdapterKind.FULL
    trainable_fields: ClassVar[Tuple[str, ...]] = ("weight", "bias_vector")

    def linear(self, w0, h):
        return h @ self.weight.T

    def bias(self, b0):
        return self.bias_vector

    def merge_to_dense(self, w0, b0):
        return value_of(self.weight).copy(), value_of(self.bias_vector).copy()


def mode_init(w0: np.ndarray, b0: np.ndarray, k: int) -> ModeParams:
    _check_layer(w0, b0)
    factors = svd_truncate(w0, k)
    return ModeParams(
        phi=np.zeros((k, k)),
        tau=np.array(1.0),
        delta_b=np.zeros(w0.shape[0]),
        factors=factors,
    )


def svd_diag_init(w0: np.ndarray, b0: np.ndarray, k: int) -> SvdDiagParams:
    _check_layer(w0, b0)
    factors = svd_truncate(w0, k)
    return SvdDiagParams(alpha=factors.sigma_k.copy(), factors=factors)


def lora_init(
    w0: np.ndarray, b0: np.ndarray, r: int, rng: Optional[np.random.Generator] = None
) -> LoraParams:
    _check_layer(w0, b0)
    d_out, d_in = w0.shape
    if not 1 <= r <= min(d_out, d_in):
        raise DimensionError(
            "LoRA rank {} must lie in [1, {}] for a {}x{} layer".format(
                r, min(d_out, d_in), d_out, d_in
            )
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    return LoraParams(
        a=rng.normal(0.0, LORA_INIT_STD, size=(r, d_in)), b=np.zeros((d_out, r))
    )


def ia3_init(w0: np.ndarray, b0: np.ndarray) -> Ia3Params:
    _check_layer(w0, b0)
    return Ia3Params(scale=np.ones(w0.shape[0]))


def bias_only_init(w0: np.ndarray, b0: np.ndarray) -> BiasOnlyParams:
    _check_layer(w0, b0)
    return BiasOnlyParams(delta_b=np.zeros(w0.shape[0]))


def full_init(w0: np.ndarray, b0: np.ndarray) -> FullParams:
    _check_layer(w0, b0)
    return FullParams(weight=w0.copy(), bias_vector=b0.copy())


def init_adapter(
    kind: AdapterKind,
    w0: np.ndarray,
    b0: np.ndarray,
    rank: int,
    rng: Optional[np.random.Generator] = None,
) -> AdapterParams:
    if kind == AdapterKind.MODE:
        return mode_init(w0, b0, rank)
    if kind == AdapterKind.SVD_DIAG:
        return svd_diag_init(w0, b0, rank)
    if kind == AdapterKind.LORA:
        return lora_init(w0, b0, rank, rng)
    if kind == AdapterKind.IA3:
        return ia3_init(w0, b0)
    if kind == AdapterKind.BIAS_ONLY:
        return bias_only_init(w0, b0)
    if kind == AdapterKind.FULL:
        return full_init(w0, b0)
    raise ValueError("no adapter for kind {}".format(kind.value))


def mode_forward(p: ModeParams, w0: np.ndarray, b0: np.ndarray, h):
    return p.forward(w0, b0, h)


def mode_forward_standard(p: ModeParams, w0: np.ndarray, b0: np.ndarray, h) -> np.ndarray:
    """Dense oracle: (U_k (Sigma_k + Phi) V_k^T + tau W_res) h + b0 + delta_b."""
    _check_layer(w0, b0)
    _check_input(h, w0.shape[1])
    f = p.factors
    w_res = residual_spectrum(w0, f)
    phi = value_of(p.phi)
    tau = float(value_of(p.tau))
    dense = f.u_k @ (np.diag(f.sigma_k) + phi) @ f.v_k.T + tau * w_res
    return np.asarray(h) @ dense.T + b0 + value_of(p.delta_b)


def svd_diag_forward(p: SvdDiagParams, b0: np.ndarray, h):
    if b0.shape != (p.factors.d_out,):
        raise DimensionError(
            "bias of shape {} does not match d_out={}".format(b0.shape, p.factors.d_out)
        )
    _check_input(h, p.factors.d_in)
    return p.linear(None, h) + b0


def lora_forward(p: LoraParams, w0: np.ndarray, b0: np.ndarray, h):
    return p.forward(w0, b0, h)


def ia3_forward(p: Ia3Params, w0: np.ndarray, b0: np.ndarray, h):
    return p.forward(w0, b0, h)


def bias_only_forward(p: BiasOnlyParams, w0: np.ndarray, b0: np.ndarray, h):
    return p.forward(w0, b0, h)


def merge_to_dense(
    adapter: AdapterParams, w0: np.ndarray, b0: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    return adapter.merge_to_dense(w0, b0)


def param_count(adapter: AdapterParams) -> int:
    return adapter.param_count()


def expected_param_count(kind: AdapterKind, rank: int, d_in: int, d_out: int) -> int:
    """Closed-form trainable count of one adapted d_out x d_in layer."""
    if kind == AdapterKind.MODE:
        return rank * rank + 1 + d_out
    if kind == AdapterKind.SVD_DIAG:
        return rank
    if kind == AdapterKind.LORA:
        return rank * (d_in + d_out)
    if kind in (AdapterKind.IA3, AdapterKind.BIAS_ONLY):
        return d_out
    if kind == AdapterKind.FULL:
        return d_out * d_in + d_out
    return 0


def restore_adapter(
    kind: AdapterKind,
    w0: np.ndarray,
    b0: np.ndarray,
    rank: int,
    values: Dict[str, np.ndarray],
) -> AdapterParams:
    """Rebuild an adapter from stored trainables; frozen factors are recomputed."""
    template = init_adapter(kind, w0, b0, rank)
    restored = {}
    for name, current in template.trainables().items():
        if name not in values:
            raise KeyError("checkpoint lacks {} field {}".format(kind.value, name))
        restored[name] = np.asarray(values[name], dtype=np.float64).reshape(
            np.shape(current)
        )
    return template.with_trainables(restored)


def adapter_field_names(kind: AdapterKind) -> Tuple[str, ...]:
    for cls in (ModeParams, SvdDiagParams, LoraParams, Ia3Params, BiasOnlyParams, FullParams):
        if cls.kind == kind:
            return cls.trainable_fields
    return ()

"""
Forward Taylor jets for input derivatives and a reverse tape for parameter
gradients.

Coordinates travel through the network as truncated second-order Taylor
numbers (value, first derivative per direction, pure second derivative per
direction). Every arithmetic step on those components is recorded on a
``Tape`` so the gradient of any scalar built from jets is exact
(reverse-over-forward).

``Variable`` defers numpy's ufunc machinery, so expressions mixing plain arrays
and tape variables can be written once with ordinary operators.
"""

from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modepinn.constants import ActivationKind
from modepinn.errors import AutodiffError, NonFiniteError


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Variable:
    __array_ufunc__ = None
    __slots__ = ("value", "tape", "index")

    def __init__(self, value: np.ndarray, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Variable":
        return transpose(self)

    def __repr__(self) -> str:
        return "Variable(shape={}, index={})".format(self.value.shape, self.index)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __truediv__(self, other):
        if isinstance(other, Variable):
            raise AutodiffError("division by a tape variable is not supported")
        return multiply(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self):
        return total(self)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Variable) else np.asarray(x, dtype=np.float64)


@dataclass
class _Record:
    output: int
    parents: Tuple[Tuple[int, Callable[[np.ndarray], np.ndarray]], ...]


class Tape:
    """Ordered record of elementary operations with their local partials."""

    def __init__(self):
        self._shapes: List[Tuple[int, ...]] = []
        self._records: List[_Record] = []
        self._slots: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self._records)

    @property
    def parameter_slots(self) -> Dict[str, int]:
        return dict(self._slots)

    def parameter(self, name: str, array: np.ndarray) -> Variable:
        if name in self._slots:
            raise AutodiffError("parameter {} registered twice".format(name))
        var = self._new(np.asarray(array, dtype=np.float64))
        self._slots[name] = var.index
        return var

    def _new(self, value: np.ndarray) -> Variable:
        self._shapes.append(value.shape)
        return Variable(value, self, len(self._shapes) - 1)

    def record(
        self,
        value: np.ndarray,
        parents: Sequence[Tuple[Variable, Callable[[np.ndarray], np.ndarray]]],
    ) -> Variable:
        out = self._new(value)
        self._records.append(
            _Record(out.index, tuple((p.index, fn) for p, fn in parents))
        )
        return out

    def backward(self, loss: Variable, seed: float = 1.0) -> Dict[str, np.ndarray]:
        if not isinstance(loss, Variable) or loss.tape is not self:
            raise AutodiffError("backward called with a value not recorded on this tape")
        if not self._records:
            raise AutodiffError("backward called before any forward computation")
        if loss.value.size != 1:
            raise AutodiffError(
                "backward needs a scalar loss, got shape {}".format(loss.value.shape)
            )
        adjoints: List[Optional[np.ndarray]] = [None] * len(self._shapes)
        adjoints[loss.index] = np.full(loss.value.shape, float(seed))
        for rec in reversed(self._records):
            g = adjoints[rec.output]
            if g is None:
                continue
            for parent, vjp in rec.parents:
                contribution = vjp(g)
                if adjoints[parent] is None:
                    adjoints[parent] = contribution
                else:
                    adjoints[parent] = adjoints[parent] + contribution
        grads = {}
        for name, index in self._slots.items():
            g = adjoints[index]
            grads[name] = np.zeros(self._shapes[index]) if g is None else g
        return grads


def _tape_of(*operands) -> Optional[Tape]:
    tape = None
    for x in operands:
        if isinstance(x, Variable):
            if tape is not None and x.tape is not tape:
                raise AutodiffError("operands belong to different tapes")
            tape = x.tape
    return tape


def add(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va + vb
    if tape is None:
        return out
    parents = []
    if isinstance(a, Variable):
        parents.append((a, lambda g, s=va.shape: _unbroadcast(g, s)))
    if isinstance(b, Variable):
        parents.append((b, lambda g, s=vb.shape: _unbroadcast(g, s)))
    return tape.record(out, parents)


def subtract(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va - vb
    if tape is None:
        return out
    parents = []
    if isinstance(a, Variable):
        parents.append((a, lambda g, s=va.shape: _unbroadcast(g, s)))
    if isinstance(b, Variable):
        parents.append((b, lambda g, s=vb.shape: -_unbroadcast(g, s)))
    return tape.record(out, parents)


def multiply(a, b):
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    out = va * vb
    if tape is None:
        return out
    parents = []
    if isinstance(a, Variable):
        parents.append((a, lambda g: _unbroadcast(g * vb, va.shape)))
    if isinstance(b, Variable):
        parents.append((b, lambda g: _unbroadcast(g * va, vb.shape)))
    return tape.record(out, parents)


def matmul(a, b):
    """(..., d) @ (d, o) with b two-dimensional."""
    tape = _tape_of(a, b)
    va, vb = value_of(a), value_of(b)
    if vb.ndim != 2:
        raise AutodiffError("right matmul operand must be a matrix, got {}".format(vb.shape))
    out = va @ vb
    if tape is None:
        return out
    parents = []
    if isinstance(a, Variable):
        parents.append((a, lambda g: g @ vb.T))
    if isinstance(b, Variable):
        def grad_b(g):
            return va.reshape(-1, vb.shape[0]).T @ g.reshape(-1, vb.shape[1])

        parents.append((b, grad_b))
    return tape.record(out, parents)


def transpose(a):
    if not isinstance(a, Variable):
        return np.asarray(a).T
    return a.tape.record(a.value.T, [(a, lambda g: g.T)])


def total(a):
    if not isinstance(a, Variable):
        return np.asarray(np.sum(a))
    shape = a.value.shape
    return a.tape.record(
        np.asarray(a.value.sum()), [(a, lambda g: np.broadcast_to(g, shape).copy())]
    )


def concatenate(parts: Sequence[Any]):
    """Concatenate along the last axis."""
    tape = _tape_of(*parts)
    values = [value_of(p) for p in parts]
    out = np.concatenate(values, axis=-1)
    if tape is None:
        return out
    parents = []
    start = 0
    for part, val in zip(parts, values):
        stop = start + val.shape[-1]
        if isinstance(part, Variable):
            parents.append((part, lambda g, lo=start, hi=stop: g[..., lo:hi]))
        start = stop
    return tape.record(out, parents)


def activation_derivatives(kind: ActivationKind, z: np.ndarray):
    """sigma, sigma', sigma'', sigma''' evaluated at z."""
    if kind == ActivationKind.TANH:
        s = np.tanh(z)
        s1 = 1.0 - s * s
        s2 = -2.0 * s * s1
        s3 = -2.0 * (s1 * s1 + s * s2)
        return s, s1, s2, s3
    if kind == ActivationKind.SILU:
        g = 1.0 / (1.0 + np.exp(-z))
        g1 = g * (1.0 - g)
        a = 1.0 - 2.0 * g
        s = z * g
        s1 = g + z * g1
        s2 = g1 * (2.0 + z * a)
        s3 = g1 * a * (2.0 + z * a) + g1 * (a - 2.0 * z * g1)
        return s, s1, s2, s3
    raise ValueError("unknown activation {}".format(kind))


def activate(kind: ActivationKind, z, order: int = 2):
    """Return [sigma(z), sigma'(z), ...] up to ``order`` as differentiable values."""
    derivs = activation_derivatives(kind, value_of(z))
    if not isinstance(z, Variable):
        return list(derivs[: order + 1])
    return [
        z.tape.record(derivs[i], [(z, lambda g, d=derivs[i + 1]: g * d)])
        for i in range(order + 1)
    ]


@dataclass
class TaylorBundle:
    """Value plus first and pure second derivatives along named directions."""

    value: Any
    first: Dict[str, Any] = field(default_factory=dict)
    second: Dict[str, Any] = field(default_factory=dict)

    def components(self):
        yield self.value
        yield from self.first.values()
        yield from self.second.values()


@dataclass(frozen=True)
class AffineMap:
    """One dense layer as seen by the jet engine: h -> linear(h) + bias."""

    linear: Callable[[Any], Any]
    bias: Any
    activate: bool = True


@dataclass(frozen=True)
class Jet1D:
    u: Any
    u_x: Any
    u_t: Any
    u_xx: Any


@dataclass(frozen=True)
class Jet2D:
    u: Any
    u_xx: Any
    u_yy: Any


def input_bundle(
    coords: np.ndarray, directions: Sequence[str], second: Sequence[str]
) -> TaylorBundle:
    """Seed a bundle for columns of ``coords``; column i varies along directions[i]."""
    coords = np.asarray(coords, dtype=np.float64)
    first = {}
    for i, name in enumerate(directions):
        seed = np.zeros_like(coords)
        seed[:, i] = 1.0
        first[name] = seed
    return TaylorBundle(
        value=coords,
        first=first,
        second={name: np.zeros_like(coords) for name in second},
    )


def constant_bundle(value, like: TaylorBundle) -> TaylorBundle:
    """A bundle that does not vary along any of ``like``'s directions."""
    zeros = np.zeros(value_of(value).shape)
    return TaylorBundle(
        value=value,
        first={name: zeros for name in like.first},
        second={name: zeros for name in like.second},
    )


def concat_bundles(left: TaylorBundle, right: TaylorBundle) -> TaylorBundle:
    return TaylorBundle(
        value=concatenate([left.value, right.value]),
        first={d: concatenate([left.first[d], right.first[d]]) for d in left.first},
        second={d: concatenate([left.second[d], right.second[d]]) for d in left.second},
    )


def _check_finite(bundle: TaylorBundle, layer_index: int, where: str) -> None:
    for comp in bundle.components():
        if not np.all(np.isfinite(value_of(comp))):
            raise NonFiniteError(layer_index=layer_index, where=where)


def propagate(
    maps: Sequence[AffineMap],
    bundle: TaylorBundle,
    activation: ActivationKind,
    where: str = "network",
) -> TaylorBundle:
    for index, layer in enumerate(maps, start=1):
        z = TaylorBundle(
            value=layer.linear(bundle.value) + layer.bias,
            first={d: layer.linear(h) for d, h in bundle.first.items()},
            second={d: layer.linear(h) for d, h in bundle.second.items()},
        )
        if layer.activate:
            order = 2 if z.second else (1 if z.first else 0)
            derivs = activate(activation, z.value, order)
            s = derivs[0]
            first = {d: derivs[1] * zd for d, zd in z.first.items()}
            second = {
                d: derivs[2] * (z.first[d] * z.first[d]) + derivs[1] * zdd
                for d, zdd in z.second.items()
            }
            z = TaylorBundle(value=s, first=first, second=second)
        _check_finite(z, index, where)
        bundle = z
    return bundle


def _scalar(x) -> float:
    return float(value_of(x).reshape(-1)[0])


def forward_jet(
    maps: Sequence[AffineMap],
    x: float,
    t: float,
    mu_latent: Sequence[float] = (),
    activation: ActivationKind = ActivationKind.TANH,
) -> Jet1D:
    """Jet of a plain network fed with [x, t, mu_latent...] at one point."""
    coords = np.array([[x, t, *mu_latent]], dtype=np.float64)
    bundle = input_bundle(coords, ("x", "t"), ("x",))
    out = propagate(maps, bundle, activation)
    return Jet1D(
        u=_scalar(out.value),
        u_x=_scalar(out.first["x"]),
        u_t=_scalar(out.first["t"]),
        u_xx=_scalar(out.second["x"]),
    )


def forward_jet_2d(
    maps: Sequence[AffineMap],
    x: float,
    y: float,
    mu_latent: Sequence[float] = (),
    activation: ActivationKind = ActivationKind.TANH,
) -> Jet2D:
    coords = np.array([[x, y, *mu_latent]], dtype=np.float64)
    bundle = input_bundle(coords, ("x", "y"), ("x", "y"))
    out = propagate(maps, bundle, activation)
    return Jet2D(
        u=_scalar(out.value),
        u_xx=_scalar(out.second["x"]),
        u_yy=_scalar(out.second["y"]),
    )


def backward(tape: Tape, loss: Variable, seed: float = 1.0) -> Dict[str, np.ndarray]:
    return tape.backward(loss, seed)

"""Equation families, residual operators and collocation sampling."""

import math
from dataclasses import dataclass
from typing import Any, Optional, Tuple

import numpy as np

from modepinn.autodiff import Jet1D, Jet2D
from modepinn.constants import (
    CDR_T_BOUNDS,
    CDR_X_BOUNDS,
    DEFAULT_N_B,
    DEFAULT_N_F,
    DEFAULT_N_U,
    GAUSS_NARROW_SIGMA,
    GAUSS_WIDE_SIGMA,
    HELMHOLTZ_BOUNDS,
    HELMHOLTZ_KAPPA,
    BoundaryConditionKind,
    InitialConditionKind,
    ProblemFamily,
)
from modepinn.errors import ConfigError


def _scalars(*values) -> Tuple[float, ...]:
    if any(np.size(value) != 1 for value in values):
        raise ValueError("labels need one value per coefficient, got per-point columns")
    return tuple(float(np.asarray(value).reshape(-1)[0]) for value in values)


@dataclass(frozen=True)
class CdrParams:
    """Convection velocity beta, diffusion nu, reaction rate rho.

    Fields may also hold per-point columns when several equations share one
    batch.
    """

    beta: Any = 0.0
    nu: Any = 0.0
    rho: Any = 0.0

    def __post_init__(self):
        values = np.asarray([self.beta, self.nu, self.rho], dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ValueError("CDR coefficients must be finite, got {}".format(self.as_vector()))
        if np.any(np.asarray(self.nu) < 0):
            raise ValueError("diffusion coefficient must be non-negative")

    def as_vector(self) -> np.ndarray:
        return np.array([self.beta, self.nu, self.rho], dtype=np.float64)

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "CdrParams":
        return cls(beta=rows[:, 0:1], nu=rows[:, 1:2], rho=rows[:, 2:3])

    def label(self) -> str:
        """Short tag for one equation; per-point columns have no single label."""
        return "beta={:g},nu={:g},rho={:g}".format(*_scalars(self.beta, self.nu, self.rho))


@dataclass(frozen=True)
class HelmholtzParams:
    a: Any = 2.5
    kappa: float = HELMHOLTZ_KAPPA

    def __post_init__(self):
        if not np.all(np.isfinite(np.asarray(self.a, dtype=np.float64))):
            raise ValueError("Helmholtz parameter must be finite")

    def as_vector(self) -> np.ndarray:
        return np.array([self.a], dtype=np.float64)

    @classmethod
    def from_rows(cls, rows: np.ndarray) -> "HelmholtzParams":
        return cls(a=rows[:, 0:1])

    def label(self) -> str:
        return "a={:g}".format(*_scalars(self.a))


@dataclass(frozen=True)
class ProblemSpec:
    family: ProblemFamily = ProblemFamily.CDR
    x_bounds: Tuple[float, float] = CDR_X_BOUNDS
    t_bounds: Tuple[float, float] = CDR_T_BOUNDS
    ic: Optional[InitialConditionKind] = InitialConditionKind.GAUSS_WIDE
    bc: BoundaryConditionKind = BoundaryConditionKind.PERIODIC
    phase: float = 0.0

    def __post_init__(self):
        for name in ("x_bounds", "t_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ConfigError("{} must be ordered, got {}".format(name, (lo, hi)))
        if self.family == ProblemFamily.CDR:
            if self.ic is None:
                raise ConfigError("CDR problems need an initial condition")
            if self.bc != BoundaryConditionKind.PERIODIC:
                raise ConfigError("CDR problems use periodic boundaries")
        elif self.family == ProblemFamily.HELMHOLTZ:
            if self.ic is not None:
                raise ConfigError("Helmholtz problems take no initial condition")
            if self.bc != BoundaryConditionKind.DIRICHLET:
                raise ConfigError("Helmholtz problems use Dirichlet boundaries")

    @classmethod
    def cdr(
        cls,
        ic: InitialConditionKind = InitialConditionKind.GAUSS_WIDE,
        phase: float = 0.0,
        t_max: float = CDR_T_BOUNDS[1],
    ) -> "ProblemSpec":
        return cls(ic=ic, phase=phase, t_bounds=(CDR_T_BOUNDS[0], t_max))

    @classmethod
    def helmholtz(cls) -> "ProblemSpec":
        return cls(
            family=ProblemFamily.HELMHOLTZ,
            x_bounds=HELMHOLTZ_BOUNDS,
            t_bounds=HELMHOLTZ_BOUNDS,
            ic=None,
            bc=BoundaryConditionKind.DIRICHLET,
        )

    @property
    def param_dim(self) -> int:
        return 3 if self.family == ProblemFamily.CDR else 1

    @property
    def period(self) -> float:
        return self.x_bounds[1] - self.x_bounds[0]

    def initial_values(self, x) -> np.ndarray:
        """u(x, 0), shifted right by ``phase`` radians with periodic wrap-around."""
        x = np.asarray(x, dtype=np.float64)
        if self.phase == 0.0:
            return initial_condition(self.ic, x)
        return shifted_initial_condition(self.ic, x, self.phase, self.x_bounds)

    def params_from_vector(self, vector):
        rows = np.asarray(vector, dtype=np.float64)
        if self.family == ProblemFamily.CDR:
            return CdrParams(*map(float, rows))
        return HelmholtzParams(a=float(rows[0]))


@dataclass(frozen=True)
class BatchCounts:
    n_f: int = DEFAULT_N_F
    n_u: int = DEFAULT_N_U
    n_b: int = DEFAULT_N_B

    def __post_init__(self):
        if min(self.n_f, self.n_u, self.n_b) < 1:
            raise ValueError("collocation counts must be at least 1, got {}".format(self))


@dataclass(frozen=True, eq=False)
class CollocationBatch:
    """Interior points (n_f, 2), initial abscissae (n_u,), boundary points (n_b, 2).

    For periodic problems ``boundary_partner`` holds the matching point on the
    opposite edge (same t); Dirichlet problems leave it None.
    """

    spec: ProblemSpec
    interior: np.ndarray
    initial: np.ndarray
    boundary: np.ndarray
    boundary_partner: Optional[np.ndarray] = None

    @property
    def n_f(self) -> int:
        return int(self.interior.shape[0])

    @property
    def n_u(self) -> int:
        return int(self.initial.shape[0])

    @property
    def n_b(self) -> int:
        return int(self.boundary.shape[0])


def cdr_residual(jet: Jet1D, mu: CdrParams):
    return jet.u_t + mu.beta * jet.u_x - mu.nu * jet.u_xx - mu.rho * jet.u * (1.0 - jet.u)


def helmholtz_solution(p: HelmholtzParams, x, y):
    return np.sin(p.a * math.pi * np.asarray(x)) * np.sin(p.a * math.pi * np.asarray(y))


def helmholtz_source(p: HelmholtzParams, x, y):
    return (p.kappa**2 - 2.0 * p.a**2 * math.pi**2) * helmholtz_solution(p, x, y)


def helmholtz_residual(jet: Jet2D, p: HelmholtzParams, x, y):
    """u_xx + u_yy + kappa^2 u - q(x, y) at the points (x, y) the jet was taken at."""
    return jet.u_xx + jet.u_yy + p.kappa**2 * jet.u - helmholtz_source(p, x, y)


def initial_condition(kind: InitialConditionKind, x):
    x = np.asarray(x, dtype=np.float64)
    if kind == InitialConditionKind.GAUSS_WIDE:
        return np.exp(-((x - math.pi) ** 2) / (2.0 * GAUSS_WIDE_SIGMA**2))
    if kind == InitialConditionKind.GAUSS_NARROW:
        return np.exp(-((x - math.pi) ** 2) / (2.0 * GAUSS_NARROW_SIGMA**2))
    if kind == InitialConditionKind.SINUSOID:
        return 1.0 + np.sin(x)
    raise ValueError("unknown initial condition {}".format(kind))


def shifted_initial_condition(
    kind: InitialConditionKind,
    x,
    shift: float,
    bounds: Tuple[float, float] = CDR_X_BOUNDS,
):
    """u0((x - shift) mod L): the periodic extension translated by ``shift``."""
    lo, hi = bounds
    wrapped = lo + np.mod(np.asarray(x, dtype=np.float64) - shift - lo, hi - lo)
    return initial_condition(kind, wrapped)


def _helmholtz_boundary(rng: np.random.Generator, n: int, bounds: Tuple[float, float]) -> np.ndarray:
    lo, hi = bounds
    edge = rng.integers(0, 4, size=n)
    along = rng.uniform(lo, hi, size=n)
    fixed = np.where(edge % 2 == 0, lo, hi)
    return np.where(
        (edge < 2)[:, None],
        np.stack([fixed, along], axis=1),
        np.stack([along, fixed], axis=1),
    )


def sample_batch(
    spec: ProblemSpec, counts: BatchCounts, rng: np.random.Generator
) -> CollocationBatch:
    x_lo, x_hi = spec.x_bounds
    t_lo, t_hi = spec.t_bounds
    interior = np.stack(
        [rng.uniform(x_lo, x_hi, size=counts.n_f), rng.uniform(t_lo, t_hi, size=counts.n_f)],
        axis=1,
    )
    if spec.family == ProblemFamily.HELMHOLTZ:
        return CollocationBatch(
            spec=spec,
            interior=interior,
            initial=np.zeros(0),
            boundary=_helmholtz_boundary(rng, counts.n_b, spec.x_bounds),
        )
    initial = rng.uniform(x_lo, x_hi, size=counts.n_u)
    t_b = rng.uniform(t_lo, t_hi, size=counts.n_b)
    return CollocationBatch(
        spec=spec,
        interior=interior,
        initial=initial,
        boundary=np.stack([np.full(counts.n_b, x_lo), t_b], axis=1),
        boundary_partner=np.stack([np.full(counts.n_b, x_hi), t_b], axis=1),
    )

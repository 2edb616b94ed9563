"""
Physics-informed loss assembly, Adam, and the two training phases:
pre-training over a source distribution of PDE parameters and adapter
fine-tuning at a single target parameter.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from modepinn.autodiff import Jet1D, Jet2D, Tape, backward, value_of
from modepinn.constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    DEFAULT_EQUATIONS_PER_BATCH,
    DEFAULT_LEARNING_RATE,
    DEFAULT_LOSS_WEIGHTS,
    DEFAULT_RANK,
    DIVERGENCE_THRESHOLD,
    AdapterKind,
    ProblemFamily,
)
from modepinn.errors import (
    ConfigError,
    DimensionError,
    NonFiniteGradientError,
    TrainingDivergenceError,
)
from modepinn.model import P2innModel, attach_adapters, bind_layers, forward_batch
from modepinn.pde import (
    BatchCounts,
    CdrParams,
    CollocationBatch,
    HelmholtzParams,
    ProblemSpec,
    cdr_residual,
    helmholtz_residual,
    sample_batch,
)

HISTORY_HEADER = ("iter", "l_pde", "l_ic", "l_bc", "total")


@dataclass(frozen=True)
class LossWeights:
    w_pde: float = DEFAULT_LOSS_WEIGHTS[0]
    w_ic: float = DEFAULT_LOSS_WEIGHTS[1]
    w_bc: float = DEFAULT_LOSS_WEIGHTS[2]

    def __post_init__(self):
        values = (self.w_pde, self.w_ic, self.w_bc)
        if min(values) < 0 or max(values) == 0:
            raise ValueError("loss weights must be non-negative and not all zero, got {}".format(values))


@dataclass(frozen=True)
class LossReport:
    l_pde: float
    l_ic: float
    l_bc: float
    total: float
    n_f: int
    n_u: int
    n_b: int

    def history_row(self, iteration: int) -> Tuple:
        return (iteration, self.l_pde, self.l_ic, self.l_bc, self.total)


def _mean_square(error):
    return (error * error).sum() * (1.0 / value_of(error).size)


def assemble_loss(
    residual,
    ic_error,
    bc_errors: Sequence[Any],
    weights: LossWeights,
) -> Tuple[LossReport, Any]:
    """Weighted sum of mean-squared residual, initial and boundary mismatches.

    ``ic_error`` is None for problems without an initial condition. Works on
    plain arrays and on tape variables alike.
    """
    n_f = value_of(residual).size
    n_u = 0 if ic_error is None else value_of(ic_error).size
    n_b = value_of(bc_errors[0]).size if bc_errors else 0
    if weights.w_pde > 0 and n_f == 0:
        raise ValueError("PDE loss is weighted but the batch has no interior points")
    if weights.w_ic > 0 and ic_error is not None and n_u == 0:
        raise ValueError("initial-condition loss is weighted but the batch has no initial points")
    if weights.w_bc > 0 and n_b == 0:
        raise ValueError("boundary loss is weighted but the batch has no boundary points")

    l_pde = _mean_square(residual) if n_f else 0.0
    l_ic = _mean_square(ic_error) if n_u else 0.0
    l_bc = 0.0
    if n_b:
        for error in bc_errors:
            l_bc = l_bc + _mean_square(error)
    total = weights.w_pde * l_pde + weights.w_ic * l_ic + weights.w_bc * l_bc
    report = LossReport(
        l_pde=float(value_of(l_pde)),
        l_ic=float(value_of(l_ic)),
        l_bc=float(value_of(l_bc)),
        total=float(value_of(total)),
        n_f=n_f,
        n_u=n_u,
        n_b=n_b,
    )
    return report, total


def _rows(mus: Sequence[Any], sizes: Sequence[int]) -> np.ndarray:
    return np.concatenate(
        [np.tile(mu.as_vector(), (n, 1)) for mu, n in zip(mus, sizes)], axis=0
    )


def equations_loss(
    model: P2innModel,
    batches: Sequence[CollocationBatch],
    mus: Sequence[Any],
    weights: LossWeights = LossWeights(),
    tape: Optional[Tape] = None,
    bc_derivatives: bool = False,
) -> Tuple[LossReport, Any]:
    """Mean of the per-equation physics-informed losses over equally sized batches."""
    if not batches or len(batches) != len(mus):
        raise ValueError("need one PDE parameter per batch, got {} and {}".format(len(batches), len(mus)))
    spec = batches[0].spec
    first = batches[0]
    for batch in batches:
        if batch.spec != spec or (batch.n_f, batch.n_u, batch.n_b) != (first.n_f, first.n_u, first.n_b):
            raise ValueError("batches of one loss must share the problem and the counts")
    maps = bind_layers(model, tape)
    interior = np.concatenate([b.interior for b in batches])
    interior_mu = _rows(mus, [b.n_f for b in batches])
    boundary = np.concatenate([b.boundary for b in batches])
    boundary_mu = _rows(mus, [b.n_b for b in batches])

    if spec.family == ProblemFamily.HELMHOLTZ:
        out = forward_batch(model, interior, interior_mu, ("x", "y"), ("x", "y"), maps)
        jet = Jet2D(u=out.value, u_xx=out.second["x"], u_yy=out.second["y"])
        residual = helmholtz_residual(
            jet, HelmholtzParams.from_rows(interior_mu), interior[:, 0:1], interior[:, 1:2]
        )
        edge = forward_batch(model, boundary, boundary_mu, (), (), maps)
        return assemble_loss(residual, None, [edge.value], weights)

    out = forward_batch(model, interior, interior_mu, ("x", "t"), ("x",), maps)
    jet = Jet1D(u=out.value, u_x=out.first["x"], u_t=out.first["t"], u_xx=out.second["x"])
    residual = cdr_residual(jet, CdrParams.from_rows(interior_mu))

    initial_x = np.concatenate([b.initial for b in batches])
    initial_points = np.stack([initial_x, np.full(initial_x.shape, spec.t_bounds[0])], axis=1)
    initial_mu = _rows(mus, [b.n_u for b in batches])
    start = forward_batch(model, initial_points, initial_mu, (), (), maps)
    ic_error = start.value - spec.initial_values(initial_x)[:, None]

    partner = np.concatenate([b.boundary_partner for b in batches])
    directions = ("x",) if bc_derivatives else ()
    left = forward_batch(model, boundary, boundary_mu, directions, (), maps)
    right = forward_batch(model, partner, boundary_mu, directions, (), maps)
    bc_errors = [left.value - right.value]
    if bc_derivatives:
        bc_errors.append(left.first["x"] - right.first["x"])
    return assemble_loss(residual, ic_error, bc_errors, weights)


def pinn_loss(
    model: P2innModel,
    batch: CollocationBatch,
    mu,
    weights: LossWeights = LossWeights(),
    tape: Optional[Tape] = None,
    bc_derivatives: bool = False,
) -> Tuple[LossReport, Any]:
    return equations_loss(model, [batch], [mu], weights, tape, bc_derivatives)


def loss_and_gradients(
    model: P2innModel,
    batches: Sequence[CollocationBatch],
    mus: Sequence[Any],
    weights: LossWeights,
    bc_derivatives: bool = False,
) -> Tuple[LossReport, Dict[str, np.ndarray]]:
    tape = Tape()
    report, total = equations_loss(model, batches, mus, weights, tape, bc_derivatives)
    return report, backward(tape, total)


@dataclass
class AdamState:
    """Moment buffers keyed like the trainable parameters."""

    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Dict[str, np.ndarray], learning_rate: float = DEFAULT_LEARNING_RATE) -> "AdamState":
        return cls(
            learning_rate=learning_rate,
            m={name: np.zeros(np.shape(p)) for name, p in params.items()},
            v={name: np.zeros(np.shape(p)) for name, p in params.items()},
        )


def adam_step(
    state: AdamState, grads: Dict[str, np.ndarray], params: Dict[str, np.ndarray]
) -> Dict[str, np.ndarray]:
    """theta - lr * m_hat / (sqrt(v_hat) + eps); advances ``state`` in place."""
    if set(grads) != set(params) or set(params) != set(state.m):
        raise DimensionError(
            "gradient keys {} do not match parameters {}".format(sorted(grads), sorted(params))
        )
    for name, g in grads.items():
        if np.shape(g) != np.shape(params[name]):
            raise DimensionError(
                "gradient for {} has shape {}, parameter {}".format(name, np.shape(g), np.shape(params[name]))
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    updated = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / correction1
        v_hat = state.v[name] / correction2
        updated[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


def _value_range(text: str) -> List[float]:
    """``lo:hi:step`` (inclusive) or a ``|``-separated list."""
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        if step <= 0 or hi < lo:
            raise ConfigError("bad range {}".format(text))
        count = int(round((hi - lo) / step)) + 1
        return [round(lo + i * step, 12) for i in range(count)]
    return [float(v) for v in text.split("|")]


def value_grid(lo: float, hi: float, step: float) -> List[float]:
    return _value_range("{}:{}:{}".format(lo, hi, step))


@dataclass(frozen=True)
class SourceDistribution:
    family: ProblemFamily
    vectors: Tuple[Tuple[float, ...], ...]
    name: str = "custom"

    def __post_init__(self):
        if not self.vectors:
            raise ConfigError("source distribution {} is empty".format(self.name))
        width = 3 if self.family == ProblemFamily.CDR else 1
        for vector in self.vectors:
            if len(vector) != width or not np.all(np.isfinite(vector)):
                raise ConfigError("bad parameter vector {} in {}".format(vector, self.name))

    @classmethod
    def grid(cls, family: ProblemFamily, name: str = "custom", **axes: Iterable[float]) -> "SourceDistribution":
        """Cartesian grid; CDR coefficients not named stay at 0."""
        if family == ProblemFamily.CDR:
            keys = ("beta", "nu", "rho")
        else:
            keys = ("a",)
        unknown = set(axes) - set(keys)
        if unknown:
            raise ConfigError("{} has no coefficients {}".format(family.value, sorted(unknown)))
        columns = [list(axes.get(key, [0.0])) for key in keys]
        return cls(family=family, vectors=tuple(itertools.product(*columns)), name=name)

    @classmethod
    def parse(cls, text: str, family: ProblemFamily) -> "SourceDistribution":
        """A preset name or ``key=lo:hi:step,key=value`` terms."""
        text = text.strip()
        if text in SOURCE_PRESETS:
            preset = SOURCE_PRESETS[text]()
            if preset.family != family:
                raise ConfigError("source {} belongs to family {}".format(text, preset.family.value))
            return preset
        axes = {}
        for term in filter(None, (part.strip() for part in text.split(","))):
            key, sep, value = term.partition("=")
            if not sep:
                raise ConfigError("unknown source preset or malformed term {!r}".format(term))
            axes[key.strip()] = _value_range(value.strip())
        return cls.grid(family, name=text, **axes)

    def params(self, vector):
        if self.family == ProblemFamily.CDR:
            return CdrParams(*vector)
        return HelmholtzParams(a=vector[0])

    def all_params(self) -> List[Any]:
        return [self.params(v) for v in self.vectors]

    def sample(self, rng: np.random.Generator, count: int) -> List[Any]:
        replace = count > len(self.vectors)
        picks = rng.choice(len(self.vectors), size=count, replace=replace)
        return [self.params(self.vectors[i]) for i in picks]


def _integers(lo: int, hi: int) -> List[float]:
    return [float(v) for v in range(lo, hi + 1)]


SOURCE_PRESETS = {
    "convection": lambda: SourceDistribution.grid(ProblemFamily.CDR, "convection", beta=_integers(1, 10)),
    "diffusion": lambda: SourceDistribution.grid(ProblemFamily.CDR, "diffusion", nu=_integers(1, 5)),
    "reaction": lambda: SourceDistribution.grid(ProblemFamily.CDR, "reaction", rho=_integers(1, 10)),
    "reaction_diffusion": lambda: SourceDistribution.grid(
        ProblemFamily.CDR, "reaction_diffusion", nu=[1.0, 2.0], rho=_integers(1, 5)
    ),
    "convection_diffusion": lambda: SourceDistribution.grid(
        ProblemFamily.CDR, "convection_diffusion", beta=_integers(1, 5), nu=[1.0, 2.0]
    ),
    "cdr": lambda: SourceDistribution.grid(
        ProblemFamily.CDR, "cdr", beta=_integers(1, 5), nu=[1.0], rho=[1.0, 2.0]
    ),
    "helmholtz": lambda: SourceDistribution.grid(
        ProblemFamily.HELMHOLTZ, "helmholtz", a=value_grid(2.5, 3.0, 0.1)
    ),
}

SWEEP_PRESETS = {
    "reaction_interpolation": lambda: SourceDistribution.grid(
        ProblemFamily.CDR, "reaction_interpolation", rho=value_grid(1.5, 9.5, 1.0)
    ),
    "reaction_extrapolation": lambda: SourceDistribution.grid(
        ProblemFamily.CDR, "reaction_extrapolation", rho=value_grid(10.5, 15.0, 0.5)
    ),
    "helmholtz_fine": lambda: SourceDistribution.grid(
        ProblemFamily.HELMHOLTZ, "helmholtz_fine", a=value_grid(2.5, 3.0, 0.05)
    ),
}


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    equations_per_batch: int = DEFAULT_EQUATIONS_PER_BATCH
    counts: BatchCounts = BatchCounts()
    learning_rate: float = DEFAULT_LEARNING_RATE
    weights: LossWeights = LossWeights()
    bc_derivatives: bool = False
    log_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.equations_per_batch < 1 or self.log_every < 1:
            raise ConfigError(
                "iterations must be >= 0, equations_per_batch and log_every >= 1"
            )
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class TrainingHistory:
    rows: List[Tuple] = field(default_factory=list)

    def append(self, iteration: int, report: LossReport) -> None:
        self.rows.append(report.history_row(iteration))

    @property
    def totals(self) -> List[float]:
        return [row[-1] for row in self.rows]

    def __len__(self) -> int:
        return len(self.rows)


def _check_divergence(report: LossReport, iteration: int) -> None:
    if not np.isfinite(report.total) or report.total > DIVERGENCE_THRESHOLD:
        raise TrainingDivergenceError(iteration=iteration, total=report.total)


def _optimize(model, draw, cfg: TrainConfig, phase: str) -> TrainingHistory:
    params = model.trainable_parameters()
    state = AdamState.create(params, cfg.learning_rate)
    history = TrainingHistory()
    for iteration in range(cfg.iterations):
        batches, mus = draw()
        report, grads = loss_and_gradients(model, batches, mus, cfg.weights, cfg.bc_derivatives)
        _check_divergence(report, iteration)
        history.append(iteration, report)
        params = adam_step(state, grads, params)
        model.set_trainables(params)
        if iteration % cfg.log_every == 0 or iteration == cfg.iterations - 1:
            logging.info(
                "%s iteration %s: total %.6e (pde %.3e, ic %.3e, bc %.3e)",
                phase,
                iteration,
                report.total,
                report.l_pde,
                report.l_ic,
                report.l_bc,
            )
    return history


def pretrain(
    model: P2innModel,
    dist: SourceDistribution,
    cfg: TrainConfig,
    spec: Optional[ProblemSpec] = None,
) -> Tuple[P2innModel, TrainingHistory]:
    """Each iteration draws B parameter vectors with fresh collocation points and steps all weights."""
    spec = spec if spec is not None else _default_spec(dist.family)
    if spec.family != dist.family:
        raise ConfigError("problem family {} does not match source {}".format(spec.family.value, dist.family.value))
    if spec.param_dim != model.config.param_in:
        raise DimensionError(
            "model takes {} PDE coefficients, {} family has {}".format(
                model.config.param_in, spec.family.value, spec.param_dim
            )
        )
    trained = model.copy()
    rng = np.random.default_rng(cfg.seed)

    def draw():
        mus = dist.sample(rng, cfg.equations_per_batch)
        return [sample_batch(spec, cfg.counts, rng) for _ in mus], mus

    logging.info(
        "Pre-training on %s (%s parameter vectors) for %s iterations",
        dist.name,
        len(dist.vectors),
        cfg.iterations,
    )
    history = _optimize(trained, draw, cfg, "pretrain")
    return trained, history


def finetune(
    model: P2innModel,
    mu_star,
    kind: AdapterKind,
    k: int = DEFAULT_RANK,
    cfg: TrainConfig = TrainConfig(),
    spec: Optional[ProblemSpec] = None,
    frozen_fields: Iterable[str] = (),
    overrides: Optional[Dict[str, float]] = None,
) -> Tuple[P2innModel, TrainingHistory]:
    """Attach adapters and optimize only their fields against the loss at ``mu_star``.

    Batches come from ``default_rng(cfg.seed)``, so iteration 0 sees the batch
    ``sample_batch(spec, cfg.counts, default_rng(cfg.seed))``.
    """
    spec = spec if spec is not None else _default_spec(
        ProblemFamily.HELMHOLTZ if isinstance(mu_star, HelmholtzParams) else ProblemFamily.CDR
    )
    adapted = attach_adapters(
        model, kind, k, frozen_fields=frozen_fields, overrides=overrides, seed=cfg.seed
    )
    history = TrainingHistory()
    if kind == AdapterKind.NONE:
        return adapted, history
    rng = np.random.default_rng(cfg.seed)

    def draw():
        return [sample_batch(spec, cfg.counts, rng)], [mu_star]

    history = _optimize(adapted, draw, cfg, "finetune[{}]".format(kind.value))
    return adapted, history


def _default_spec(family: ProblemFamily) -> ProblemSpec:
    return ProblemSpec.helmholtz() if family == ProblemFamily.HELMHOLTZ else ProblemSpec.cdr()

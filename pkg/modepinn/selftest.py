"""
Invariant suite behind ``modepinn selftest``.

Each check returns a PropertyCheck; ``run_selftest`` logs one colored
pass/fail line per property.
"""

import io
import logging
from typing import Callable, Dict, List, Sequence

import numpy as np

from modepinn.adapters import (
    expected_param_count,
    init_adapter,
    mode_forward,
    mode_forward_standard,
    mode_init,
    svd_diag_forward,
    svd_diag_init,
)
from modepinn.checkpoint import save_checkpoint
from modepinn.constants import AdapterKind, InitialConditionKind
from modepinn.linalg import SvdFactors
from modepinn.model import ArchitectureConfig, attach_adapters, build_p2inn, predict
from modepinn.pde import (
    BatchCounts,
    CdrParams,
    ProblemSpec,
    sample_batch,
    shifted_initial_condition,
)
from modepinn.refsolve import convergence_order, exact_logistic, strang_cdr
from modepinn.script_models import PropertyCheck
from modepinn.train import LossWeights, loss_and_gradients, pinn_loss
from modepinn.utils import update_verification_status

DUAL_FORM_TOLERANCE = 1e-10
RECOVERY_TOLERANCE = 1e-12
GRADIENT_TOLERANCE = 1e-5
GRADIENT_STEP = 1e-5
TRANSLATION_TOLERANCE = 1e-3
LOGISTIC_TOLERANCE = 1e-10
EIGENMODE_TOLERANCE = 1e-4
ORDER_RANGE = (1.8, 2.2)

GRADIENT_KINDS = (
    AdapterKind.MODE,
    AdapterKind.LORA,
    AdapterKind.SVD_DIAG,
    AdapterKind.BIAS_ONLY,
    AdapterKind.FULL,
)

# SVD-diag drops the residual spectrum and is the one kind without exact recovery
RECOVERY_KINDS = (
    AdapterKind.MODE,
    AdapterKind.LORA,
    AdapterKind.IA3,
    AdapterKind.BIAS_ONLY,
    AdapterKind.FULL,
)


def _random_layer(rng: np.random.Generator, d_out: int, d_in: int):
    return rng.normal(size=(d_out, d_in)), rng.normal(size=d_out)


def _randomized_mode(p, rng: np.random.Generator):
    k = p.rank
    return p.with_trainables(
        {
            "phi": rng.normal(size=(k, k)),
            "tau": np.array(rng.normal()),
            "delta_b": rng.normal(size=p.factors.d_out),
        }
    )


def check_dual_form(trials: int = 200, seed: int = 0) -> PropertyCheck:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d_out, d_in = rng.integers(1, 65, size=2)
        k = int(rng.integers(1, min(8, d_out, d_in) + 1))
        w0, b0 = _random_layer(rng, d_out, d_in)
        p = _randomized_mode(mode_init(w0, b0, k), rng)
        h = rng.normal(size=(3, d_in))
        gap = np.max(np.abs(mode_forward(p, w0, b0, h) - mode_forward_standard(p, w0, b0, h)))
        worst = max(worst, float(gap))
    return PropertyCheck(
        "dual-form identity", worst <= DUAL_FORM_TOLERANCE, "max gap {:.2e} over {} trials".format(worst, trials)
    )


def check_exact_recovery(points: int = 1000, seed: int = 0) -> PropertyCheck:
    rng = np.random.default_rng(seed)
    model = build_p2inn(ArchitectureConfig.desk(), seed)
    coords = np.stack([rng.uniform(0.0, 2.0 * np.pi, points), rng.uniform(0.0, 1.0, points)], axis=1)
    mu = rng.uniform(0.0, 10.0, size=(points, 3))
    before = predict(model, coords, mu)
    worst = 0.0
    spec = ProblemSpec.cdr()
    counts = BatchCounts(n_f=64, n_u=32, n_b=32)
    batch = sample_batch(spec, counts, np.random.default_rng(seed))
    target = CdrParams(beta=15.0)
    frozen_loss = pinn_loss(model, batch, target)[0].total
    loss_gap = 0.0
    for kind in RECOVERY_KINDS:
        adapted = attach_adapters(model, kind, 4, seed=seed)
        worst = max(worst, float(np.max(np.abs(predict(adapted, coords, mu) - before))))
        loss_gap = max(loss_gap, abs(pinn_loss(adapted, batch, target)[0].total - frozen_loss))
    return PropertyCheck(
        "exact recovery",
        worst <= RECOVERY_TOLERANCE and loss_gap <= RECOVERY_TOLERANCE * max(1.0, abs(frozen_loss)),
        "output gap {:.2e}, iteration-0 loss gap {:.2e}".format(worst, loss_gap),
    )


def check_param_accounting(seed: int = 0) -> PropertyCheck:
    rng = np.random.default_rng(seed)
    mismatches = []
    for width in (16, 50, 64):
        w0, b0 = _random_layer(rng, width, width)
        for rank in (1, 2, 4, 8):
            for kind in GRADIENT_KINDS + (AdapterKind.IA3,):
                got = init_adapter(kind, w0, b0, rank, rng).param_count()
                want = expected_param_count(kind, rank, width, width)
                if got != want:
                    mismatches.append("{} r={} d={}: {} != {}".format(kind.value, rank, width, got, want))
            mode = expected_param_count(AdapterKind.MODE, rank, width, width)
            lora = expected_param_count(AdapterKind.LORA, rank, width, width)
            if not mode < lora:
                mismatches.append("MODE {} not below LoRA {} at r={} d={}".format(mode, lora, rank, width))
    if expected_param_count(AdapterKind.MODE, 4, 50, 50) != 67:
        mismatches.append("MODE k=4 d_out=50 is not 67")
    return PropertyCheck(
        "parameter accounting", not mismatches, "; ".join(mismatches) or "closed forms match"
    )


def _gradient_model(kind: AdapterKind, rng: np.random.Generator):
    cfg = ArchitectureConfig(coord_widths=(6,), param_widths=(6,), decoder_widths=(8, 8))
    model = attach_adapters(build_p2inn(cfg, 0), kind, 2, seed=1)
    # move off the initialization so every term carries gradient
    params = {
        name: value + 0.1 * rng.normal(size=np.shape(value))
        for name, value in model.trainable_parameters().items()
    }
    model.set_trainables(params)
    return model


def finite_difference_gap(
    kind: AdapterKind, seed: int = 0, step: float = GRADIENT_STEP
) -> float:
    """Largest relative gap between tape gradients and central differences over every trainable slot."""
    rng = np.random.default_rng(seed)
    model = _gradient_model(kind, rng)
    spec = ProblemSpec.cdr(ic=InitialConditionKind.SINUSOID)
    batch = sample_batch(spec, BatchCounts(n_f=16, n_u=16, n_b=16), rng)
    mu = CdrParams(beta=2.0, nu=0.5, rho=1.5)
    weights = LossWeights()
    _, grads = loss_and_gradients(model, [batch], [mu], weights, bc_derivatives=True)
    params = model.trainable_parameters()

    def loss_at(values: Dict[str, np.ndarray]) -> float:
        model.set_trainables(values)
        return pinn_loss(model, batch, mu, weights, bc_derivatives=True)[0].total

    worst = 0.0
    for name, value in params.items():
        base = np.array(value, dtype=np.float64)
        for index in np.ndindex(base.shape):
            plus, minus = base.copy(), base.copy()
            plus[index] += step
            minus[index] -= step
            up = loss_at({**params, name: plus})
            down = loss_at({**params, name: minus})
            numeric = (up - down) / (2.0 * step)
            analytic = float(np.asarray(grads[name])[index])
            scale = max(abs(numeric), abs(analytic), 1e-2)
            worst = max(worst, abs(numeric - analytic) / scale)
    model.set_trainables(params)
    return worst


def check_gradients(seed: int = 0) -> PropertyCheck:
    gaps = {kind.value: finite_difference_gap(kind, seed) for kind in GRADIENT_KINDS}
    worst = max(gaps.values())
    return PropertyCheck(
        "gradient correctness",
        worst <= GRADIENT_TOLERANCE,
        ", ".join("{} {:.1e}".format(k, v) for k, v in gaps.items()),
    )


def check_reference_solver() -> PropertyCheck:
    failures = []
    spec = ProblemSpec.cdr()
    sinusoid = ProblemSpec.cdr(ic=InitialConditionKind.SINUSOID)
    advected = strang_cdr(CdrParams(beta=1.0), sinusoid, nx=256, nt=200)
    translated = shifted_initial_condition(sinusoid.ic, advected.x, advected.t[-1], sinusoid.x_bounds)
    shift = np.max(np.abs(advected.values[-1] - translated))
    if shift > TRANSLATION_TOLERANCE:
        failures.append("translation {:.2e}".format(shift))

    reacted = strang_cdr(CdrParams(rho=3.0), spec, nx=64, nt=21)
    logistic = np.max(np.abs(reacted.values[-1] - exact_logistic(reacted.values[0], 3.0, reacted.t[-1])))
    if logistic > LOGISTIC_TOLERANCE:
        failures.append("logistic {:.2e}".format(logistic))

    nu = 0.5
    diffused = strang_cdr(CdrParams(nu=nu), sinusoid, nx=256, nt=201)
    mode = 1.0 + np.exp(-nu * diffused.t[-1]) * np.sin(diffused.x)
    eigen = np.max(np.abs(diffused.values[-1] - mode))
    if eigen > EIGENMODE_TOLERANCE:
        failures.append("eigenmode {:.2e}".format(eigen))

    report = convergence_order(CdrParams(beta=1.0, nu=0.5, rho=2.0), sinusoid, nx=64, nt_list=[21, 41, 81])
    if report.order is None or not ORDER_RANGE[0] <= report.order <= ORDER_RANGE[1]:
        failures.append("order {}".format(report.order))
    return PropertyCheck(
        "reference solver certification",
        not failures,
        "; ".join(failures) or "translation, logistic, eigenmode and order {:.2f} within limits".format(report.order),
    )


def check_subsumption(trials: int = 50, seed: int = 0) -> PropertyCheck:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d_out, d_in = rng.integers(2, 33, size=2)
        k = int(rng.integers(1, min(d_out, d_in) + 1))
        w0, b0 = _random_layer(rng, d_out, d_in)
        diag = svd_diag_init(w0, b0, k)
        diag = diag.with_trainables({"alpha": rng.normal(size=k)})
        mode = mode_init(w0, b0, k).with_trainables(
            {"phi": np.diag(diag.alpha - diag.factors.sigma_k), "tau": np.array(0.0)}
        )
        h = rng.normal(size=(4, d_in))
        gap = np.max(np.abs(mode_forward(mode, w0, b0, h) - svd_diag_forward(diag, b0, h)))
        worst = max(worst, float(gap))
    return PropertyCheck(
        "MODE subsumes SVD-diag", worst <= RECOVERY_TOLERANCE, "max gap {:.2e}".format(worst)
    )


def cross_modal_witness(factors: SvdFactors, w0: np.ndarray, b0: np.ndarray, i: int, j: int, alpha) -> tuple:
    """(u_i projection of svd_diag at v_j, u_i projection of MODE with phi = e_ij at v_j)."""
    h = factors.v_k[:, j][None, :]
    diag = svd_diag_init(w0, b0, factors.k).with_trainables({"alpha": np.asarray(alpha, dtype=np.float64)})
    phi = np.zeros((factors.k, factors.k))
    phi[i, j] = 1.0
    mode = mode_init(w0, b0, factors.k).with_trainables({"phi": phi, "tau": np.array(0.0)})
    # tau = 0 and phi = e_ij leave sigma_k on the diagonal, which is orthogonal to u_i at v_j
    u_i = factors.u_k[:, i]
    locked = float((svd_diag_forward(diag, b0, h) - b0)[0] @ u_i)
    unlocked = float((mode_forward(mode, w0, b0, h) - b0)[0] @ u_i)
    return locked, unlocked


def check_cross_modal_unlock(trials: int = 20, seed: int = 0) -> PropertyCheck:
    rng = np.random.default_rng(seed)
    worst_locked = 0.0
    worst_unlocked = 0.0
    for _ in range(trials):
        d = int(rng.integers(4, 17))
        k = int(rng.integers(2, d + 1))
        w0, b0 = _random_layer(rng, d, d)
        factors = mode_init(w0, b0, k).factors
        i, j = rng.choice(k, size=2, replace=False)
        locked, unlocked = cross_modal_witness(factors, w0, b0, int(i), int(j), rng.normal(size=k))
        worst_locked = max(worst_locked, abs(locked))
        worst_unlocked = max(worst_unlocked, abs(unlocked - 1.0))
    return PropertyCheck(
        "cross-modal unlock",
        worst_locked <= 1e-10 and worst_unlocked <= 1e-10,
        "svd_diag leak {:.1e}, MODE witness gap {:.1e}".format(worst_locked, worst_unlocked),
    )


def check_determinism(seed: int = 0) -> PropertyCheck:
    blobs = []
    for _ in range(2):
        model = attach_adapters(build_p2inn(ArchitectureConfig.desk(), seed), AdapterKind.LORA, 4, seed=seed)
        stream = io.BytesIO()
        save_checkpoint(model, stream)
        blobs.append(stream.getvalue())
    fields = [strang_cdr(CdrParams(beta=2.0, nu=0.1, rho=1.0), ProblemSpec.cdr(), 64, 21).values for _ in range(2)]
    same = blobs[0] == blobs[1] and np.array_equal(fields[0], fields[1])
    return PropertyCheck("determinism", same, "checkpoint and reference bytes repeat" if same else "outputs differ")


SELFTEST_CHECKS: Sequence[Callable[[], PropertyCheck]] = (
    check_dual_form,
    check_exact_recovery,
    check_param_accounting,
    check_gradients,
    check_reference_solver,
    check_subsumption,
    check_cross_modal_unlock,
    check_determinism,
)


def run_selftest(checks: Sequence[Callable[[], PropertyCheck]] = SELFTEST_CHECKS) -> List[PropertyCheck]:
    results = []
    for check in checks:
        try:
            result = check()
        except Exception as e:
            logging.error("Exception:", exc_info=1)
            result = PropertyCheck(check.__name__, False, "raised {}: {}".format(type(e).__name__, e))
        logging.info("%s: %s", result.property_name, result.detail)
        update_verification_status(not result.passed, result.property_name)
        results.append(result)
    return results

import math
import unittest

import numpy as np
from numpy.testing import assert_allclose

from modepinn.autodiff import Jet1D
from modepinn.constants import AdapterKind, InitialConditionKind, ProblemFamily
from modepinn.errors import (
    ConfigError,
    DimensionError,
    NonFiniteGradientError,
    TrainingDivergenceError,
)
from modepinn.model import ArchitectureConfig, build_p2inn, trainable_count
from modepinn.pde import (
    BatchCounts,
    CdrParams,
    HelmholtzParams,
    ProblemSpec,
    cdr_residual,
    initial_condition,
    sample_batch,
)
from modepinn.selftest import GRADIENT_KINDS, GRADIENT_TOLERANCE, finite_difference_gap
from modepinn.train import (
    SOURCE_PRESETS,
    SWEEP_PRESETS,
    AdamState,
    LossReport,
    LossWeights,
    SourceDistribution,
    TrainConfig,
    _check_divergence,
    adam_step,
    assemble_loss,
    equations_loss,
    finetune,
    pinn_loss,
    pretrain,
    value_grid,
)

SMALL = ArchitectureConfig(coord_widths=(8,), param_widths=(8,), decoder_widths=(10, 10))
SMALL_COUNTS = BatchCounts(n_f=20, n_u=10, n_b=10)


class TestLossAssembly(unittest.TestCase):
    def test_weighted_sum(self):
        report, total = assemble_loss(
            np.array([1.0, 2.0]), np.array([1.0]), [np.array([2.0]), np.array([1.0])], LossWeights()
        )
        self.assertEqual((report.l_pde, report.l_ic, report.l_bc), (2.5, 1.0, 5.0))
        self.assertAlmostEqual(total, 602.5)
        self.assertEqual((report.n_f, report.n_u, report.n_b), (2, 1, 1))

    def test_weighted_term_without_points(self):
        with self.assertRaises(ValueError):
            assemble_loss(np.zeros(0), np.ones(1), [np.ones(1)], LossWeights())
        with self.assertRaises(ValueError):
            assemble_loss(np.ones(2), np.ones(1), [], LossWeights())
        report, _ = assemble_loss(np.ones(2), np.ones(1), [], LossWeights(w_bc=0.0))
        self.assertEqual(report.l_bc, 0.0)

    def test_weights_validation(self):
        with self.assertRaises(ValueError):
            LossWeights(0.0, 0.0, 0.0)
        with self.assertRaises(ValueError):
            LossWeights(w_pde=-1.0)

    def test_helmholtz_loss_has_no_initial_term(self):
        model = build_p2inn(ArchitectureConfig(param_in=1, coord_widths=(8,), param_widths=(8,), decoder_widths=(10,)), 0)
        batch = sample_batch(ProblemSpec.helmholtz(), SMALL_COUNTS, np.random.default_rng(0))
        report, _ = pinn_loss(model, batch, HelmholtzParams(a=2.5))
        self.assertEqual(report.n_u, 0)
        self.assertEqual(report.l_ic, 0.0)
        self.assertGreater(report.l_pde, 0.0)

    def test_closed_form_eigenmode_has_no_residual(self):
        nu = 2.0
        batch = sample_batch(ProblemSpec.cdr(ic=InitialConditionKind.SINUSOID), SMALL_COUNTS, np.random.default_rng(0))
        x, t = batch.interior[:, 0], batch.interior[:, 1]
        decay = np.exp(-nu * t)
        jet = Jet1D(u=1.0 + decay * np.sin(x), u_x=decay * np.cos(x), u_t=-nu * decay * np.sin(x), u_xx=-decay * np.sin(x))
        residual = cdr_residual(jet, CdrParams(nu=nu))
        start = 1.0 + np.sin(batch.initial)
        ic_error = start - initial_condition(InitialConditionKind.SINUSOID, batch.initial)
        report, total = assemble_loss(residual, ic_error, [np.zeros(batch.n_b)], LossWeights())
        self.assertLessEqual(report.l_pde, 1e-8)
        self.assertLessEqual(total, 1e-8)

    def test_constant_model_initial_loss(self):
        model = build_p2inn(SMALL, 0)
        for _, layer in model.named_layers():
            layer.weight[...] = 0.0
            layer.bias[...] = 0.0
        model.decoder[-1].bias[...] = 1.0
        spec = ProblemSpec.cdr()
        batch = sample_batch(spec, SMALL_COUNTS, np.random.default_rng(5))
        report, _ = pinn_loss(model, batch, CdrParams(beta=3.0, rho=2.0))
        expected = np.mean((1.0 - initial_condition(InitialConditionKind.GAUSS_WIDE, batch.initial)) ** 2)
        self.assertAlmostEqual(report.l_ic, expected, places=14)
        self.assertEqual(report.l_pde, 0.0)
        self.assertEqual(report.l_bc, 0.0)

        masked, _ = pinn_loss(model, batch, CdrParams(beta=3.0), LossWeights(0.0, 1.0, 0.0))
        self.assertEqual(masked.total, masked.l_ic)
        self.assertAlmostEqual(masked.total, expected, places=14)

    def test_batches_must_share_counts(self):
        model = build_p2inn(SMALL, 0)
        rng = np.random.default_rng(0)
        spec = ProblemSpec.cdr()
        batches = [sample_batch(spec, SMALL_COUNTS, rng), sample_batch(spec, BatchCounts(n_f=5), rng)]
        with self.assertRaises(ValueError):
            equations_loss(model, batches, [CdrParams(), CdrParams()])
        with self.assertRaises(ValueError):
            equations_loss(model, batches[:1], [CdrParams(), CdrParams()])


class TestAdam(unittest.TestCase):
    def test_first_step_moves_by_learning_rate(self):
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.array([0.5, -4.0])}
        state = AdamState.create(params, learning_rate=0.1)
        updated = adam_step(state, grads, params)
        expected = params["w"] - 0.1 * grads["w"] / (np.abs(grads["w"]) + state.eps)
        assert_allclose(updated["w"], expected, rtol=1e-14)
        self.assertEqual(state.step, 1)

    def test_second_step_uses_bias_corrected_moments(self):
        params = {"w": np.array([0.0])}
        state = AdamState.create(params, learning_rate=1.0)
        params = adam_step(state, {"w": np.array([1.0])}, params)
        updated = adam_step(state, {"w": np.array([3.0])}, params)
        m_hat = (0.9 * 0.1 * 1.0 + 0.1 * 3.0) / (1.0 - 0.9**2)
        v_hat = (0.999 * 0.001 * 1.0 + 0.001 * 9.0) / (1.0 - 0.999**2)
        self.assertAlmostEqual(updated["w"][0], params["w"][0] - m_hat / (math.sqrt(v_hat) + 1e-8), places=12)

    def test_descends_a_quadratic(self):
        params = {"theta": np.array([1.0])}
        state = AdamState.create(params, learning_rate=0.1)
        magnitudes = [1.0]
        for _ in range(10):
            params = adam_step(state, {"theta": 2.0 * params["theta"]}, params)
            magnitudes.append(abs(float(params["theta"][0])))
        for before, after in zip(magnitudes, magnitudes[1:]):
            self.assertLess(after, before)
        self.assertEqual(state.step, 10)

    def test_zero_gradient_leaves_parameters(self):
        params = {"w": np.array([0.3, -1.5])}
        state = AdamState.create(params)
        updated = adam_step(state, {"w": np.zeros(2)}, params)
        self.assertEqual(updated["w"].tobytes(), params["w"].tobytes())

    def test_rejects_bad_gradients(self):
        params = {"w": np.zeros(2)}
        state = AdamState.create(params)
        with self.assertRaises(NonFiniteGradientError) as ctx:
            adam_step(state, {"w": np.array([np.nan, 0.0])}, params)
        self.assertEqual(ctx.exception.name, "w")
        with self.assertRaises(DimensionError):
            adam_step(state, {"v": np.zeros(2)}, params)
        with self.assertRaises(DimensionError):
            adam_step(state, {"w": np.zeros(3)}, params)


class TestSources(unittest.TestCase):
    def test_preset_sizes(self):
        self.assertEqual(len(SOURCE_PRESETS["convection"]().vectors), 10)
        self.assertEqual(len(SOURCE_PRESETS["reaction_diffusion"]().vectors), 10)
        self.assertEqual(len(SOURCE_PRESETS["helmholtz"]().vectors), 6)
        self.assertEqual(len(SWEEP_PRESETS["reaction_interpolation"]().vectors), 9)
        self.assertEqual(len(SWEEP_PRESETS["reaction_extrapolation"]().vectors), 10)
        self.assertEqual(len(SWEEP_PRESETS["helmholtz_fine"]().vectors), 11)

    def test_value_grid_is_inclusive(self):
        self.assertEqual(value_grid(2.5, 3.0, 0.1), [2.5, 2.6, 2.7, 2.8, 2.9, 3.0])

    def test_parse_terms(self):
        dist = SourceDistribution.parse("beta=1:3:1,rho=2", ProblemFamily.CDR)
        self.assertEqual(dist.vectors, ((1.0, 0.0, 2.0), (2.0, 0.0, 2.0), (3.0, 0.0, 2.0)))
        dist = SourceDistribution.parse("a=2.5|2.75", ProblemFamily.HELMHOLTZ)
        self.assertEqual([p.a for p in dist.all_params()], [2.5, 2.75])

    def test_parse_errors(self):
        for text, family in (
            ("helmholtz", ProblemFamily.CDR),
            ("gamma=1", ProblemFamily.CDR),
            ("bogus", ProblemFamily.CDR),
            ("beta=3:1:1", ProblemFamily.CDR),
        ):
            with self.assertRaises(ConfigError, msg=text):
                SourceDistribution.parse(text, family)

    def test_sampling_is_seeded(self):
        dist = SOURCE_PRESETS["convection"]()
        first = dist.sample(np.random.default_rng(3), 25)
        second = dist.sample(np.random.default_rng(3), 25)
        self.assertEqual(first, second)
        self.assertEqual(len(first), 25)


class TestTrainingPhases(unittest.TestCase):
    def setUp(self):
        self.model = build_p2inn(SMALL, 0)
        self.cfg = TrainConfig(iterations=2, equations_per_batch=2, counts=SMALL_COUNTS, seed=7)
        self.mu = CdrParams(beta=3.0)

    def test_zero_iterations_leave_the_model_alone(self):
        trained, history = pretrain(self.model, SOURCE_PRESETS["convection"](), TrainConfig(iterations=0))
        self.assertEqual(len(history), 0)
        for (name, a), (_, b) in zip(trained.named_layers(), self.model.named_layers()):
            self.assertEqual(a.weight.tobytes(), b.weight.tobytes(), name)

    def test_pretrain_updates_every_weight(self):
        trained, history = pretrain(self.model, SOURCE_PRESETS["convection"](), self.cfg)
        self.assertEqual(len(history), 2)
        self.assertEqual(history.rows[1][0], 1)
        for (name, a), (_, b) in zip(trained.named_layers(), self.model.named_layers()):
            self.assertFalse(np.array_equal(a.weight, b.weight), name)

    def test_pretrain_rejects_mismatched_family(self):
        with self.assertRaises(DimensionError):
            pretrain(build_p2inn(ArchitectureConfig(param_in=1, decoder_widths=(10,)), 0), SOURCE_PRESETS["convection"](), self.cfg)
        with self.assertRaises(ConfigError):
            pretrain(self.model, SOURCE_PRESETS["convection"](), self.cfg, ProblemSpec.helmholtz())

    def test_finetune_without_adapters(self):
        adapted, history = finetune(self.model, self.mu, AdapterKind.NONE, cfg=self.cfg)
        self.assertEqual(len(history), 0)
        self.assertEqual(trainable_count(adapted), 0)

    def test_first_finetune_loss_is_the_frozen_loss(self):
        batch = sample_batch(ProblemSpec.cdr(), SMALL_COUNTS, np.random.default_rng(self.cfg.seed))
        frozen = pinn_loss(self.model, batch, self.mu)[0].total
        for kind in (AdapterKind.MODE, AdapterKind.LORA, AdapterKind.IA3, AdapterKind.BIAS_ONLY):
            _, history = finetune(self.model, self.mu, kind, 2, self.cfg)
            self.assertTrue(math.isclose(history.rows[0][-1], frozen, rel_tol=1e-12), kind.value)

    def test_finetune_touches_only_adapters(self):
        adapted, history = finetune(self.model, self.mu, AdapterKind.MODE, 2, self.cfg)
        self.assertEqual(len(history), 2)
        for (name, a), (_, b) in zip(adapted.named_layers(), self.model.named_layers()):
            self.assertEqual(a.weight.tobytes(), b.weight.tobytes(), name)
            self.assertEqual(a.bias.tobytes(), b.bias.tobytes(), name)
        self.assertNotEqual(float(adapted.decoder[1].adapter.tau), 1.0)

    def test_divergence_is_reported(self):
        for total in (2e6, float("nan")):
            report = LossReport(l_pde=total, l_ic=0.0, l_bc=0.0, total=total, n_f=1, n_u=1, n_b=1)
            with self.assertRaises(TrainingDivergenceError) as ctx:
                _check_divergence(report, 12)
            self.assertEqual(ctx.exception.iteration, 12)

    def test_train_config_validation(self):
        with self.assertRaises(ConfigError):
            TrainConfig(iterations=-1)
        with self.assertRaises(ConfigError):
            TrainConfig(learning_rate=0.0)


class TestGradients(unittest.TestCase):
    def test_tape_gradients_match_central_differences(self):
        for kind in GRADIENT_KINDS:
            self.assertLessEqual(finite_difference_gap(kind), GRADIENT_TOLERANCE, kind.value)


if __name__ == "__main__":
    unittest.main()

import unittest

import numpy as np
from numpy.testing import assert_allclose

from modepinn.constants import ActivationKind, AdapterKind
from modepinn.errors import DimensionError
from modepinn.model import (
    ArchitectureConfig,
    LayerSpec,
    P2innModel,
    attach_adapters,
    build_p2inn,
    default_layer_range,
    forward_u,
    merge_adapters,
    model_jet,
    model_jet_2d,
    predict,
    trainable_count,
)


def _points(rng, n):
    coords = np.stack([rng.uniform(0.0, 2.0 * np.pi, n), rng.uniform(0.0, 1.0, n)], axis=1)
    return coords, rng.uniform(0.0, 10.0, size=(n, 3))


class TestArchitecture(unittest.TestCase):
    def test_desk_and_paper_scale_counts(self):
        self.assertEqual(ArchitectureConfig.desk().full_param_count(), 10737)
        self.assertEqual(ArchitectureConfig.paper_scale().full_param_count(), 76872)

    def test_layer_shapes(self):
        shapes = ArchitectureConfig.desk().layer_shapes()
        self.assertEqual(shapes["decoder"], [(50, 64), (50, 50), (50, 50), (1, 50)])
        self.assertEqual(shapes["param_encoder"][0], (32, 3))

    def test_echo_round_trip(self):
        cfg = ArchitectureConfig(param_in=1, decoder_widths=(7, 9), activation=ActivationKind.SILU)
        self.assertEqual(ArchitectureConfig.from_echo(cfg.echo()), cfg)

    def test_invalid_widths(self):
        with self.assertRaises(ValueError):
            ArchitectureConfig(decoder_widths=())


class TestP2inn(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(4)
        self.model = build_p2inn(ArchitectureConfig.desk(), 0)

    def test_build_is_deterministic(self):
        other = build_p2inn(ArchitectureConfig.desk(), 0)
        for (name, a), (_, b) in zip(self.model.named_layers(), other.named_layers()):
            self.assertEqual(a.weight.tobytes(), b.weight.tobytes(), name)
        assert_allclose(self.model.decoder[0].bias, 0.0)

    def test_concatenation_width_mismatch(self):
        layers = {
            group: [LayerSpec(weight=layer.weight, bias=layer.bias) for layer in self.model.group(group)]
            for group in ("coord_encoder", "param_encoder", "decoder")
        }
        layers["decoder"][0] = LayerSpec(weight=np.zeros((50, 60)), bias=np.zeros(50))
        with self.assertRaises(DimensionError) as ctx:
            P2innModel(config=self.model.config, **layers)
        self.assertIn("coordinate latent 32 + parameter latent 32", str(ctx.exception))

    def test_predict_shapes(self):
        coords, mu = _points(self.rng, 7)
        self.assertEqual(predict(self.model, coords, mu).shape, (7,))
        self.assertEqual(predict(self.model, coords, np.array([1.0, 0.0, 0.0])).shape, (7,))
        with self.assertRaises(DimensionError):
            predict(self.model, coords, np.ones((7, 2)))
        with self.assertRaises(DimensionError):
            predict(self.model, np.ones((7, 3)), mu)

    def test_model_jet_matches_finite_differences(self):
        mu = np.array([2.0, 0.5, 1.0])
        x, t, h = 1.3, 0.4, 1e-4
        jet = model_jet(self.model, x, t, mu)
        u = lambda xx, tt: forward_u(self.model, xx, tt, mu)
        self.assertAlmostEqual(jet.u, u(x, t), places=12)
        self.assertAlmostEqual(jet.u_x, (u(x + h, t) - u(x - h, t)) / (2 * h), places=7)
        self.assertAlmostEqual(jet.u_t, (u(x, t + h) - u(x, t - h)) / (2 * h), places=7)
        self.assertAlmostEqual(jet.u_xx, (u(x + h, t) - 2 * u(x, t) + u(x - h, t)) / h**2, places=5)

    def test_model_jet_2d(self):
        model = build_p2inn(ArchitectureConfig.desk(param_in=1), 2)
        mu = np.array([2.7])
        x, y, h = 0.2, -0.4, 1e-4
        jet = model_jet_2d(model, x, y, mu)
        u = lambda xx, yy: forward_u(model, xx, yy, mu)
        self.assertAlmostEqual(jet.u_yy, (u(x, y + h) - 2 * u(x, y) + u(x, y - h)) / h**2, places=5)


class TestAdapters(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(9)
        self.model = build_p2inn(ArchitectureConfig.desk(), 1)
        self.coords, self.mu = _points(self.rng, 1000)
        self.before = predict(self.model, self.coords, self.mu)

    def test_mode_trainable_count(self):
        adapted = attach_adapters(self.model, AdapterKind.MODE, 4)
        self.assertEqual(trainable_count(adapted), 134)
        self.assertEqual([name for name, _ in adapted.adapted_layers()], ["decoder.2", "decoder.3"])
        self.assertEqual(adapted.adapter_rank, 4)

    def test_exact_recovery_for_every_full_rank_kind(self):
        for kind in [k for k in AdapterKind if k != AdapterKind.SVD_DIAG]:
            adapted = attach_adapters(self.model, kind, 4, seed=3)
            gap = np.max(np.abs(predict(adapted, self.coords, self.mu) - self.before))
            self.assertLessEqual(gap, 1e-12, kind.value)

    def test_attach_freezes_everything_and_copies(self):
        adapted = attach_adapters(self.model, AdapterKind.NONE)
        self.assertEqual(trainable_count(adapted), 0)
        self.assertEqual(trainable_count(self.model), self.model.config.full_param_count())
        self.assertIsNone(self.model.decoder[1].adapter)

    def test_full_adapts_every_decoder_layer(self):
        self.assertEqual(default_layer_range(AdapterKind.FULL, 4), (1, 2, 3, 4))
        self.assertEqual(default_layer_range(AdapterKind.MODE, 4), (2, 3))
        adapted = attach_adapters(self.model, AdapterKind.FULL)
        self.assertEqual(trainable_count(adapted), 8401)

    def test_invalid_requests(self):
        with self.assertRaises(DimensionError):
            attach_adapters(self.model, AdapterKind.MODE, 4, layer_range=(5,))
        with self.assertRaises(ValueError):
            attach_adapters(self.model, AdapterKind.MODE, 4, frozen_fields=("alpha",))
        narrow = build_p2inn(ArchitectureConfig(decoder_widths=(3, 3)), 0)
        with self.assertRaises(DimensionError):
            attach_adapters(narrow, AdapterKind.MODE, 4)
        adapted = attach_adapters(self.model, AdapterKind.LORA, 2)
        with self.assertRaises(ValueError):
            attach_adapters(adapted, AdapterKind.MODE, 2)

    def test_frozen_fields_and_overrides(self):
        adapted = attach_adapters(
            self.model, AdapterKind.MODE, 4, frozen_fields=("tau",), overrides={"tau": 0.0}
        )
        self.assertEqual(trainable_count(adapted), 2 * (16 + 50))
        self.assertEqual(float(adapted.decoder[1].adapter.tau), 0.0)

    def test_set_trainables_and_merge(self):
        adapted = attach_adapters(self.model, AdapterKind.MODE, 4)
        params = {
            name: value + 0.05 * self.rng.normal(size=np.shape(value))
            for name, value in adapted.trainable_parameters().items()
        }
        adapted.set_trainables(params)
        moved = predict(adapted, self.coords, self.mu)
        self.assertGreater(np.max(np.abs(moved - self.before)), 1e-6)
        merged = merge_adapters(adapted)
        self.assertEqual(merged.adapter_kind, AdapterKind.NONE)
        assert_allclose(predict(merged, self.coords, self.mu), moved, atol=1e-10)
        with self.assertRaises(KeyError):
            adapted.set_trainables({"decoder.1.weight": self.model.decoder[0].weight})


if __name__ == "__main__":
    unittest.main()

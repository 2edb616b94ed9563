import unittest

import numpy as np
from numpy.testing import assert_allclose

from modepinn.adapters import (
    LoraParams,
    bias_only_forward,
    bias_only_init,
    expected_param_count,
    ia3_forward,
    ia3_init,
    init_adapter,
    lora_forward,
    lora_init,
    merge_to_dense,
    mode_forward,
    mode_forward_standard,
    mode_init,
    param_count,
    restore_adapter,
    svd_diag_forward,
    svd_diag_init,
)
from modepinn.constants import AdapterKind
from modepinn.errors import DimensionError
from modepinn.linalg import reconstruct_principal, residual_spectrum
from modepinn.selftest import cross_modal_witness

ALL_KINDS = (
    AdapterKind.MODE,
    AdapterKind.SVD_DIAG,
    AdapterKind.LORA,
    AdapterKind.IA3,
    AdapterKind.BIAS_ONLY,
    AdapterKind.FULL,
)


class TestModeAdapter(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(11)
        self.w0 = self.rng.normal(size=(12, 9))
        self.b0 = self.rng.normal(size=12)
        self.h = self.rng.normal(size=(100, 9))

    def _random(self, k=3):
        return mode_init(self.w0, self.b0, k).with_trainables(
            {
                "phi": self.rng.normal(size=(k, k)),
                "tau": np.array(0.7),
                "delta_b": self.rng.normal(size=12),
            }
        )

    def test_initialization(self):
        p = mode_init(self.w0, self.b0, 4)
        assert_allclose(p.phi, np.zeros((4, 4)))
        self.assertEqual(float(p.tau), 1.0)
        assert_allclose(p.delta_b, np.zeros(12))
        p.factors.check()

    def test_exact_recovery_at_init(self):
        p = mode_init(self.w0, self.b0, 4)
        gap = np.max(np.abs(mode_forward(p, self.w0, self.b0, self.h) - (self.h @ self.w0.T + self.b0)))
        self.assertLessEqual(gap, 1e-12)

    def test_tau_zero_is_hard_truncation(self):
        p = mode_init(self.w0, self.b0, 4).with_trainables({"tau": np.array(0.0)})
        principal = reconstruct_principal(p.factors)
        assert_allclose(mode_forward(p, self.w0, self.b0, self.h), self.h @ principal.T + self.b0, atol=1e-12)

    def test_tau_two_adds_residual_once(self):
        p = mode_init(self.w0, self.b0, 4).with_trainables({"tau": np.array(2.0)})
        w_res = residual_spectrum(self.w0, p.factors)
        out = mode_forward_standard(p, self.w0, self.b0, self.h)
        assert_allclose(out - (self.h @ self.w0.T + self.b0), self.h @ w_res.T, atol=1e-12)

    def test_dual_form_identity(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            d_out, d_in = rng.integers(1, 65, size=2)
            k = int(rng.integers(1, min(8, d_out, d_in) + 1))
            w0 = rng.normal(size=(d_out, d_in))
            b0 = rng.normal(size=d_out)
            p = mode_init(w0, b0, k).with_trainables(
                {
                    "phi": rng.normal(size=(k, k)),
                    "tau": np.array(rng.normal()),
                    "delta_b": rng.normal(size=d_out),
                }
            )
            h = rng.normal(size=(2, d_in))
            worst = max(worst, np.max(np.abs(mode_forward(p, w0, b0, h) - mode_forward_standard(p, w0, b0, h))))
        self.assertLessEqual(worst, 1e-10)

    def test_single_vector_input(self):
        p = self._random()
        out = mode_forward(p, self.w0, self.b0, self.h[0])
        assert_allclose(out, mode_forward_standard(p, self.w0, self.b0, self.h[:1])[0], atol=1e-10)

    def test_dimension_mismatch(self):
        p = mode_init(self.w0, self.b0, 2)
        with self.assertRaises(DimensionError):
            mode_forward(p, self.w0, self.b0, np.ones((3, 8)))
        with self.assertRaises(DimensionError):
            mode_init(self.w0, self.b0, 10)

    def test_merge_matches_forward(self):
        p = self._random()
        w, b = merge_to_dense(p, self.w0, self.b0)
        probes = self.rng.normal(size=(50, 9))
        assert_allclose(probes @ w.T + b, mode_forward(p, self.w0, self.b0, probes), atol=1e-10)
        w_init, b_init = merge_to_dense(mode_init(self.w0, self.b0, 3), self.w0, self.b0)
        assert_allclose(w_init, self.w0, atol=1e-12)
        assert_allclose(b_init, self.b0, atol=1e-12)

    def test_subsumes_svd_diag(self):
        diag = svd_diag_init(self.w0, self.b0, 4).with_trainables({"alpha": self.rng.normal(size=4)})
        mode = mode_init(self.w0, self.b0, 4).with_trainables(
            {"phi": np.diag(diag.alpha - diag.factors.sigma_k), "tau": np.array(0.0)}
        )
        assert_allclose(
            mode_forward(mode, self.w0, self.b0, self.h), svd_diag_forward(diag, self.b0, self.h), atol=1e-12
        )

    def test_cross_modal_unlock(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            q_u, _ = np.linalg.qr(rng.normal(size=(8, 8)))
            q_v, _ = np.linalg.qr(rng.normal(size=(6, 6)))
            w0 = q_u[:, :6] @ np.diag(np.linspace(6.0, 1.0, 6)) @ q_v.T
            factors = mode_init(w0, np.zeros(8), 4).factors
            for alpha in (rng.normal(size=4), np.zeros(4), factors.sigma_k):
                locked, unlocked = cross_modal_witness(factors, w0, np.zeros(8), 0, 2, alpha)
                self.assertAlmostEqual(locked, 0.0, places=10)
                self.assertAlmostEqual(unlocked, 1.0, places=10)


class TestBaselines(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2)
        self.w0 = self.rng.normal(size=(6, 5))
        self.b0 = self.rng.normal(size=6)
        self.h = self.rng.normal(size=(20, 5))
        self.dense = self.h @ self.w0.T + self.b0

    def test_every_kind_recovers_frozen_layer_at_init(self):
        for kind in ALL_KINDS:
            if kind == AdapterKind.SVD_DIAG:
                continue
            p = init_adapter(kind, self.w0, self.b0, 3, self.rng)
            self.assertLessEqual(np.max(np.abs(p.forward(self.w0, self.b0, self.h) - self.dense)), 1e-12)

    def test_svd_diag_forms(self):
        p = svd_diag_init(self.w0, self.b0, 3)
        principal = reconstruct_principal(p.factors)
        assert_allclose(svd_diag_forward(p, self.b0, self.h), self.h @ principal.T + self.b0, atol=1e-12)
        zero = p.with_trainables({"alpha": np.zeros(3)})
        assert_allclose(svd_diag_forward(zero, self.b0, self.h), np.tile(self.b0, (20, 1)), atol=1e-15)
        alpha = self.rng.normal(size=3)
        p = p.with_trainables({"alpha": alpha})
        f = p.factors
        oracle = sum(alpha[i] * np.outer(self.h @ f.v_k[:, i], f.u_k[:, i]) for i in range(3)) + self.b0
        assert_allclose(svd_diag_forward(p, self.b0, self.h), oracle, atol=1e-12)
        merged_w, _ = merge_to_dense(zero, self.w0, self.b0)
        assert_allclose(merged_w, np.zeros((6, 5)))

    def test_lora_rank_one_unit_update(self):
        a = np.zeros((1, 5))
        b = np.zeros((6, 1))
        a[0, 0] = 1.0
        b[0, 0] = 1.0
        p = LoraParams(a=a, b=b)
        out = lora_forward(p, self.w0, self.b0, self.h)
        expected = self.dense.copy()
        expected[:, 0] += self.h[:, 0]
        assert_allclose(out, expected, atol=1e-12)

    def test_lora_initialization(self):
        p = lora_init(self.w0, self.b0, 2, np.random.default_rng(0))
        assert_allclose(p.b, np.zeros((6, 2)))
        self.assertEqual(p.a.shape, (2, 5))
        self.assertLess(np.std(lora_init(np.ones((64, 64)), np.zeros(64), 8).a), 0.02)
        with self.assertRaises(DimensionError):
            lora_init(self.w0, self.b0, 6)

    def test_ia3_and_bias_only(self):
        scale = self.rng.normal(size=6)
        p = ia3_init(self.w0, self.b0).with_trainables({"scale": scale})
        assert_allclose(ia3_forward(p, self.w0, self.b0, self.h), scale * (self.h @ self.w0.T) + self.b0)
        delta = self.rng.normal(size=6)
        q = bias_only_init(self.w0, self.b0).with_trainables({"delta_b": delta})
        assert_allclose(bias_only_forward(q, self.w0, self.b0, self.h), self.dense + delta)

    def test_merge_matches_forward_for_every_kind(self):
        for kind in ALL_KINDS:
            p = init_adapter(kind, self.w0, self.b0, 3, self.rng)
            p = p.with_trainables(
                {name: value + self.rng.normal(size=np.shape(value)) for name, value in p.trainables().items()}
            )
            w, b = p.merge_to_dense(self.w0, self.b0)
            assert_allclose(self.h @ w.T + b, p.forward(self.w0, self.b0, self.h), atol=1e-10)

    def test_restore_adapter(self):
        p = init_adapter(AdapterKind.MODE, self.w0, self.b0, 3)
        p = p.with_trainables({"phi": self.rng.normal(size=(3, 3))})
        values = {name: np.asarray(v).reshape(-1, 1) for name, v in p.trainables().items()}
        restored = restore_adapter(AdapterKind.MODE, self.w0, self.b0, 3, values)
        assert_allclose(restored.forward(self.w0, self.b0, self.h), p.forward(self.w0, self.b0, self.h), atol=1e-12)
        with self.assertRaises(KeyError):
            restore_adapter(AdapterKind.MODE, self.w0, self.b0, 3, {"phi": p.phi})


class TestParameterAccounting(unittest.TestCase):
    def test_closed_forms(self):
        rng = np.random.default_rng(0)
        for width in (16, 50, 64):
            w0 = rng.normal(size=(width, width))
            b0 = np.zeros(width)
            for rank in (1, 2, 4, 8):
                for kind in ALL_KINDS:
                    p = init_adapter(kind, w0, b0, rank, rng)
                    self.assertEqual(param_count(p), expected_param_count(kind, rank, width, width))
                self.assertLess(
                    expected_param_count(AdapterKind.MODE, rank, width, width),
                    expected_param_count(AdapterKind.LORA, rank, width, width),
                )

    def test_reference_counts(self):
        self.assertEqual(expected_param_count(AdapterKind.MODE, 4, 50, 50), 67)
        self.assertEqual(expected_param_count(AdapterKind.SVD_DIAG, 4, 50, 50), 4)
        self.assertEqual(expected_param_count(AdapterKind.LORA, 4, 50, 50), 400)
        self.assertEqual(expected_param_count(AdapterKind.NONE, 4, 50, 50), 0)


if __name__ == "__main__":
    unittest.main()

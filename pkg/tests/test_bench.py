import io
import math
import unittest

import numpy as np

from modepinn.bench import (
    LONG_HEADER,
    DiagnosticConfig,
    DiagnosticReport,
    ParetoRow,
    deadlock_diagnostics,
    efficiency,
    error_report,
    evaluate_model,
    explained_variance,
    make_row,
    pareto_report,
    pareto_row_for_model,
    rel_l2,
    sweep_errors,
    write_long_csv,
    write_pareto_csv,
)
from modepinn.constants import AdapterKind, DiagnosticKind
from modepinn.errors import DimensionError, MetricError
from modepinn.model import ArchitectureConfig, attach_adapters, build_p2inn, predict
from modepinn.pde import BatchCounts, CdrParams, ProblemSpec, sample_batch
from modepinn.refsolve import GridField, strang_cdr
from modepinn.train import TrainConfig, pinn_loss

SMALL = ArchitectureConfig(coord_widths=(8,), param_widths=(8,), decoder_widths=(10, 10))
SMALL_COUNTS = BatchCounts(n_f=20, n_u=10, n_b=10)

# (method, params, train loss, test loss, rel-L2, reported efficiency)
REFERENCE_ROWS = (
    ("SVD", 600, 19.41, 19.51, 0.19, 0.09),
    ("IA3", 600, 14.92, 17.04, 0.17, 0.11),
    ("LoRA", 2300, 19.82, 19.81, 0.19, 0.02),
    ("MODE", 500, 2.34, 2.50, 0.025, 1.20),
)


class TestMetrics(unittest.TestCase):
    def test_error_metrics(self):
        report = error_report([1.0, 2.0, 3.0], [1.0, 2.0, 4.0])
        self.assertAlmostEqual(report.rel_l2, 1.0 / math.sqrt(21.0))
        self.assertAlmostEqual(report.abs_l2, 1.0)
        self.assertAlmostEqual(report.max_err, 1.0)
        self.assertAlmostEqual(report.rel_linf, 0.25)
        self.assertAlmostEqual(report.rel_l2_pct, 100.0 * report.rel_l2)
        self.assertEqual(report.n_points, 3)

    def test_undefined_metrics(self):
        with self.assertRaises(MetricError):
            rel_l2([1.0, 1.0], [0.0, 0.0])
        with self.assertRaises(MetricError):
            explained_variance([1.0, 2.0], [3.0, 3.0])
        with self.assertRaises(DimensionError):
            rel_l2([1.0], [1.0, 2.0])

    def test_efficiency(self):
        self.assertAlmostEqual(efficiency(0.5, 2000), 1.0)
        self.assertAlmostEqual(efficiency(2.34, 500), 1.0 / 1.17)
        for loss, params in ((0.0, 10), (1.0, 0), (float("nan"), 10)):
            with self.assertRaises(MetricError):
                efficiency(loss, params)


class TestPareto(unittest.TestCase):
    def setUp(self):
        self.rows = [make_row(*row) for row in REFERENCE_ROWS]
        self.entries = pareto_report(self.rows)

    def test_ranked_by_efficiency(self):
        self.assertEqual([e.row.method for e in self.entries], ["MODE", "IA3", "SVD", "LoRA"])
        self.assertEqual([e.rank for e in self.entries], [1, 2, 3, 4])

    def test_reported_efficiency_mismatches(self):
        flagged = [e.row.method for e in self.entries if e.row.efficiency_mismatch]
        self.assertEqual(flagged, ["MODE", "LoRA"])

    def test_dominance(self):
        by_method = {e.row.method: e for e in self.entries}
        self.assertFalse(by_method["MODE"].dominated)
        self.assertEqual(by_method["IA3"].dominated_by, ("MODE",))
        self.assertEqual(by_method["SVD"].dominated_by, ("MODE", "IA3"))
        self.assertEqual(by_method["LoRA"].dominated_by, ("MODE", "IA3", "SVD"))

    def test_csv(self):
        stream = io.StringIO()
        write_pareto_csv(self.entries, stream)
        lines = stream.getvalue().splitlines()
        self.assertTrue(lines[0].startswith("rank,method,params,params_k"))
        self.assertTrue(lines[1].startswith("1,MODE,500,0.5,"))
        self.assertTrue(lines[1].endswith(",1.2,1,0,"))
        self.assertTrue(lines[4].endswith(",1,1,MODE|IA3|SVD"))

    def test_frozen_row_has_no_efficiency(self):
        frozen = make_row("frozen", 0, 17.4, 17.9, 0.9)
        self.assertIsNone(frozen.efficiency)
        self.assertFalse(frozen.efficiency_mismatch)
        entries = pareto_report(self.rows + [frozen])
        self.assertEqual(entries[-1].row.method, "frozen")
        self.assertEqual(entries[-1].rank, 5)
        self.assertFalse(entries[-1].dominated)
        by_method = {e.row.method: e for e in entries}
        self.assertEqual(by_method["MODE"].dominated_by, ())
        stream = io.StringIO()
        write_pareto_csv(entries, stream)
        self.assertTrue(stream.getvalue().splitlines()[5].startswith("5,frozen,0,0.0,"))

    def test_frozen_model_row(self):
        mu = CdrParams(beta=2.0)
        frozen = attach_adapters(build_p2inn(SMALL, 0), AdapterKind.NONE, 0)
        row = pareto_row_for_model("none", frozen, mu, ProblemSpec.cdr(), SMALL_COUNTS, seed=3, nx=16, nt=3)
        self.assertEqual(row.params, 0)
        self.assertIsNone(row.efficiency)

    def test_inconsistent_rows(self):
        with self.assertRaises(ValueError):
            pareto_report([])
        bad = ParetoRow("x", 100, 1.0, 1.0, 0.1, efficiency=3.0)
        with self.assertRaises(MetricError):
            pareto_report([bad])


class TestModelEvaluation(unittest.TestCase):
    def setUp(self):
        self.model = build_p2inn(SMALL, 0)
        self.spec = ProblemSpec.cdr()

    def test_evaluation_against_own_prediction(self):
        mu = CdrParams(beta=1.0)
        grid = strang_cdr(mu, self.spec, nx=16, nt=3)
        own = predict(self.model, grid.points(), mu.as_vector()).reshape(grid.values.shape)
        truth = GridField(x=grid.x, t=grid.t, values=own, x_bounds=grid.x_bounds, t_bounds=grid.t_bounds)
        report = evaluate_model(self.model, mu, self.spec, truth=truth)
        self.assertEqual(report.rel_l2, 0.0)
        self.assertEqual(report.explained_variance, 1.0)
        self.assertEqual(report.n_points, 48)

    def test_sweep(self):
        params = [CdrParams(rho=1.0), CdrParams(rho=2.0)]
        sweep = sweep_errors(self.model, params, self.spec, nx=16, nt=3)
        self.assertEqual(sweep.labels, ("beta=0,nu=0,rho=1", "beta=0,nu=0,rho=2"))
        self.assertAlmostEqual(sweep.mean_rel_l2, (sweep.reports[0].rel_l2 + sweep.reports[1].rel_l2) / 2)

    def test_pareto_row_for_adapted_model(self):
        mu = CdrParams(beta=2.0)
        adapted = attach_adapters(self.model, AdapterKind.MODE, 2)
        row = pareto_row_for_model("mode", adapted, mu, self.spec, SMALL_COUNTS, seed=3, nx=16, nt=3)
        self.assertEqual(row.params, 15)
        batch = sample_batch(self.spec, SMALL_COUNTS, np.random.default_rng(3))
        self.assertAlmostEqual(row.train_loss, pinn_loss(adapted, batch, mu)[0].total, places=12)
        self.assertNotEqual(row.train_loss, row.test_loss)


class TestDiagnostics(unittest.TestCase):
    def test_report_aggregates(self):
        report = DiagnosticReport()
        report.add("mode", "beta=15", 0, {"rel_l2": 1.0})
        report.add("mode", "beta=15", 1, {"rel_l2": 3.0})
        aggregated = report.with_aggregates().with_aggregates()
        seeds = {r.seed: r.value for r in aggregated.rows}
        self.assertEqual(seeds["mean"], 2.0)
        self.assertEqual(seeds["std"], 1.0)
        self.assertEqual(len(aggregated.rows), 4)
        self.assertEqual(aggregated.values("mode", "beta=15", "rel_l2"), [1.0, 3.0])
        stream = io.StringIO()
        write_long_csv(aggregated.rows, stream)
        self.assertEqual(stream.getvalue().splitlines()[0], ",".join(LONG_HEADER))

    def test_tiny_diagnostic_run(self):
        cfg = DiagnosticConfig(
            seeds=(0,),
            rank=2,
            train=TrainConfig(iterations=2, counts=SMALL_COUNTS, log_every=1),
            nx=16,
            nt=3,
        )
        reports = deadlock_diagnostics(build_p2inn(SMALL, 0), cfg)
        self.assertEqual(set(reports), set(DiagnosticKind))

        affine = reports[DiagnosticKind.AFFINE]
        settings = {r.setting for r in affine.rows}
        self.assertEqual(settings, {"phase=0", "phase=90", "phase=180"})
        self.assertEqual(affine.values("mode", "phase=90", "trainable"), [15.0])
        self.assertEqual(affine.values("mode_bias_frozen", "phase=90", "trainable"), [5.0])
        self.assertEqual(affine.values("frozen", "phase=0", "trainable"), [0.0])

        trap = reports[DiagnosticKind.TRUNCATION]
        self.assertEqual(trap.values("mode_tau_zero", "rho=15", "final_tau"), [0.0])
        self.assertNotEqual(trap.values("mode_tau_trainable", "rho=15", "final_tau"), [0.0])

        subspace = reports[DiagnosticKind.SUBSPACE]
        self.assertEqual({r.setting for r in subspace.rows}, {"beta=15", "beta=20"})
        self.assertEqual(subspace.values("svd_diag", "beta=20", "trainable"), [2.0])

    def test_helmholtz_models_are_rejected(self):
        helmholtz_model = build_p2inn(ArchitectureConfig(param_in=1, decoder_widths=(10, 10)), 0)
        with self.assertRaises(DimensionError):
            deadlock_diagnostics(helmholtz_model, DiagnosticConfig(seeds=(0,)))


if __name__ == "__main__":
    unittest.main()

"""Split, experiment-grid, sweep, and gradient-check harness tests."""

import csv

import numpy as np
import pytest

import relgad.autodiff as ad
from relgad.experiment import (
    gradcheck,
    gradcheck_graph,
    relative_error,
    run_experiment,
    run_sweep,
    stratified_split,
)
from relgad.model import ModelConfig
from relgad.sparse import GraphError
from relgad.synth import SynthConfig, generate


def tiny_graph():
    return generate(SynthConfig(n_users=120, feature_dim=6, seed=0))


def tiny_config(**kw):
    base = dict(
        variant="full", gcn_layers=1, gat_heads=2, embed_dim=8,
        epochs=2, batch_size=32, seed=0,
    )
    base.update(kw)
    return ModelConfig(**base)


class TestStratifiedSplit:
    def test_proportions_and_partition(self):
        labels = np.array([0] * 80 + [1] * 20)
        train, test = stratified_split(labels, 25, np.random.SeedSequence(0))
        assert np.intersect1d(train, test).size == 0
        assert train.size + test.size == 100
        assert np.sum(labels[train] == 1) == 5
        assert np.sum(labels[train] == 0) == 20

    def test_at_least_one_per_class(self):
        labels = np.array([0] * 50 + [1] * 2)
        train, _ = stratified_split(labels, 10, np.random.SeedSequence(1))
        assert np.sum(labels[train] == 1) >= 1

    def test_deterministic(self):
        labels = np.array([0, 1] * 30)
        a, _ = stratified_split(labels, 40, np.random.SeedSequence(2))
        b, _ = stratified_split(labels, 40, np.random.SeedSequence(2))
        np.testing.assert_array_equal(a, b)

    def test_rejects_bad_pct(self):
        with pytest.raises(GraphError):
            stratified_split(np.array([0, 1]), 0, np.random.SeedSequence(0))


class TestRunExperiment:
    def test_grid_rows_and_files(self, tmp_path):
        g = tiny_graph()
        out = tmp_path / "results.csv"
        rows = run_experiment(
            g, tiny_config(), variants=["full", "pr"], train_pcts=[20],
            seeds=[0, 1], out_path=out,
        )
        assert len(rows) == 4
        with open(out) as fh:
            read = list(csv.DictReader(fh))
        assert len(read) == 4
        assert set(read[0]) == {
            "variant", "train_pct", "seed", "accuracy", "recall", "loss", "wall_time_s"
        }
        assert (tmp_path / "results_summary.csv").exists()
        with open(tmp_path / "results_best.csv") as fh:
            best = list(csv.DictReader(fh))
        assert len(best) == 4
        # the tracked best is never worse than the final-epoch metric
        for final_row, best_row in zip(read, best):
            assert float(best_row["accuracy"]) >= float(final_row["accuracy"])

    def test_single_cell_single_row(self, tmp_path):
        g = tiny_graph()
        rows = run_experiment(
            g, tiny_config(), variants=["pa"], train_pcts=[30], seeds=[4],
            out_path=tmp_path / "one.csv",
        )
        assert len(rows) == 1 and rows[0]["variant"] == "pa"

    def test_no_timing_zeroes_wall_time(self, tmp_path):
        g = tiny_graph()
        rows = run_experiment(
            g, tiny_config(), variants=["pr"], train_pcts=[20], seeds=[0],
            out_path=tmp_path / "t.csv", timing=False,
        )
        assert rows[0]["wall_time_s"] == 0.0

    def test_bitwise_reproducible_without_timing(self, tmp_path):
        g = tiny_graph()
        out_a, out_b = tmp_path / "a.csv", tmp_path / "b.csv"
        for out in (out_a, out_b):
            run_experiment(
                g, tiny_config(), variants=["pr"], train_pcts=[20], seeds=[0, 1],
                out_path=out, timing=False,
            )
        assert out_a.read_bytes() == out_b.read_bytes()


class TestRunSweep:
    def test_grid_completes_and_writes(self, tmp_path):
        g = tiny_graph()
        out = tmp_path / "sweep.csv"
        rows = run_sweep(
            g, tiny_config(), gcn_layer_counts=[1, 2], embed_dims=[8, 16],
            train_pct=20, out_path=out,
        )
        assert len(rows) == 4
        assert out.exists()
        with open(out) as fh:
            read = list(csv.DictReader(fh))
        assert {(r["gcn_layers"], r["embed_dim"]) for r in read} == {
            ("1", "8"), ("1", "16"), ("2", "8"), ("2", "16")
        }

    def test_head_count_falls_back_when_indivisible(self, tmp_path):
        g = tiny_graph()
        rows = run_sweep(
            g, tiny_config(gat_heads=2), gcn_layer_counts=[1], embed_dims=[9],
            train_pct=20,
        )
        assert len(rows) == 1  # embed_dim 9 ran with a single head


class TestGradcheck:
    def test_default_configuration_passes(self):
        report = gradcheck()
        assert report.passed, f"worst {report.worst_rel_err:.2e} at {report.worst_param}"
        assert report.worst_rel_err < 1e-4
        assert report.n_params > 0

    def test_corrupted_backward_rule_fails(self, monkeypatch):
        """Negative control: a wrong gradient rule must be caught."""
        def bad_sigmoid_grad(out_vals, g):
            return g * out_vals  # missing the (1 - out) factor
        monkeypatch.setattr(ad, "_sigmoid_grad", bad_sigmoid_grad)
        report = gradcheck()
        assert not report.passed

    def test_relative_error_scales(self):
        assert relative_error(1.0, 1.0) == 0.0
        assert relative_error(2.0, 1.0) == 0.5
        assert relative_error(0.0, 1e-6) == pytest.approx(1e-6)

    def test_empty_parameter_set_diagnosed(self, monkeypatch):
        import relgad.experiment as exp

        class NoParams:
            def named(self):
                return {}

        monkeypatch.setattr(exp, "init_params", lambda *a, **k: NoParams())
        report = gradcheck()
        assert not report.passed
        assert "no trainable parameters" in report.message

    def test_report_lines_mention_verdict(self):
        report = gradcheck()
        lines = report.format_lines()
        assert any("PASS" in line for line in lines)

"""Pipeline assembly, mini-batch sampling, and training behavior."""

import numpy as np
import pytest

import relgad.autodiff as ad
from relgad import layers
from relgad.autodiff import Tensor
from relgad.experiment import gradcheck_graph
from relgad.graphs import UNLABELED, MultiRelationGraph
from relgad.model import (
    GraphView,
    ModelConfig,
    forward,
    forward_full,
    forward_pa,
    forward_pr,
    init_params,
    sample_batch,
    train,
    _fused_embedding,
)
from relgad.sparse import GraphError, SparseAdjacency, normalize, sp_dense_matmul


def small_config(**kw):
    base = dict(variant="full", gcn_layers=2, gat_heads=2, embed_dim=8, seed=7)
    base.update(kw)
    return ModelConfig(**base)


def path_graph(n, labels=None, d=3):
    rng = np.random.default_rng(0)
    adj = SparseAdjacency.from_edges(n, np.arange(n - 1), np.arange(1, n))
    if labels is None:
        labels = np.arange(n) % 2
    return MultiRelationGraph(
        n=n,
        relation_names=["rel0"],
        relations=[adj],
        features=rng.standard_normal((n, d)),
        labels=np.asarray(labels),
    )


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(GraphError):
            ModelConfig(embed_dim=10, gat_heads=4)

    def test_unknown_variant(self):
        with pytest.raises(GraphError):
            ModelConfig(variant="bogus")

    def test_default_hops_cover_all_stages(self):
        assert ModelConfig(gcn_layers=2).resolved_hops == 4
        assert ModelConfig(gcn_layers=3).resolved_hops == 5
        assert ModelConfig(gcn_layers=2, hop_count=2).resolved_hops == 2


class TestForward:
    def test_zero_weights_give_half(self):
        g = gradcheck_graph()
        config = small_config()
        params = init_params(config, g.feature_dim, g.n_relations)
        for t in params.named().values():
            t.values = np.zeros_like(t.values)
        _, probs = forward_full(g, params)
        np.testing.assert_array_equal(probs.values, np.full((g.n, 1), 0.5))

    def test_single_isolated_node(self):
        g = MultiRelationGraph(
            n=1,
            relation_names=["rel0"],
            relations=[SparseAdjacency.zeros(1)],
            features=np.array([[1.0, -2.0]]),
            labels=np.array([1]),
        )
        params = init_params(small_config(), 2, 1)
        z, probs = forward(g, params)
        assert z.values.shape == (1, 8) and 0.0 < probs.values[0, 0] < 1.0

    def test_deterministic_across_runs(self):
        g = gradcheck_graph()
        config = small_config()

        def run():
            params = init_params(config, g.feature_dim, g.n_relations)
            _, probs = forward(g, params)
            return probs.values

        assert np.array_equal(run(), run())

    def test_variant_guard(self):
        g = gradcheck_graph()
        params = init_params(small_config(), g.feature_dim, g.n_relations)
        with pytest.raises(GraphError):
            forward_pr(g, params)
        with pytest.raises(GraphError):
            forward_pa(g, params)


class TestVariants:
    def test_pa_equals_full_pre_aggregation(self):
        g = gradcheck_graph()
        config = small_config()
        params = init_params(config, g.feature_dim, g.n_relations)
        view = GraphView.from_graph(g)
        z = _fused_embedding(view, params)
        h_full = layers.gat_forward(view.attn, z, params.gat)
        params.variant = "pa"
        z_pa, _ = forward_pa(g, params)
        assert np.array_equal(z_pa.values, h_full.values)

    def test_pr_single_relation_reduces_to_propagated_features(self):
        g = path_graph(6)
        config = small_config(variant="pr")
        params = init_params(config, g.feature_dim, g.n_relations)
        view = GraphView.from_graph(g)
        z = _fused_embedding(view, params)
        propagated = sp_dense_matmul(normalize(g.relations[0]), g.features)
        expected = ad.row_l2_normalize(Tensor(propagated), layers.FUSE_EPS).values
        np.testing.assert_allclose(z.values, expected, atol=1e-15)

    def test_pr_has_no_convolution_weights(self):
        params = init_params(small_config(variant="pr"), 5, 3)
        assert all(not k.startswith("gcn.") for k in params.named())

    def test_pr_is_attention_onward_stack_on_summed_input(self):
        """Swapping fusion for the direct sum leaves the rest of the pipeline
        identical to the full model's attention-onward computation."""
        g = gradcheck_graph()
        params = init_params(small_config(variant="pr"), g.feature_dim, g.n_relations)
        view = GraphView.from_graph(g)
        z = _fused_embedding(view, params)
        h = layers.gat_forward(view.attn, z, params.gat)
        expected_z = layers.enhanced_aggregate(view.mean_op, h)
        expected_p = layers.discriminate(expected_z, params.clf)
        z_pr, p_pr = forward_pr(g, params)
        assert np.array_equal(z_pr.values, expected_z.values)
        assert np.array_equal(p_pr.values, expected_p.values)


class TestSampleBatch:
    def test_star_center_one_hop(self):
        n = 5
        adj = SparseAdjacency.from_edges(n, [0, 0, 0, 0], [1, 2, 3, 4])
        g = MultiRelationGraph(
            n=n,
            relation_names=["rel0"],
            relations=[adj],
            features=np.zeros((n, 2)),
            labels=np.array([1, 0, 0, 0, 0]),
        )
        batch = sample_batch(g, [0], hops=1)
        np.testing.assert_array_equal(batch.included, np.arange(n))

    def test_isolated_seed(self):
        g = path_graph(4)
        g.relations[0] = SparseAdjacency.zeros(4)
        g._view_cache.clear()
        batch = sample_batch(g, [2], hops=3)
        np.testing.assert_array_equal(batch.included, [2])

    def test_path_two_hops(self):
        g = path_graph(4)
        batch = sample_batch(g, [0], hops=2)
        np.testing.assert_array_equal(batch.included, [0, 1, 2])
        np.testing.assert_array_equal(batch.seed_local, [0])

    def test_rejects_empty_and_unlabeled(self):
        g = path_graph(4, labels=[1, UNLABELED, 0, 1])
        with pytest.raises(GraphError):
            sample_batch(g, [], hops=1)
        with pytest.raises(GraphError):
            sample_batch(g, [1], hops=1)


class TestBatchConsistency:
    def test_batched_forward_matches_full_graph(self):
        # two long chains of different stride keep the graph diameter large,
        # so the hop ball is a strict subset of the graph
        n = 60
        rng = np.random.default_rng(3)
        rel_a = SparseAdjacency.from_edges(n, np.arange(n - 1), np.arange(1, n))
        rel_b = SparseAdjacency.from_edges(n, np.arange(n - 2), np.arange(2, n))
        g = MultiRelationGraph(
            n=n,
            relation_names=["a", "b"],
            relations=[rel_a, rel_b],
            features=rng.standard_normal((n, 5)),
            labels=np.arange(n) % 2,
        )
        config = small_config()
        params = init_params(config, g.feature_dim, g.n_relations)
        _, probs_full = forward(g, params)
        seeds = np.array([25, 31])
        batch = sample_batch(g, seeds, hops=config.resolved_hops)
        assert batch.n < g.n  # otherwise this exercises nothing
        _, probs_batch = forward(batch, params)
        np.testing.assert_allclose(
            probs_batch.values[batch.seed_local],
            probs_full.values[seeds],
            atol=1e-10,
        )

    def test_added_unreachable_node_does_not_change_seed_loss(self):
        g = gradcheck_graph(n=15, n_relations=2, feature_dim=4, seed=5)

        def seed_loss(graph):
            params = init_params(small_config(), graph.feature_dim, 2)
            batch = sample_batch(graph, np.array([0, 1]), hops=4)
            _, probs = forward(batch, params)
            p = ad.gather_rows(probs, batch.seed_local)
            return layers.loss(p, batch.seed_labels, [], 0.0).values[0, 0]

        extended = MultiRelationGraph(
            n=g.n + 1,
            relation_names=list(g.relation_names),
            relations=[
                SparseAdjacency(
                    g.n + 1,
                    np.concatenate([rel.indptr, [rel.nnz]]),
                    rel.cols,
                    rel.vals,
                )
                for rel in g.relations
            ],
            features=np.vstack([g.features, np.ones((1, g.feature_dim))]),
            labels=np.concatenate([g.labels, [UNLABELED]]),
        )
        assert seed_loss(g) == seed_loss(extended)


class TestPermutationEquivariance:
    def test_outputs_permute_with_nodes(self):
        rng = np.random.default_rng(17)
        g = gradcheck_graph(n=10, n_relations=2, feature_dim=4, seed=11)
        perm = rng.permutation(g.n)
        relations_p = []
        for rel in g.relations:
            dense = rel.to_dense()[np.ix_(perm, perm)]
            rows, cols = np.nonzero(dense)
            relations_p.append(
                SparseAdjacency.from_coo(g.n, rows, cols, dense[rows, cols])
            )
        g_p = MultiRelationGraph(
            n=g.n,
            relation_names=list(g.relation_names),
            relations=relations_p,
            features=g.features[perm],
            labels=g.labels[perm],
        )
        params = init_params(small_config(), g.feature_dim, g.n_relations)
        z, probs = forward(g, params)
        z_p, probs_p = forward(g_p, params)
        np.testing.assert_allclose(z_p.values, z.values[perm], atol=1e-10)
        np.testing.assert_allclose(probs_p.values, probs.values[perm], atol=1e-10)


class TestTrain:
    def test_lr_zero_keeps_initial_parameters(self):
        g = gradcheck_graph()
        config = small_config(lr=0.0, epochs=3, batch_size=4)
        result = train(g, config)
        root = np.random.SeedSequence(config.seed)
        reference = init_params(config, g.feature_dim, g.n_relations, root.spawn(2)[0])
        for name, t in result.params.named().items():
            np.testing.assert_array_equal(t.values, reference.named()[name].values)

    def test_loss_decreases(self):
        g = gradcheck_graph()
        config = small_config(epochs=60, batch_size=12, lr=0.01)
        result = train(g, config)
        assert len(result.losses) >= 50
        assert result.losses[49] < result.losses[0]

    def test_identical_runs_identical_trajectories(self):
        g = gradcheck_graph()
        config = small_config(epochs=5, batch_size=6)
        a = train(g, config)
        b = train(g, config)
        assert a.losses == b.losses
        for name, t in a.params.named().items():
            assert np.array_equal(t.values, b.params.named()[name].values)

    def test_rejects_single_class_split(self):
        g = path_graph(4, labels=[1, 1, 1, 1])
        with pytest.raises(GraphError):
            train(g, small_config(epochs=1))

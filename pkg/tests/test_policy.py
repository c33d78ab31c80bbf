import numpy as np
import pytest

import pocketgfn.autodiff as ad
from pocketgfn.autodiff import Tape, tensor
from pocketgfn.ligand import (
    AddFragment,
    STOP,
    apply_action,
    desk_library,
    initial_state,
    legal_actions,
    toy_library,
)
from pocketgfn.nn import ParamStore
from pocketgfn.pocket import build_knn_graph, synthetic_pocket
from pocketgfn.policy import (
    ActionDistribution,
    PolicyConfig,
    PolicyNetwork,
    action_lattice,
    featurize,
    log_prob_at,
    sample_action,
)

TOY = toy_library()
DESK = desk_library()


def small_config(mode="baseline"):
    return PolicyConfig(
        mode=mode,
        width=16,
        n_layers=2,
        n_heads=2,
        frag_emb_dim=4,
        pocket_width=8,
        pocket_layers=1,
        trio_layers=1,
        trio_heads=2,
        trio_head_dim=4,
        trio_c_pair=8,
    )


def make_policy(mode="baseline", seed=0):
    store = ParamStore(np.random.default_rng(seed))
    return PolicyNetwork(store, DESK, small_config(mode))


def pocket_ctx(policy, n=6, spread=2.0, seed=3):
    graph = build_knn_graph(synthetic_pocket(n, spread, seed), K=4)
    return policy.pocket_context(graph)


def grow(actions, library, max_nodes=8):
    s = initial_state()
    for a in actions:
        s = apply_action(s, a, library, max_nodes)
    return s


def all_reachable_graphs(library, max_nodes):
    """Every reachable non-empty graph (nodes, edges), ignoring the stop flag."""
    frontier = [initial_state()]
    seen = set()
    graphs = []
    while frontier:
        s = frontier.pop()
        for a in legal_actions(s, library, max_nodes):
            child = apply_action(s, a, library, max_nodes)
            key = (child.nodes, child.edges)
            if child.terminal or key in seen:
                continue
            seen.add(key)
            graphs.append(child)
            frontier.append(child)
    return graphs


class TestFeaturize:
    def test_node_onehot(self):
        s = grow([AddFragment(None, None, 2, 0), AddFragment(0, 1, 1, 0)], DESK)
        nodes, edges = featurize(s, DESK)
        assert nodes.shape == (2, len(DESK))
        assert nodes[0].tolist() == [0, 0, 1, 0]
        assert nodes[1].tolist() == [0, 1, 0, 0]

    def test_edge_features_carry_both_aps(self):
        a_max = DESK.max_aps
        s = grow([AddFragment(None, None, 0, 2), AddFragment(0, 1, 2, 0)], DESK)
        nodes, edges = featurize(s, DESK)
        assert edges.shape == (2, 2, 2 * a_max)
        # edge (0, ap 1) -- (1, ap 0)
        assert edges[0, 1, 1] == 1.0 and edges[0, 1, a_max + 0] == 1.0
        assert edges[1, 0, 0] == 1.0 and edges[1, 0, a_max + 1] == 1.0
        assert edges[0, 0].sum() == 0.0

    def test_empty_state_rejected(self):
        with pytest.raises(ValueError, match="start token"):
            featurize(initial_state(), DESK)

    @pytest.mark.parametrize("library,max_nodes", [(TOY, 3), (DESK, 2)])
    def test_injective_on_reachable_graphs(self, library, max_nodes):
        seen = {}
        for s in all_reachable_graphs(library, max_nodes):
            nodes, edges = featurize(s, library)
            sig = (nodes.shape, nodes.tobytes(), edges.tobytes())
            assert sig not in seen, f"collision: {s} vs {seen[sig]}"
            seen[sig] = s
        assert len(seen) > 3


class TestActionLattice:
    def test_root_lattice(self):
        lattice, mask = action_lattice(initial_state(), DESK, 8)
        assert lattice[0] is STOP and not mask[0]
        assert len(lattice) == 1 + len(DESK) * DESK.max_aps
        legal = [a for a, m in zip(lattice, mask) if m]
        assert legal == legal_actions(initial_state(), DESK, 8)

    @pytest.mark.parametrize("library,max_nodes", [(TOY, 3), (DESK, 2)])
    def test_legal_subsequence_matches_everywhere(self, library, max_nodes):
        for s in all_reachable_graphs(library, max_nodes):
            lattice, mask = action_lattice(s, library, max_nodes)
            legal = [a for a, m in zip(lattice, mask) if m]
            assert legal == legal_actions(s, library, max_nodes)

    def test_nonempty_lattice_shape(self):
        s = grow([AddFragment(None, None, 0, 0)], DESK)
        lattice, mask = action_lattice(s, DESK, 8)
        a = DESK.max_aps
        assert len(lattice) == 1 + s.n * a * len(DESK) * a
        assert lattice[0] is STOP and mask[0]


class TestActionDistribution:
    def test_probs_sum_to_one_and_masked_zero(self):
        policy = make_policy()
        ctx = pocket_ctx(policy)
        s = grow([AddFragment(None, None, 0, 0)], DESK)
        dist = policy.action_distribution(s, ctx, max_nodes=8)
        assert np.isclose(dist.probs.sum(), 1.0, atol=1e-12)
        assert np.all(dist.probs[~dist.mask] == 0.0)
        assert np.all(dist.probs[dist.mask] > 0.0)

    def test_nonzero_support_equals_legal_actions(self):
        policy = make_policy()
        ctx = pocket_ctx(policy)
        for s in all_reachable_graphs(DESK, 2):
            dist = policy.action_distribution(s, ctx, max_nodes=2)
            support = [a for a, p in zip(dist.actions, dist.probs) if p > 0]
            assert support == legal_actions(s, DESK, 2)

    def test_single_legal_action_gets_prob_one(self):
        # alpha-alpha uses both attachment points, so only Stop is legal
        policy = PolicyNetwork(make_policy().store, TOY, small_config())
        ctx = pocket_ctx(policy)
        s = grow([AddFragment(None, None, 0, 0), AddFragment(0, 0, 0, 0)], TOY)
        dist = policy.action_distribution(s, ctx, max_nodes=2)
        assert dist.mask.sum() == 1
        assert np.isclose(dist.probs[0], 1.0)

    def test_terminal_state_raises(self):
        policy = make_policy()
        ctx = pocket_ctx(policy)
        s = grow([AddFragment(None, None, 0, 0)], DESK)
        s_stop = apply_action(s, STOP, DESK, 8)
        with pytest.raises(ValueError, match="legal"):
            policy.action_distribution(s_stop, ctx, max_nodes=8)

    def test_empty_state_distribution(self):
        for mode in ("baseline", "trioformer"):
            policy = make_policy(mode)
            ctx = pocket_ctx(policy)
            dist = policy.action_distribution(initial_state(), ctx, max_nodes=8)
            assert dist.probs[0] == 0.0  # Stop illegal on the empty state
            assert np.isclose(dist.probs.sum(), 1.0)

    def test_deterministic_given_store(self):
        p1 = make_policy(seed=5)
        p2 = make_policy(seed=5)
        s = grow([AddFragment(None, None, 1, 0)], DESK)
        d1 = p1.action_distribution(s, pocket_ctx(p1), max_nodes=8)
        d2 = p2.action_distribution(s, pocket_ctx(p2), max_nodes=8)
        np.testing.assert_array_equal(d1.probs, d2.probs)

    def test_gradients_flow_to_parameters(self):
        policy = make_policy()
        s = grow([AddFragment(None, None, 0, 0)], DESK)
        with Tape():
            ctx = pocket_ctx(policy)
            dist = policy.action_distribution(s, ctx, max_nodes=8)
            picked = log_prob_at(dist, int(np.flatnonzero(dist.mask)[0]))
            ad.backward(picked)
        emb_grad = policy.store.param("embed.w", (len(DESK), 16)).grad
        assert emb_grad is not None and np.any(emb_grad != 0.0)

    def test_masked_actions_isolated_from_gradient(self):
        # nudging network output toward a masked action must leave legal probs' grads unaffected by the mask row
        policy = make_policy()
        s = grow([AddFragment(None, None, 0, 0)], DESK)
        with Tape():
            ctx = pocket_ctx(policy)
            dist = policy.action_distribution(s, ctx, max_nodes=8)
            assert np.all(np.isfinite(dist.log_probs.data[0][dist.mask]))
            total_legal = ad.sum_all(
                ad.gather_rows(
                    ad.reshape(dist.log_probs, (len(dist.actions), 1)),
                    np.flatnonzero(dist.mask),
                )
            )
            ad.backward(total_legal)
        for name, p in policy.store.items():
            if p.grad is not None:
                assert np.all(np.isfinite(p.grad)), name


class TestGraphEmbedding:
    def test_baseline_width_doubles(self):
        policy = make_policy("baseline")
        ctx = pocket_ctx(policy)
        s = grow([AddFragment(None, None, 0, 0), AddFragment(0, 0, 1, 0)], DESK)
        node_h, graph_emb = policy._ligand_track(s, ctx)
        assert node_h.shape == (2, 16)
        assert graph_emb.shape == (1, 32)

    def test_trioformer_width_stays(self):
        policy = make_policy("trioformer")
        ctx = pocket_ctx(policy)
        s = grow([AddFragment(None, None, 0, 0), AddFragment(0, 0, 1, 0)], DESK)
        node_h, graph_emb = policy._ligand_track(s, ctx)
        assert node_h.shape == (2, 16)
        assert graph_emb.shape == (1, 16)
        np.testing.assert_allclose(graph_emb.data, node_h.data.mean(axis=0, keepdims=True), atol=1e-12)


class TestConditioning:
    @pytest.mark.parametrize("mode", ["baseline", "trioformer"])
    def test_distribution_depends_on_pocket(self, mode):
        policy = make_policy(mode)
        ctx_a = pocket_ctx(policy, n=6, spread=2.0, seed=3)
        ctx_b = pocket_ctx(policy, n=9, spread=6.0, seed=11)
        s = grow([AddFragment(None, None, 0, 0)], DESK)
        da = policy.action_distribution(s, ctx_a, max_nodes=8)
        db = policy.action_distribution(s, ctx_b, max_nodes=8)
        tv = 0.5 * np.abs(da.probs - db.probs).sum()
        assert tv > 0.0

    def test_log_z_is_scalar_and_pocket_dependent(self):
        policy = make_policy()
        za = policy.log_z(pocket_ctx(policy, n=6, spread=2.0, seed=3))
        zb = policy.log_z(pocket_ctx(policy, n=9, spread=6.0, seed=11))
        assert za.shape == (1, 1) and np.isfinite(za.data).all()
        assert not np.isclose(za.data[0, 0], zb.data[0, 0])


class TestSampleAction:
    def test_inverse_cdf_frequencies(self):
        probs = np.array([0.25, 0.75])
        dist = ActionDistribution(
            actions=[STOP, AddFragment(None, None, 0, 0)],
            mask=np.array([True, True]),
            log_probs=tensor(np.log(probs)[None, :]),
            probs=probs,
        )
        rng = np.random.default_rng(0)
        n = 100_000
        hits = sum(sample_action(dist, rng)[1] == 0 for _ in range(n))
        assert abs(hits / n - 0.25) < 0.01

    def test_never_samples_masked(self):
        probs = np.array([0.5, 0.0, 0.5])
        dist = ActionDistribution(
            actions=[STOP, AddFragment(None, None, 0, 0), AddFragment(None, None, 0, 1)],
            mask=np.array([True, False, True]),
            log_probs=tensor(np.array([[np.log(0.5), -np.inf, np.log(0.5)]])),
            probs=probs,
        )
        rng = np.random.default_rng(1)
        for _ in range(500):
            _, idx = sample_action(dist, rng)
            assert idx != 1

    def test_sampling_matches_model_distribution(self):
        policy = make_policy()
        ctx = pocket_ctx(policy)
        dist = policy.action_distribution(initial_state(), ctx, max_nodes=8)
        rng = np.random.default_rng(7)
        counts = np.zeros(len(dist.actions))
        n = 20_000
        for _ in range(n):
            _, idx = sample_action(dist, rng)
            counts[idx] += 1
        np.testing.assert_allclose(counts / n, dist.probs, atol=0.02)


class TestConfig:
    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            PolicyConfig(mode="geometric")

    def test_width_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            PolicyConfig(width=10, n_heads=4)

    def test_log_prob_at_matches_probs(self):
        policy = make_policy()
        ctx = pocket_ctx(policy)
        dist = policy.action_distribution(initial_state(), ctx, max_nodes=8)
        idx = int(np.flatnonzero(dist.mask)[2])
        lp = log_prob_at(dist, idx)
        assert np.isclose(np.exp(lp.data[0, 0]), dist.probs[idx])

"""Tree construction, structure invariants, and the accounting identities."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treealign import toy_env
from treealign import tree_engine as TE
from treealign.policy import SamplingConfig, ToySoftmaxPolicy, position_entropies, rollout_tokens
from treealign.seeds import derive
from treealign.tree_engine import (
    NotFoundError,
    ReasonTree,
    TreeConfig,
    build_tree,
    check_structure,
    flatten_paths,
    leaves_under,
    total_slice_tokens,
)


@pytest.fixture(scope="module")
def built_tree(tasks, sft_policy):
    return build_tree(sft_policy, tasks[0], TreeConfig(seed=5))


class TestDefaults:
    def test_paper_defaults(self):
        cfg = TreeConfig()
        assert cfg.branch_n == 3
        assert cfg.rollouts_t == 9
        assert cfg.rounds_k == 4
        assert cfg.temperature == 1.2

    def test_invalid_rejected(self):
        with pytest.raises(ValueError):
            TreeConfig(branch_n=0)
        with pytest.raises(ValueError):
            TreeConfig(rollouts_t=0)
        with pytest.raises(ValueError):
            TreeConfig(rounds_k=0)


class TestBuildTree:
    def test_structure_and_leaf_bound(self, built_tree):
        check_structure(built_tree)
        cfg = built_tree.build_config
        assert len(built_tree.leaf_ids()) <= 1 + cfg.rounds_k * cfg.branch_n * cfg.rollouts_t

    def test_deterministic_policy_single_chain(self, vocab, tasks, sft_policy):
        det = ToySoftmaxPolicy(vocab, sft_policy.theta * 400)
        tree = build_tree(det, tasks[0], TreeConfig(seed=1))
        assert len(tree.leaf_ids()) == 1
        check_structure(tree)

    def test_n1_t2_k1_three_leaves(self, vocab, tasks):
        # one branch point, two extra rollouts: trunk + 2 = 3 leaves
        pol = ToySoftmaxPolicy.init(vocab)  # uniform: plenty of entropy
        tree = build_tree(pol, tasks[0], TreeConfig(branch_n=1, rollouts_t=2, rounds_k=1, seed=3))
        assert len(tree.leaf_ids()) == 3
        branch_nodes = [
            n for n in tree.nodes.values() if not n.is_leaf and n.node_id != tree.root_id
        ]
        assert len(branch_nodes) == 1

    def test_bitwise_reproducible(self, tasks, sft_policy):
        a = build_tree(sft_policy, tasks[2], TreeConfig(seed=9))
        b = build_tree(sft_policy, tasks[2], TreeConfig(seed=9))
        assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)

    def test_leaves_carry_scored_trajectories(self, built_tree):
        for lid in built_tree.leaf_ids():
            traj = built_tree.nodes[lid].leaf_trajectory
            assert traj.outcome_score is not None
            assert 0.0 <= traj.outcome_score <= 1.0

    def test_matches_reference_reimplementation(self, vocab, tasks, sft_policy):
        """Independent trie-based re-simulation of the build rules gives the
        same leaf count and leaf token sequences."""
        task = tasks[1]
        cfg = TreeConfig(seed=13)
        tree = build_tree(sft_policy, task, cfg)

        # reference: simulate rounds over a list of complete token paths
        def ref_build():
            trunk = rollout_tokens(
                sft_policy, task, [],
                SamplingConfig(temperature=cfg.temperature, top_p=cfg.top_p,
                               max_steps=vocab.max_steps, seed=derive(cfg.seed, "trunk")),
            )
            paths = [trunk]
            branched = set()
            branch_counter = 0
            for rnd in range(1, cfg.rounds_k + 1):
                cands = {}
                for pi, traj in enumerate(paths):
                    ents = position_entropies(sft_policy, task, traj)
                    toks = traj.tokens()
                    for pos, ent in enumerate(ents):
                        if pos < cfg.min_prefix_tokens or pos > len(toks) - 1 or ent <= 1e-12:
                            continue
                        prefix = tuple(toks[:pos])
                        if prefix in branched or prefix in cands:
                            continue
                        cands[prefix] = (ent, pos, pi)
                ordered = sorted(cands.items(), key=lambda kv: (-kv[1][0], kv[1][1], f"{kv[1][2]:06d}"))
                chosen = ordered[: cfg.branch_n]
                for prefix, (ent, pos, pi) in chosen:
                    branched.add(prefix)
                    src = paths[pi]
                    for j in range(cfg.rollouts_t):
                        roll = rollout_tokens(
                            sft_policy, task, list(prefix),
                            SamplingConfig(temperature=cfg.temperature, top_p=cfg.top_p,
                                           max_steps=vocab.max_steps,
                                           seed=derive(cfg.seed, "branch", branch_counter, "rollout", j)),
                            prefix_logprobs=src.token_logprobs[:pos],
                        )
                        paths.append(roll)
                    branch_counter += 1
            return paths

        # NOTE: the reference keeps per-path indices, while the engine sorts
        # candidate ties by leaf node id; both resolve to first-created paths,
        # so leaf multisets must agree.
        ref_paths = ref_build()
        got = sorted(tuple(t.tokens()) for t in flatten_paths(tree))
        want = sorted(tuple(t.tokens()) for t in ref_paths)
        assert got == want

    def test_shared_prefixes_byte_identical(self, built_tree):
        for lid in built_tree.leaf_ids():
            assert built_tree.path_tokens(lid) == built_tree.nodes[lid].leaf_trajectory.tokens()

    def test_token_budget_accounting(self, built_tree):
        """Sum of node slices equals the number of generated tokens (trunk plus
        each rollout's continuation): shared prefixes are stored exactly once."""
        assert total_slice_tokens(built_tree) == built_tree.generated_tokens
        # and storage never exceeds the flat sum of leaf lengths
        flat = sum(len(t.tokens()) for t in flatten_paths(built_tree))
        assert total_slice_tokens(built_tree) <= flat


class _FakeTreeData:
    """Random trees for fuzzing leaves_under and values."""

    @staticmethod
    def build(rng, max_nodes=40):
        from treealign.core import Answer, Step, StepKind, Trajectory
        from treealign.tree_engine import TreeNode

        nodes = {"n0000": TreeNode("n0000", None, ())}
        count = 1
        internal = ["n0000"]
        while count < max_nodes and internal:
            parent = internal[int(rng.integers(len(internal)))]
            nid = f"n{count:04d}"
            node = TreeNode(nid, parent, (f"coord/{int(rng.integers(0, 30))}",))
            nodes[nid] = node
            nodes[parent].child_ids.append(nid)
            count += 1
            if rng.random() < 0.5:
                internal.append(nid)
        # make every childless node a leaf with a trivial trajectory
        for node in nodes.values():
            if not node.child_ids:
                steps = (Step(StepKind.ANSWER, ("answer/count", "num/1")),)
                node.leaf_trajectory = Trajectory("t", steps, (0.0, 0.0), Answer.count(1),
                                                  outcome_score=float(rng.random()))
                node.total = 1
                node.successes = int(rng.random() < 0.5)
        # ensure root is not a leaf-less orphan
        return ReasonTree("t", nodes, "n0000", TreeConfig())


class TestLeavesUnder:
    def test_leaf_returns_itself(self, built_tree):
        lid = built_tree.leaf_ids()[0]
        assert leaves_under(built_tree, lid) == [lid]

    def test_root_covers_all(self, built_tree):
        assert sorted(leaves_under(built_tree, built_tree.root_id)) == sorted(built_tree.leaf_ids())

    def test_unknown_node(self, built_tree):
        with pytest.raises(NotFoundError):
            leaves_under(built_tree, "nope")

    @given(st.integers(0, 10_000))
    def test_matches_dfs_oracle(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        tree = _FakeTreeData.build(rng)

        def brute(nid):
            node = tree.nodes[nid]
            if node.is_leaf:
                return [nid]
            out = []
            for c in node.child_ids:
                out.extend(brute(c))
            return out

        for nid in tree.nodes:
            assert sorted(leaves_under(tree, nid)) == sorted(brute(nid))


class TestFlattenPaths:
    def test_single_chain(self, vocab, tasks, sft_policy):
        det = ToySoftmaxPolicy(vocab, sft_policy.theta * 400)
        tree = build_tree(det, tasks[0], TreeConfig(seed=1))
        paths = flatten_paths(tree)
        assert len(paths) == 1

    def test_count_equals_leaves(self, built_tree):
        assert len(flatten_paths(built_tree)) == len(built_tree.leaf_ids())

    def test_json_round_trip(self, built_tree):
        again = ReasonTree.from_json(json.loads(json.dumps(built_tree.to_json())))
        assert json.dumps(again.to_json(), sort_keys=True) == json.dumps(
            built_tree.to_json(), sort_keys=True
        )
        check_structure(again)

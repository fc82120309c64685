import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=50,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

import numpy as np

from treealign import policy as P
from treealign import toy_env
from treealign.core import Step, StepKind, Trajectory
from treealign.tree_engine import ReasonTree, TreeConfig, TreeNode


def attach_leaf_trajectories(tree, success_of):
    """Give every childless node a trajectory whose tokens are its path slices."""
    for nid, node in tree.nodes.items():
        if not node.child_ids:
            path = tree.path_tokens(nid)
            steps = (Step(StepKind.EVIDENCE, tuple(path)),)
            node.leaf_trajectory = Trajectory("t", steps, tuple([0.0] * len(path)))
            node.successes = int(success_of(nid))
            node.total = 1


def random_tree(rng, max_nodes=60):
    """Random single-rooted tree with token slices and leaf trajectories."""
    nodes = {"n0000": TreeNode("n0000", None, ())}
    count = 1
    candidates = ["n0000"]
    while count < max_nodes:
        parent = candidates[int(rng.integers(len(candidates)))]
        nid = f"n{count:04d}"
        node = TreeNode(
            nid, parent,
            tuple(f"coord/{int(rng.integers(30))}" for _ in range(int(rng.integers(1, 4)))),
        )
        nodes[nid] = node
        nodes[parent].child_ids.append(nid)
        count += 1
        if rng.random() < 0.6:
            candidates.append(nid)
    tree = ReasonTree("t", nodes, "n0000", TreeConfig())
    attach_leaf_trajectories(tree, lambda nid: rng.random() < 0.5)
    return tree


@pytest.fixture(scope="session")
def vocab():
    return toy_env.GenConfig().vocabulary()


@pytest.fixture(scope="session")
def tasks():
    return toy_env.generate_tasks(7, 40)


@pytest.fixture(scope="session")
def sft_policy(vocab, tasks):
    """A moderately trained policy shared across tests (slow to build)."""
    pol = P.ToySoftmaxPolicy.init(vocab)
    pairs = [(t, toy_env.gold_trajectory(t, vocab)) for t in tasks]
    P.train_sft(pol, pairs, P.SftConfig(lr=0.5, steps=120))
    return pol

"""Entropy-guided reasoning trees.

A tree starts from one trunk rollout.  Each round scores next-token entropy
along the current complete trajectories, picks the top-N highest-entropy
positions globally (ties broken by earlier position, then lexicographic leaf
id), turns each into a branch node, and expands every branch with T fresh
rollouts.  This runs for K rounds, so a build yields at most 1 + K*N*T
leaves, every one of them a complete trajectory with its outcome score
filled in.

There is no UCT-style selection or value backup here: exploration is pure
entropy-guided breadth expansion, and shared prefixes are stored once (each
node owns only the tokens it adds relative to its parent).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import toy_env
from .core import Trajectory
from .policy import PolicyInterface, SamplingConfig, position_entropies, rollout_tokens
from .seeds import derive
from .vocab import TaskVocabulary


class NotFoundError(KeyError):
    pass


class EmptyTreeError(ValueError):
    pass


@dataclass(frozen=True)
class TreeConfig:
    """Build parameters.  Defaults: 3 branch points per round, 9 rollouts per
    branch, 4 rounds, sampling temperature 1.2."""

    branch_n: int = 3
    rollouts_t: int = 9
    rounds_k: int = 4
    temperature: float = 1.2
    seed: int = 0
    min_prefix_tokens: int = 1
    top_p: float = 1.0
    rescore_each_round: bool = True
    entropy_unit: str = "token"  # "token" | "step" (max-pool entropy per step)

    def __post_init__(self):
        if self.branch_n < 1 or self.rollouts_t < 1 or self.rounds_k < 1:
            raise ValueError("branch_n, rollouts_t and rounds_k must all be >= 1")
        if self.entropy_unit not in ("token", "step"):
            raise ValueError("entropy_unit must be 'token' or 'step'")

    def to_json(self) -> dict:
        return {
            "branch_n": self.branch_n,
            "rollouts_t": self.rollouts_t,
            "rounds_k": self.rounds_k,
            "temperature": self.temperature,
            "seed": self.seed,
            "min_prefix_tokens": self.min_prefix_tokens,
            "top_p": self.top_p,
            "rescore_each_round": self.rescore_each_round,
            "entropy_unit": self.entropy_unit,
        }

    @staticmethod
    def from_json(obj: dict) -> "TreeConfig":
        return TreeConfig(**obj)


@dataclass
class TreeNode:
    node_id: str
    parent_id: Optional[str]
    tokens: tuple[str, ...]  # tokens added relative to the parent
    child_ids: list[str] = field(default_factory=list)
    leaf_trajectory: Optional[Trajectory] = None
    value: Optional[float] = None
    successes: int = 0
    total: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.leaf_trajectory is not None

    def to_json(self) -> dict:
        return {
            "id": self.node_id,
            "parent": self.parent_id,
            "tokens": list(self.tokens),
            "leaf": self.is_leaf,
            "traj": self.leaf_trajectory.to_json() if self.leaf_trajectory else None,
            "stats": {"successes": self.successes, "total": self.total},
            "value": self.value,
        }

    @staticmethod
    def from_json(obj: dict) -> "TreeNode":
        node = TreeNode(
            node_id=obj["id"],
            parent_id=obj.get("parent"),
            tokens=tuple(obj["tokens"]),
            leaf_trajectory=Trajectory.from_json(obj["traj"]) if obj.get("traj") else None,
            value=obj.get("value"),
        )
        stats = obj.get("stats") or {}
        node.successes = int(stats.get("successes", 0))
        node.total = int(stats.get("total", 0))
        return node


@dataclass
class ReasonTree:
    task_id: str
    nodes: dict[str, TreeNode]
    root_id: str
    build_config: TreeConfig
    generated_tokens: int = 0  # trunk plus per-rollout continuation tokens

    def node(self, node_id: str) -> TreeNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise NotFoundError(node_id) from None

    def leaf_ids(self) -> list[str]:
        return [nid for nid in self.nodes if self.nodes[nid].is_leaf]

    def path_tokens(self, node_id: str) -> list[str]:
        """Token sequence from the root down to and including this node's slice."""
        chain: list[TreeNode] = []
        cur: Optional[str] = node_id
        while cur is not None:
            node = self.node(cur)
            chain.append(node)
            cur = node.parent_id
        out: list[str] = []
        for node in reversed(chain):
            out.extend(node.tokens)
        return out

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "config": self.build_config.to_json(),
            "generated_tokens": self.generated_tokens,
            "nodes": [self.nodes[nid].to_json() for nid in self.nodes],
        }

    @staticmethod
    def from_json(obj: dict) -> "ReasonTree":
        nodes = {n["id"]: TreeNode.from_json(n) for n in obj["nodes"]}
        root_id = next(nid for nid, n in nodes.items() if n.parent_id is None)
        for node in nodes.values():
            if node.parent_id is not None:
                nodes[node.parent_id].child_ids.append(node.node_id)
        # restore deterministic child order (creation order == id order)
        for node in nodes.values():
            node.child_ids.sort()
        return ReasonTree(obj["task_id"], nodes, root_id, TreeConfig.from_json(obj["config"]),
                          int(obj.get("generated_tokens", 0)))


class _Builder:
    def __init__(self, task, cfg: TreeConfig, vocab: TaskVocabulary):
        self.task = task
        self.cfg = cfg
        self.vocab = vocab
        self.nodes: dict[str, TreeNode] = {}
        self.counter = 0
        self.root_id = self.new_node(None, ()).node_id

    def new_node(self, parent_id: Optional[str], tokens: tuple[str, ...]) -> TreeNode:
        node = TreeNode(f"n{self.counter:04d}", parent_id, tokens)
        self.counter += 1
        self.nodes[node.node_id] = node
        if parent_id is not None:
            self.nodes[parent_id].child_ids.append(node.node_id)
        return node

    def path_nodes(self, leaf_id: str) -> list[TreeNode]:
        chain = []
        cur: Optional[str] = leaf_id
        while cur is not None:
            node = self.nodes[cur]
            chain.append(node)
            cur = node.parent_id
        return list(reversed(chain))

    def split_for_prefix(self, leaf_id: str, position: int) -> TreeNode:
        """Return the node whose path-prefix ends exactly at ``position`` tokens,
        splitting the covering node when the position falls inside its slice."""
        offset = 0
        for node in self.path_nodes(leaf_id):
            end = offset + len(node.tokens)
            if position == offset and node.parent_id is not None:
                return self.nodes[node.parent_id]
            if offset < position < end:
                k = position - offset
                parent = self.nodes[node.parent_id]
                upper = TreeNode(f"n{self.counter:04d}", parent.node_id, node.tokens[:k])
                self.counter += 1
                self.nodes[upper.node_id] = upper
                parent.child_ids[parent.child_ids.index(node.node_id)] = upper.node_id
                node.parent_id = upper.node_id
                node.tokens = node.tokens[k:]
                upper.child_ids = [node.node_id]
                return upper
            if position == end:
                return node
            offset = end
        raise ValueError(f"position {position} beyond path of {leaf_id}")


def build_tree(policy: PolicyInterface, task, cfg: TreeConfig) -> ReasonTree:
    """Build an entropy-guided reasoning tree for one task; bitwise reproducible per seed."""
    vocab = policy.vocab
    builder = _Builder(task, cfg, vocab)
    trunk_cfg = SamplingConfig(
        temperature=cfg.temperature, top_p=cfg.top_p, max_steps=vocab.max_steps,
        seed=derive(cfg.seed, "trunk"),
    )
    trunk = rollout_tokens(policy, task, [], trunk_cfg)
    trunk_node = builder.new_node(builder.root_id, tuple(trunk.tokens()))
    trunk_node.leaf_trajectory = trunk
    generated = len(trunk.tokens())

    branched: set[tuple[str, ...]] = set()
    branch_counter = 0
    saved_candidates: list[tuple[float, int, str]] = []

    for rnd in range(1, cfg.rounds_k + 1):
        if cfg.rescore_each_round or rnd == 1:
            candidates = _collect_candidates(policy, task, builder, cfg, branched)
            if not cfg.rescore_each_round:
                saved_candidates = candidates
        else:
            candidates = [
                c for c in saved_candidates
                if tuple(builder.nodes[c[2]].leaf_trajectory.tokens()[: c[1]]) not in branched
                and builder.nodes[c[2]].is_leaf
            ]
        if not candidates:
            break
        chosen: list[tuple[float, int, str]] = []
        seen_prefixes: set[tuple[str, ...]] = set()
        for ent, pos, leaf_id in candidates:
            prefix = tuple(builder.nodes[leaf_id].leaf_trajectory.tokens()[:pos])
            if prefix in seen_prefixes:
                continue
            seen_prefixes.add(prefix)
            chosen.append((ent, pos, leaf_id))
            if len(chosen) == cfg.branch_n:
                break
        for ent, pos, leaf_id in chosen:
            leaf = builder.nodes[leaf_id]
            full = leaf.leaf_trajectory.tokens()
            prefix = tuple(full[:pos])
            branched.add(prefix)
            branch_node = builder.split_for_prefix(leaf_id, pos)
            prefix_lp = leaf.leaf_trajectory.token_logprobs[:pos]
            for j in range(cfg.rollouts_t):
                roll_cfg = SamplingConfig(
                    temperature=cfg.temperature, top_p=cfg.top_p, max_steps=vocab.max_steps,
                    seed=derive(cfg.seed, "branch", branch_counter, "rollout", j),
                )
                traj = rollout_tokens(policy, task, list(prefix), roll_cfg, prefix_logprobs=prefix_lp)
                child = builder.new_node(branch_node.node_id, tuple(traj.tokens()[pos:]))
                child.leaf_trajectory = traj
                generated += len(traj.tokens()) - pos
            branch_counter += 1

    for node in builder.nodes.values():
        node.child_ids.sort()  # canonical child order == id (creation) order
    tree = ReasonTree(task.task_id, builder.nodes, builder.root_id, cfg, generated)
    _fill_stats(tree, task)
    return tree


def _collect_candidates(policy, task, builder: _Builder, cfg: TreeConfig, branched) -> list:
    """All branchable (entropy, position, leaf_id) triples, best first."""
    candidates: list[tuple[float, int, str]] = []
    seen_prefix: dict[tuple[str, ...], tuple[float, int, str]] = {}
    for leaf_id in sorted(builder.nodes):
        leaf = builder.nodes[leaf_id]
        if not leaf.is_leaf:
            continue
        traj = leaf.leaf_trajectory
        tokens = traj.tokens()
        ents = position_entropies(policy, task, traj)
        positions = _positions_for(cfg, traj, ents)
        for pos, ent in positions:
            if pos < cfg.min_prefix_tokens or pos > len(tokens) - 1:
                continue
            if ent <= 1e-12:
                continue
            prefix = tuple(tokens[:pos])
            if prefix in branched:
                continue
            if prefix not in seen_prefix:
                seen_prefix[prefix] = (ent, pos, leaf_id)
    candidates = list(seen_prefix.values())
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
    return candidates


def _positions_for(cfg: TreeConfig, traj: Trajectory, ents: list[float]) -> list[tuple[int, float]]:
    if cfg.entropy_unit == "token":
        return list(enumerate(ents))
    # step unit: candidate positions are step starts, scored by the max
    # entropy over the step's token positions
    out = []
    offset = 0
    for step in traj.steps:
        n = len(step.tokens)
        if n:
            out.append((offset, max(ents[offset : offset + n])))
        offset += n
    return out


def _fill_stats(tree: ReasonTree, task) -> None:
    order = _topo_order(tree)
    for nid in reversed(order):
        node = tree.nodes[nid]
        if node.is_leaf:
            node.total = 1
            node.successes = 1 if toy_env.is_correct(node.leaf_trajectory, task) else 0
        else:
            node.total = sum(tree.nodes[c].total for c in node.child_ids)
            node.successes = sum(tree.nodes[c].successes for c in node.child_ids)


def _topo_order(tree: ReasonTree) -> list[str]:
    """Parents before children, deterministic."""
    out: list[str] = []
    stack = [tree.root_id]
    while stack:
        nid = stack.pop()
        out.append(nid)
        stack.extend(reversed(tree.nodes[nid].child_ids))
    return out


def leaves_under(tree: ReasonTree, node_id: str) -> list[str]:
    """Leaf node ids of the subtree rooted at node_id (the node itself if it is a leaf)."""
    node = tree.node(node_id)
    out: list[str] = []
    stack = [node.node_id]
    while stack:
        nid = stack.pop()
        n = tree.nodes[nid]
        if n.is_leaf:
            out.append(nid)
        else:
            stack.extend(reversed(n.child_ids))
    return out


def flatten_paths(tree: ReasonTree) -> list[Trajectory]:
    """One complete trajectory per leaf, in leaf id order."""
    return [tree.nodes[nid].leaf_trajectory for nid in sorted(tree.leaf_ids())]


def total_slice_tokens(tree: ReasonTree) -> int:
    """Sum of per-node slice lengths: the number of generated tokens with
    shared prefixes counted once."""
    return sum(len(n.tokens) for n in tree.nodes.values())


def check_structure(tree: ReasonTree) -> None:
    """Raise AssertionError if the node graph is not a single-rooted tree or a
    leaf/child invariant is violated."""
    roots = [nid for nid, n in tree.nodes.items() if n.parent_id is None]
    assert roots == [tree.root_id], f"expected single root, got {roots}"
    seen: set[str] = set()
    stack = [tree.root_id]
    while stack:
        nid = stack.pop()
        assert nid not in seen, f"cycle through {nid}"
        seen.add(nid)
        node = tree.nodes[nid]
        for c in node.child_ids:
            assert tree.nodes[c].parent_id == nid
        assert node.is_leaf == (not node.child_ids), f"leaf invariant broken at {nid}"
        assert node.successes <= node.total
        stack.extend(node.child_ids)
    assert seen == set(tree.nodes), "disconnected nodes present"


def save_trees(path, trees: list[ReasonTree]) -> None:
    import os

    tmp = str(path) + ".tmp"
    with open(tmp, "w") as f:
        for tree in trees:
            f.write(json.dumps(tree.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)


def load_trees(path) -> list[ReasonTree]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(ReasonTree.from_json(json.loads(line)))
    return out

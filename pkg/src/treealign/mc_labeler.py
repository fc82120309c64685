"""Monte-Carlo step values and token-level labels from built reasoning trees.

Each node's value is the fraction of complete leaf trajectories beneath it
whose final answer is correct (exact match for counts, IoU >= 0.5 for
grounding).  Values binarize into per-token labels: a token inherits label 1
iff its owning node's value clears the threshold (>= is inclusive).  Problems
whose trajectory pool shows no correctness variance carry no discriminative
signal and are filtered out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional

from .core import StepKind, Trajectory
from .tree_engine import ReasonTree, leaves_under


class IncompleteValuesError(ValueError):
    pass


class EmptyTreeError(ValueError):
    pass


SOURCE_MCTS = "mcts"
SOURCE_INJECTED = "injected"
SOURCE_ANCHOR = "anchor"


@dataclass(frozen=True)
class McValue:
    node_id: str
    successes: int
    total: int

    def __post_init__(self):
        if self.total < 1:
            raise ValueError("total must be >= 1")
        if not (0 <= self.successes <= self.total):
            raise ValueError("successes must lie in [0, total]")

    @property
    def value(self) -> Fraction:
        """Exact rational success rate; float(v.value) for a real number."""
        return Fraction(self.successes, self.total)


@dataclass(frozen=True)
class LabeledSample:
    """A trajectory with per-token binary faithfulness labels and a loss mask.

    The mask is 1 on reasoning tokens (plan/evidence/synthesis steps) and 0 on
    answer-step tokens, which are judged by the outcome instead.
    """

    trajectory: Trajectory
    labels: tuple[int, ...]
    mask: tuple[int, ...]
    source: str
    kind: Optional[str] = None  # perturbation detail for injected samples

    def __post_init__(self):
        n = sum(len(s.tokens) for s in self.trajectory.steps)
        if len(self.labels) != n or len(self.mask) != n:
            raise ValueError("labels, mask and tokens must have equal length")

    def to_json(self) -> dict:
        out = {
            "traj": self.trajectory.to_json(),
            "labels": list(self.labels),
            "mask": list(self.mask),
            "source": self.source,
        }
        if self.kind is not None:
            out["kind"] = self.kind
        return out

    @staticmethod
    def from_json(obj: dict) -> "LabeledSample":
        return LabeledSample(
            trajectory=Trajectory.from_json(obj["traj"]),
            labels=tuple(int(x) for x in obj["labels"]),
            mask=tuple(int(x) for x in obj["mask"]),
            source=obj["source"],
            kind=obj.get("kind"),
        )


def reasoning_mask(t: Trajectory) -> tuple[int, ...]:
    """1 on plan/evidence/synthesis tokens, 0 on answer-step tokens."""
    out: list[int] = []
    for s in t.steps:
        bit = 0 if s.kind == StepKind.ANSWER else 1
        out.extend([bit] * len(s.tokens))
    return tuple(out)


def mc_values(tree: ReasonTree) -> dict[str, McValue]:
    """Per-node success rates over descendant leaves (exact rationals)."""
    leaf_ids = tree.leaf_ids()
    if not leaf_ids:
        raise EmptyTreeError("tree has no leaves")
    correct = {nid: tree.nodes[nid].successes == 1 for nid in leaf_ids}
    out: dict[str, McValue] = {}
    for nid in tree.nodes:
        leaves = leaves_under(tree, nid)
        succ = sum(1 for l in leaves if correct[l])
        out[nid] = McValue(nid, succ, len(leaves))
    return out


def label_tokens(tree: ReasonTree, values: dict[str, McValue], threshold: float = 0.5) -> list[LabeledSample]:
    """One labelled sample per root-to-leaf path.

    Every token takes label 1 iff the value of the node owning it is >=
    threshold.  Raises IncompleteValuesError when a path node has no value.
    """
    if not (0 < threshold < 1):
        raise ValueError("threshold must lie in (0, 1)")
    samples: list[LabeledSample] = []
    for leaf_id in sorted(tree.leaf_ids()):
        labels: list[int] = []
        chain: list[str] = []
        cur: Optional[str] = leaf_id
        while cur is not None:
            chain.append(cur)
            cur = tree.nodes[cur].parent_id
        for nid in reversed(chain):
            node = tree.nodes[nid]
            if nid not in values:
                raise IncompleteValuesError(f"no value for node {nid}")
            bit = 1 if values[nid].value >= Fraction(threshold).limit_denominator(10**9) else 0
            labels.extend([bit] * len(node.tokens))
        traj = tree.nodes[leaf_id].leaf_trajectory
        samples.append(
            LabeledSample(
                trajectory=traj,
                labels=tuple(labels),
                mask=reasoning_mask(traj),
                source=SOURCE_MCTS,
            )
        )
    return samples


def subsample_per_tree(samples: list[LabeledSample], cap: Optional[int]) -> list[LabeledSample]:
    """Keep at most ``cap`` samples per tree, stride-spaced over the leaf order."""
    if cap is None or len(samples) <= cap:
        return samples
    idx = [round(i * (len(samples) - 1) / (cap - 1)) for i in range(cap)] if cap > 1 else [0]
    out = []
    last = -1
    for i in idx:
        if i != last:
            out.append(samples[i])
            last = i
    return out


@dataclass(frozen=True)
class VarianceReport:
    group_stds: dict
    retained: int
    dropped_low_variance: int
    dropped_too_few: int

    def to_json(self) -> dict:
        return {
            "group_stds": dict(self.group_stds),
            "retained": self.retained,
            "dropped_low_variance": self.dropped_low_variance,
            "dropped_too_few": self.dropped_too_few,
        }


def population_std(xs: Iterable[float]) -> float:
    xs = list(xs)
    n = len(xs)
    mean = sum(xs) / n
    return math.sqrt(sum((x - mean) ** 2 for x in xs) / n)


def variance_filter(problem_groups: dict, min_std: float = 1e-6) -> tuple[dict, VarianceReport]:
    """Drop problems whose correctness scores have population std below min_std.

    ``problem_groups`` maps a problem id to its list of per-trajectory
    correctness scores.  Groups of fewer than two trajectories are dropped
    with reason TooFew.  Returns (retained groups, report).
    """
    retained: dict = {}
    stds: dict = {}
    too_few = 0
    low_var = 0
    for pid, scores in problem_groups.items():
        if len(scores) < 2:
            stds[pid] = {"std": None, "kept": False, "reason": "TooFew"}
            too_few += 1
            continue
        std = population_std(scores)
        if std < min_std:
            stds[pid] = {"std": std, "kept": False, "reason": "LowVariance"}
            low_var += 1
        else:
            stds[pid] = {"std": std, "kept": True, "reason": None}
            retained[pid] = scores
    report = VarianceReport(stds, len(retained), low_var, too_few)
    return retained, report

"""Reinforcement-learning core: drop-moment reward shaping, tree advantages,
and clipped group-relative policy optimization over trees or linear chains.

Reward shaping: a trajectory whose per-step verifier scores show a sudden
confidence drop larger than the sensitivity threshold has its outcome score
multiplied by a penalty factor in (0, 1).  Node advantages combine a global
term (node value minus root value) and a local term (node value minus parent
value), downweighted by the square root of the node's leaf count so shared
prefixes, which appear in many complete sequences, do not dominate the
update.  Node values are computed in exact rational arithmetic and exposed
as floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .core import Trajectory, token_count
from .policy import (
    PolicyInterface,
    SamplingConfig,
    ToySoftmaxPolicy,
    feature_state,
    rollout_tokens,
    state_row,
)
from .prm import PRMScoreSequence, PrmInterface
from .seeds import derive
from .tree_engine import ReasonTree, TreeConfig, build_tree, leaves_under
from .vocab import GrammarCursor


class EmptyScoresError(ValueError):
    pass


class MissingOutcomeError(ValueError):
    pass


class IncompleteRewardsError(ValueError):
    pass


class GroupTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class ShapingConfig:
    """Drop-moment shaping.  Defaults: threshold 0.3, penalty factor 0.7.

    ``strict_boundary`` selects the strict (>) trigger for the penalty; the
    default penalizes at delta >= rho.
    """

    rho: float = 0.3
    gamma: float = 0.7
    strict_boundary: bool = False

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclass(frozen=True)
class DropMoment:
    delta: float
    index: Optional[int]
    triggered: bool


def drop_moment(scores: Sequence[float], rho: float) -> DropMoment:
    """Largest decrease between consecutive step scores.

    ``index`` is the position of the dropped-to element (first on ties);
    ``triggered`` uses the strict comparison delta > rho.  A single-element
    sequence has delta 0 and never triggers.
    """
    scores = list(scores)
    if not scores:
        raise EmptyScoresError("empty score sequence")
    if len(scores) == 1:
        return DropMoment(0.0, None, False)
    best = -math.inf
    best_idx = None
    for j in range(1, len(scores)):
        d = scores[j - 1] - scores[j]
        if d > best:
            best = d
            best_idx = j
    return DropMoment(best, best_idx, best > rho)


def _mean_reasoning_token_score(t: Trajectory, scores: PRMScoreSequence) -> float:
    """Mean verifier score over non-answer-step tokens (the dense process
    average the naive reward baseline accumulates)."""
    from .core import StepKind

    vals: list[float] = []
    offset = 0
    for s in t.steps:
        n = len(s.tokens)
        if s.kind != StepKind.ANSWER:
            vals.extend(scores.token_scores[offset : offset + n])
        offset += n
    if not vals:
        vals = list(scores.token_scores)
    return float(np.mean(vals)) if vals else 0.0


def reasoning_step_scores(t: Trajectory, scores: PRMScoreSequence) -> list[float]:
    """Step scores over the reasoning prefix (the final answer step, whose
    quality the outcome score already prices, is excluded)."""
    from .core import StepKind

    out = list(scores.step_scores)
    if t.steps and t.steps[-1].kind == StepKind.ANSWER and len(out) > 1:
        out = out[:-1]
    return out


def shaped_reward(t: Trajectory, scores: PRMScoreSequence, cfg: ShapingConfig) -> float:
    """Outcome score, multiplied by gamma when the reasoning-step scores show
    a sudden drop.

    The boundary delta == rho applies the penalty unless strict_boundary is
    set.
    """
    if t.outcome_score is None:
        raise MissingOutcomeError(f"trajectory {t.task_id} lacks an outcome score")
    dm = drop_moment(reasoning_step_scores(t, scores), cfg.rho)
    if cfg.strict_boundary:
        penalized = dm.delta > cfg.rho
    else:
        penalized = dm.delta >= cfg.rho
    return cfg.gamma * t.outcome_score if penalized else t.outcome_score


# ---------------------------------------------------------------------------
# Tree values and advantages


@dataclass(frozen=True)
class NodeAdvantage:
    node_id: str
    value: float
    global_adv: float
    local_adv: float
    weighted_adv: float
    leaf_count: int


def node_values_exact(tree: ReasonTree, leaf_rewards: dict) -> dict[str, Fraction]:
    """Per-node mean of descendant leaf rewards, in exact rational arithmetic."""
    leaf_ids = tree.leaf_ids()
    missing = [l for l in leaf_ids if l not in leaf_rewards]
    if missing:
        raise IncompleteRewardsError(f"missing rewards for {missing[:3]}")
    exact = {l: Fraction(leaf_rewards[l]) for l in leaf_ids}
    out: dict[str, Fraction] = {}

    def visit(nid: str) -> tuple[Fraction, int]:
        node = tree.nodes[nid]
        if node.is_leaf:
            out[nid] = exact[nid]
            return exact[nid], 1
        total = Fraction(0)
        count = 0
        for c in node.child_ids:
            s, n = visit(c)
            total += s * n
            count += n
        value = total / count
        out[nid] = value
        return value, count

    visit(tree.root_id)
    return out


def tree_advantages(tree: ReasonTree, leaf_rewards: dict) -> dict[str, NodeAdvantage]:
    """Global/local advantages per node, downweighted by sqrt(leaf count)."""
    values = node_values_exact(tree, leaf_rewards)
    leaf_counts = {nid: len(leaves_under(tree, nid)) for nid in tree.nodes}
    root_v = values[tree.root_id]
    out: dict[str, NodeAdvantage] = {}
    for nid in tree.nodes:
        node = tree.nodes[nid]
        v = values[nid]
        ga = v - root_v
        la = v - values[node.parent_id] if node.parent_id is not None else Fraction(0)
        n_leaves = leaf_counts[nid]
        weighted = (float(ga) + float(la)) / math.sqrt(n_leaves)
        out[nid] = NodeAdvantage(
            node_id=nid,
            value=float(v),
            global_adv=float(ga),
            local_adv=float(la),
            weighted_adv=weighted,
            leaf_count=n_leaves,
        )
    return out


def vanilla_grpo_advantages(rewards: Sequence[float]) -> np.ndarray:
    """In-group normalization (R - mean) / (population std + 1e-8).

    All-equal groups map to exact zeros rather than rounding residue.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise GroupTooSmallError("need a group of at least 2 rewards")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + 1e-8)


# ---------------------------------------------------------------------------
# Clipped surrogate


@dataclass(frozen=True)
class GrpoConfig:
    epsilon: float = 0.2
    group_size: int = 8
    steps: int = 200
    lr: float = 0.05
    seed: int = 0
    inner_epochs: int = 1
    optimizer: str = "adam"  # "adam" | "sgd"

    def __post_init__(self):
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must lie in (0, 1)")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")


class AdamState:
    """Adam accumulator for the policy logit table (beta1=0.9, beta2=0.999)."""

    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _per_position_terms(policy: ToySoftmaxPolicy, task, tokens: list[str]):
    """For each position: (row, legal ids, softmax over legal, chosen index, logp)."""
    cursor = GrammarCursor(task, policy.vocab)
    out = []
    for tok in tokens:
        slot, percept = feature_state(cursor)
        row = state_row(slot, percept)
        legal = policy._legal_ids(cursor)
        logits = policy.theta[row, legal]
        logits = logits - logits.max()
        w = np.exp(logits)
        w /= w.sum()
        tid = policy.token_id(tok)
        k = int(np.nonzero(legal == tid)[0][0])
        out.append((row, legal, w, tid, math.log(w[k])))
        cursor.advance(tok)
    return out


def _logprobs_only(policy: ToySoftmaxPolicy, task, tokens: list[str]) -> list[float]:
    return [t[4] for t in _per_position_terms(policy, task, tokens)]


def clipped_surrogate(
    policy: ToySoftmaxPolicy,
    old_policy: ToySoftmaxPolicy,
    task,
    spans: list[tuple[list[str], int, int, float]],
    epsilon: float,
) -> tuple[float, np.ndarray, dict]:
    """Mean clipped-surrogate loss and gradient over update units.

    Each span is (full token sequence, start, end, advantage): the unit's
    probability ratio is exp(sum over [start, end) of new-minus-old token
    log-probs).  Returns (loss, gradient, report); the loss is the negated
    mean of min(ratio * adv, clip(ratio) * adv).
    """
    grad = np.zeros_like(policy.theta)
    total = 0.0
    used = 0
    skipped = 0
    cache_new: dict[int, list] = {}
    cache_old: dict[int, list] = {}
    clip_active = 0
    for tokens, start, end, adv in spans:
        if end <= start:
            skipped += 1
            continue
        key = id(tokens)
        if key not in cache_new:
            cache_new[key] = _per_position_terms(policy, task, tokens)
            cache_old[key] = _logprobs_only(old_policy, task, tokens)
        terms = cache_new[key]
        old_lp = cache_old[key]
        logp = sum(t[4] for t in terms[start:end])
        logp_old = sum(old_lp[start:end])
        ratio = math.exp(logp - logp_old)
        clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
        term = min(ratio * adv, clipped * adv)
        total += term
        used += 1
        # gradient of min(...): zero when the clipped constant branch is active
        if (adv > 0 and ratio > 1.0 + epsilon) or (adv < 0 and ratio < 1.0 - epsilon):
            clip_active += 1
            continue
        coeff = ratio * adv
        for row, legal, w, tid, _ in terms[start:end]:
            grad[row, legal] -= coeff * w
            grad[row, tid] += coeff
    if used == 0:
        return 0.0, grad, {"nodes": 0, "skipped_empty": skipped, "clip_active": 0}
    loss = -total / used
    grad = -grad / used
    return loss, grad, {"nodes": used, "skipped_empty": skipped, "clip_active": clip_active}


def tree_grpo_loss(
    policy: ToySoftmaxPolicy,
    old_policy: ToySoftmaxPolicy,
    task,
    tree: ReasonTree,
    advantages: dict[str, NodeAdvantage],
    cfg: GrpoConfig,
) -> tuple[float, np.ndarray, dict]:
    """Clipped surrogate over all non-root tree nodes.

    Each node's ratio covers only its own token slice (conditioned on the
    shared prefix), so shared prefixes are not double-counted; at
    policy == old_policy the loss equals -mean(weighted advantage) and the
    gradient is the plain policy-gradient direction.
    """
    spans: list[tuple[list[str], int, int, float]] = []
    rep: dict[str, tuple[str, int, int]] = {}
    for leaf_id in sorted(tree.leaf_ids()):
        path: list[str] = []
        cur = leaf_id
        chain = []
        while cur is not None:
            chain.append(cur)
            cur = tree.nodes[cur].parent_id
        offset = 0
        for nid in reversed(chain):
            n = len(tree.nodes[nid].tokens)
            if nid not in rep:
                rep[nid] = (leaf_id, offset, offset + n)
            offset += n
    leaf_tokens = {l: tree.nodes[l].leaf_trajectory.tokens() for l in tree.leaf_ids()}
    for nid in sorted(tree.nodes):
        if nid == tree.root_id:
            continue
        leaf_id, start, end = rep[nid]
        spans.append((leaf_tokens[leaf_id], start, end, advantages[nid].weighted_adv))
    return clipped_surrogate(policy, old_policy, task, spans, cfg.epsilon)


# ---------------------------------------------------------------------------
# Training loop

MODES = ("vanilla", "tree", "tree+process", "chain+process", "tree+avg-score")


def align(
    policy: ToySoftmaxPolicy,
    tasks: Sequence,
    prm: Optional[PrmInterface],
    grpo_cfg: GrpoConfig,
    tree_cfg: TreeConfig,
    shaping_cfg: ShapingConfig,
    mode: str = "tree+process",
    on_iteration: Optional[Callable[[dict], None]] = None,
) -> tuple[ToySoftmaxPolicy, list[dict]]:
    """Iterate rollout -> verifier scoring -> reward shaping -> advantages ->
    one clipped-surrogate gradient step; returns the trained policy and the
    per-iteration metrics log.

    Modes: ``vanilla`` (linear chains, outcome rewards), ``tree`` (tree
    rollouts, outcome rewards), ``tree+process`` (tree + drop-moment shaping),
    ``chain+process`` (linear chains + drop-moment shaping), and
    ``tree+avg-score`` (tree rewards = outcome + mean token score, the naive
    dense-score baseline that induces length collapse).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not tasks:
        raise ValueError("need at least one task")
    needs_prm = mode in ("tree+process", "chain+process", "tree+avg-score")
    if needs_prm and prm is None:
        raise ValueError(f"mode {mode} needs a process reward model")
    policy = policy.clone()
    optimizer = AdamState(policy.theta.shape, grpo_cfg.lr) if grpo_cfg.optimizer == "adam" else None
    metrics: list[dict] = []
    for it in range(grpo_cfg.steps):
        task = tasks[it % len(tasks)]
        old_policy = policy.clone()
        if mode in ("vanilla", "chain+process"):
            trajs = [
                rollout_tokens(
                    old_policy,
                    task,
                    [],
                    SamplingConfig(
                        temperature=tree_cfg.temperature,
                        top_p=tree_cfg.top_p,
                        max_steps=old_policy.vocab.max_steps,
                        seed=derive(grpo_cfg.seed, "iter", it, "chain", g),
                    ),
                )
                for g in range(grpo_cfg.group_size)
            ]
            outcomes = [t.outcome_score for t in trajs]
            drops = 0
            if mode == "chain+process":
                rewards = []
                for t in trajs:
                    seq = prm.score(task, t)
                    dm = drop_moment(reasoning_step_scores(t, seq), shaping_cfg.rho)
                    drops += int(dm.delta >= shaping_cfg.rho)
                    rewards.append(shaped_reward(t, seq, shaping_cfg))
            else:
                rewards = list(outcomes)
            advs = vanilla_grpo_advantages(rewards)
            spans = [(t.tokens(), 0, token_count(t), float(a)) for t, a in zip(trajs, advs)]
            loss = 0.0
            for _ in range(grpo_cfg.inner_epochs):
                loss, grad, _rep = clipped_surrogate(policy, old_policy, task, spans, grpo_cfg.epsilon)
                if optimizer is not None:
                    optimizer.step(policy.theta, grad)
                else:
                    policy.theta -= grpo_cfg.lr * grad
            mean_len = float(np.mean([token_count(t) for t in trajs]))
            drop_rate = drops / len(trajs)
            mean_reward = float(np.mean(rewards))
            mean_outcome = float(np.mean(outcomes))
        else:
            iter_tree_cfg = TreeConfig(
                branch_n=tree_cfg.branch_n,
                rollouts_t=tree_cfg.rollouts_t,
                rounds_k=tree_cfg.rounds_k,
                temperature=tree_cfg.temperature,
                seed=derive(grpo_cfg.seed, "iter", it, "tree"),
                min_prefix_tokens=tree_cfg.min_prefix_tokens,
                top_p=tree_cfg.top_p,
                rescore_each_round=tree_cfg.rescore_each_round,
                entropy_unit=tree_cfg.entropy_unit,
            )
            tree = build_tree(old_policy, task, iter_tree_cfg)
            leaf_ids = sorted(tree.leaf_ids())
            leaf_trajs = {l: tree.nodes[l].leaf_trajectory for l in leaf_ids}
            outcomes = [leaf_trajs[l].outcome_score for l in leaf_ids]
            drops = 0
            rewards_map: dict[str, float] = {}
            for l in leaf_ids:
                t = leaf_trajs[l]
                if mode == "tree":
                    rewards_map[l] = t.outcome_score
                elif mode == "tree+process":
                    seq = prm.score(task, t)
                    dm = drop_moment(reasoning_step_scores(t, seq), shaping_cfg.rho)
                    drops += int(dm.delta >= shaping_cfg.rho)
                    rewards_map[l] = shaped_reward(t, seq, shaping_cfg)
                else:  # tree+avg-score: outcome plus mean reasoning-token score
                    seq = prm.score(task, t)
                    mean_score = _mean_reasoning_token_score(t, seq)
                    dm = drop_moment(reasoning_step_scores(t, seq), shaping_cfg.rho)
                    drops += int(dm.delta >= shaping_cfg.rho)
                    rewards_map[l] = t.outcome_score + mean_score
            advs = tree_advantages(tree, rewards_map)
            loss = 0.0
            for _ in range(grpo_cfg.inner_epochs):
                loss, grad, _rep = tree_grpo_loss(policy, old_policy, task, tree, advs, grpo_cfg)
                if optimizer is not None:
                    optimizer.step(policy.theta, grad)
                else:
                    policy.theta -= grpo_cfg.lr * grad
            mean_len = float(np.mean([token_count(leaf_trajs[l]) for l in leaf_ids]))
            drop_rate = drops / max(len(leaf_ids), 1)
            mean_reward = float(np.mean(list(rewards_map.values())))
            mean_outcome = float(np.mean(outcomes))
        entry = {
            "iter": it,
            "mean_reward": mean_reward,
            "mean_outcome": mean_outcome,
            "mean_len": mean_len,
            "drop_rate": drop_rate,
            "loss": float(loss),
        }
        metrics.append(entry)
        if on_iteration is not None:
            on_iteration(entry)
    return policy, metrics

"""Token-level process reward models.

Three implementations of one contract (score a trajectory, get one
correctness probability per token):

* ``TinyPrm`` — a learnable linear scorer over hand-crafted per-token
  features (claim verdicts against the scene, poisoned-prefix state, token
  and step kinds) trained with a masked binary cross-entropy averaged over
  the full sequence length;
* ``OraclePrm`` — the environment-aware ground truth: tokens score 1.0 up to
  the first step whose claim contradicts the scene, 0.0 from that step on;
* a remote client (see treealign.remote) speaking the HTTP wire protocol.

Step scores are per-step aggregates of token scores (mean by default,
min-pooling available).
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .core import AttrClaim, BoxClaim, CountClaim, StepKind, Trajectory, compute_iou, token_count
from .mc_labeler import LabeledSample
from .seeds import derive
from .toy_env import Task, target_object


class PrmFault(RuntimeError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class NoDataError(ValueError):
    pass


@dataclass(frozen=True)
class PRMScoreSequence:
    """Per-token correctness probabilities plus derived per-step aggregates."""

    token_scores: tuple[float, ...]
    step_scores: tuple[float, ...]

    @staticmethod
    def from_trajectory(t: Trajectory, token_scores: Sequence[float], pooling: str = "mean") -> "PRMScoreSequence":
        scores = tuple(float(x) for x in token_scores)
        if len(scores) != token_count(t):
            raise PrmFault("LengthMismatch", f"{len(scores)} scores for {token_count(t)} tokens")
        steps: list[float] = []
        offset = 0
        for s in t.steps:
            n = len(s.tokens)
            chunk = scores[offset : offset + n]
            offset += n
            if not chunk:
                steps.append(1.0)
                continue
            steps.append(sum(chunk) / len(chunk) if pooling == "mean" else min(chunk))
        return PRMScoreSequence(scores, tuple(steps))


def enforce_score_contract(t: Trajectory, scores: Sequence[float]) -> None:
    if len(scores) != token_count(t):
        raise PrmFault("LengthMismatch", f"{len(scores)} scores for {token_count(t)} tokens")
    for x in scores:
        if not (0.0 <= x <= 1.0) or not math.isfinite(x):
            raise PrmFault("ScoreOutOfRange", f"score {x}")


@runtime_checkable
class PrmInterface(Protocol):
    def score(self, task: Task, t: Trajectory) -> PRMScoreSequence: ...


# ---------------------------------------------------------------------------
# Claim verdicts against the scene oracle


def claim_is_true(task: Task, claim) -> bool:
    """Truth of one evidence claim against the scene.

    Box claims are true when some same-class object overlaps at IoU >= 0.5
    (the grounding correctness gate).  Count claims need the exact class
    count.  Attribute claims are judged against the query's unique target
    and are false for count queries, which have no target.
    """
    if isinstance(claim, BoxClaim):
        return any(
            o.class_name == claim.class_name and compute_iou(o.box, claim.box) >= 0.5
            for o in task.scene.objects
        )
    if isinstance(claim, CountClaim):
        true_count = sum(1 for o in task.scene.objects if o.class_name == claim.class_name)
        return claim.count == true_count
    if isinstance(claim, AttrClaim):
        target = target_object(task)
        if target is None:
            return False
        return target.attributes.get(claim.key) == claim.value
    return True


def answer_is_consistent(t: Trajectory) -> bool:
    """Whether the final answer restates the trajectory's own evidence.

    A grounding answer must equal the last claimed box; a count answer must
    equal the last claimed count.  An answer with no supporting claim is a
    faithless guess and counts as inconsistent.
    """
    from .core import AnswerKind

    if t.final_answer is None:
        return False
    last_box = None
    last_count = None
    for s in t.steps:
        if isinstance(s.claim, BoxClaim):
            last_box = s.claim.box
        elif isinstance(s.claim, CountClaim):
            last_count = s.claim.count
    ans = t.final_answer
    if ans.kind == AnswerKind.GROUNDING:
        return last_box is not None and ans.box == last_box
    if ans.kind == AnswerKind.COUNT:
        return last_count is not None and ans.count_value == last_count
    return True


def first_false_step(task: Task, t: Trajectory) -> Optional[int]:
    """Index of the first step whose claim contradicts the scene, or of an
    answer step that contradicts the trajectory's own evidence."""
    for i, s in enumerate(t.steps):
        if s.claim is not None and not claim_is_true(task, s.claim):
            return i
        if s.kind == StepKind.ANSWER and not answer_is_consistent(t):
            return i
    return None


class OraclePrm:
    """Environment-aware verifier: 1.0 until the first inconsistent step, 0.0 after.

    Evidence claims are judged against the scene; the final answer is judged
    against the trajectory's own accumulated evidence (an unsupported or
    contradicting answer scores 0 from the answer step onward).
    """

    def __init__(self, pooling: str = "mean"):
        self.pooling = pooling

    def score(self, task: Task, t: Trajectory) -> PRMScoreSequence:
        poison = first_false_step(task, t)
        scores: list[float] = []
        for i, s in enumerate(t.steps):
            val = 0.0 if (poison is not None and i >= poison) else 1.0
            scores.extend([val] * len(s.tokens))
        enforce_score_contract(t, scores)
        return PRMScoreSequence.from_trajectory(t, scores, self.pooling)


class ConstantPrm:
    """Scores every token with one constant; useful as a null verifier."""

    def __init__(self, value: float = 0.5, pooling: str = "mean"):
        self.value = value
        self.pooling = pooling

    def score(self, task: Task, t: Trajectory) -> PRMScoreSequence:
        scores = [self.value] * token_count(t)
        enforce_score_contract(t, scores)
        return PRMScoreSequence.from_trajectory(t, scores, self.pooling)


# ---------------------------------------------------------------------------
# TinyPrm: linear scorer over hand-crafted token features

_TOKEN_KINDS = ("plan", "see", "count", "attr", "val", "num", "coord", "conclude", "answer")
_STEP_KINDS = (StepKind.PLAN, StepKind.EVIDENCE, StepKind.SYNTHESIS, StepKind.ANSWER)

# feature vector layout
_F_BIAS = 0
_F_TOKEN_KIND = 1  # 9 entries
_F_STEP_KIND = _F_TOKEN_KIND + len(_TOKEN_KINDS)  # 4 entries
_F_PRIOR_FALSE = _F_STEP_KIND + len(_STEP_KINDS)
_F_BOX_VERDICT = _F_PRIOR_FALSE + 1  # 5 buckets: exact, high, mid, low, zero
_F_COUNT_VERDICT = _F_BOX_VERDICT + 5  # 4 buckets: exact, off1, off2, off3+
_F_ATTR_VERDICT = _F_COUNT_VERDICT + 4  # 2 buckets: match, mismatch
N_FEATURES = _F_ATTR_VERDICT + 2


def _box_verdict_bucket(task: Task, claim: BoxClaim) -> int:
    best = 0.0
    for o in task.scene.objects:
        if o.class_name == claim.class_name:
            best = max(best, compute_iou(o.box, claim.box))
    if best == 1.0:
        return 0
    if best >= 0.5:
        return 1
    if best >= 0.1:
        return 2
    if best > 0.0:
        return 3
    return 4


def _count_verdict_bucket(task: Task, claim: CountClaim) -> int:
    true_count = sum(1 for o in task.scene.objects if o.class_name == claim.class_name)
    return min(abs(claim.count - true_count), 3)


def token_features(task: Task, t: Trajectory) -> np.ndarray:
    """Feature matrix [token_count, N_FEATURES] for a complete trajectory."""
    rows: list[np.ndarray] = []
    prior_false = False
    for s in t.steps:
        feats = np.zeros(N_FEATURES, dtype=np.float64)
        feats[_F_BIAS] = 1.0
        feats[_F_STEP_KIND + _STEP_KINDS.index(s.kind)] = 1.0
        if prior_false:
            feats[_F_PRIOR_FALSE] = 1.0
        if isinstance(s.claim, BoxClaim):
            feats[_F_BOX_VERDICT + _box_verdict_bucket(task, s.claim)] = 1.0
        elif isinstance(s.claim, CountClaim):
            feats[_F_COUNT_VERDICT + _count_verdict_bucket(task, s.claim)] = 1.0
        elif isinstance(s.claim, AttrClaim):
            ok = claim_is_true(task, s.claim)
            feats[_F_ATTR_VERDICT + (0 if ok else 1)] = 1.0
        for tok in s.tokens:
            row = feats.copy()
            kind = tok.split("/", 1)[0]
            if kind in _TOKEN_KINDS:
                row[_F_TOKEN_KIND + _TOKEN_KINDS.index(kind)] = 1.0
            elif tok == "conclude":
                row[_F_TOKEN_KIND + _TOKEN_KINDS.index("conclude")] = 1.0
            rows.append(row)
        if s.claim is not None and not claim_is_true(task, s.claim):
            prior_false = True
    if not rows:
        return np.zeros((0, N_FEATURES), dtype=np.float64)
    return np.stack(rows)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class TinyPrm:
    """Linear logit over token features, squashed through a sigmoid."""

    def __init__(self, phi: Optional[np.ndarray] = None, pooling: str = "mean"):
        if phi is None:
            phi = np.zeros(N_FEATURES, dtype=np.float64)
        self.phi = np.asarray(phi, dtype=np.float64)
        if self.phi.shape != (N_FEATURES,):
            raise ValueError(f"phi must have shape ({N_FEATURES},)")
        self.pooling = pooling

    def token_scores(self, task: Task, t: Trajectory) -> np.ndarray:
        feats = token_features(task, t)
        return _sigmoid(feats @ self.phi)

    def score(self, task: Task, t: Trajectory) -> PRMScoreSequence:
        scores = self.token_scores(task, t)
        enforce_score_contract(t, scores)
        return PRMScoreSequence.from_trajectory(t, scores, self.pooling)

    def to_json(self) -> dict:
        return {
            "feature_spec": {
                "n_features": N_FEATURES,
                "token_kinds": list(_TOKEN_KINDS),
                "step_kinds": [k.value for k in _STEP_KINDS],
            },
            "phi": self.phi.tolist(),
            "pooling": self.pooling,
        }

    def save(self, path, trained_on: str = "", seed: Optional[int] = None) -> None:
        import os

        obj = self.to_json()
        obj["trained_on"] = trained_on
        obj["seed"] = seed
        tmp = str(path) + ".tmp"
        with open(tmp, "w") as f:
            json.dump(obj, f)
        os.replace(tmp, path)

    @staticmethod
    def from_json(obj: dict) -> "TinyPrm":
        return TinyPrm(np.asarray(obj["phi"], dtype=np.float64), obj.get("pooling", "mean"))

    @staticmethod
    def load(path) -> "TinyPrm":
        with open(path) as f:
            return TinyPrm.from_json(json.load(f))


_CLAMP = 1e-12


def prm_loss(prm: TinyPrm, task: Task, sample: LabeledSample, normalize: str = "full_length") -> float:
    """Masked binary cross-entropy, averaged over the full token length.

    ``normalize="mask_sum"`` divides by the number of masked-in tokens instead.
    Predicted probabilities are clamped to [1e-12, 1 - 1e-12] before the log.
    """
    y_hat = prm.token_scores(task, sample.trajectory)
    y = np.asarray(sample.labels, dtype=np.float64)
    m = np.asarray(sample.mask, dtype=np.float64)
    L = len(y)
    if L == 0:
        return 0.0
    p = np.clip(y_hat, _CLAMP, 1.0 - _CLAMP)
    ll = y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
    denom = L if normalize == "full_length" else max(m.sum(), 1.0)
    return float(-(m * ll).sum() / denom)


def grad_prm_loss(prm: TinyPrm, task: Task, sample: LabeledSample, normalize: str = "full_length") -> np.ndarray:
    feats = token_features(task, sample.trajectory)
    y_hat = _sigmoid(feats @ prm.phi)
    y = np.asarray(sample.labels, dtype=np.float64)
    m = np.asarray(sample.mask, dtype=np.float64)
    L = len(y)
    if L == 0:
        return np.zeros_like(prm.phi)
    denom = L if normalize == "full_length" else max(m.sum(), 1.0)
    coeff = m * (y_hat - y) / denom
    return feats.T @ coeff


@dataclass(frozen=True)
class PrmTrainConfig:
    lr: float = 0.5
    epochs: int = 2
    batch: int = 16
    seed: int = 0
    holdout_fraction: float = 0.2
    normalize: str = "full_length"


def auc_score(pos: Sequence[float], neg: Sequence[float]) -> float:
    """Area under the ROC curve via the rank statistic, with tie correction."""
    scores = np.concatenate([np.asarray(pos, float), np.asarray(neg, float)])
    n_pos, n_neg = len(pos), len(neg)
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_ranks = ranks[:n_pos]
    return float((pos_ranks.sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _token_auc(prm: TinyPrm, items: Sequence[tuple[Task, LabeledSample]], kind: Optional[str]) -> float:
    """Token-level AUC of label-1 vs label-0 masked tokens, optionally
    restricted to anchors plus one injected kind."""
    pos: list[float] = []
    neg: list[float] = []
    for task, sample in items:
        if kind is not None and sample.kind not in (kind, "anchor"):
            continue
        scores = prm.token_scores(task, sample.trajectory)
        for s, y, m in zip(scores, sample.labels, sample.mask):
            if not m:
                continue
            (pos if y else neg).append(float(s))
    return auc_score(pos, neg)


def train_prm(
    data: Sequence[tuple[Task, LabeledSample]],
    cfg: PrmTrainConfig = PrmTrainConfig(),
) -> tuple[TinyPrm, dict]:
    """Seeded minibatch SGD on the masked BCE; returns the scorer and a report
    with per-epoch loss and held-out token AUCs (overall and per injected kind)."""
    if not data:
        raise NoDataError("no training samples")
    items = list(data)
    # task-level holdout split so sibling samples never straddle the boundary
    task_ids = sorted({task.task_id for task, _ in items})
    random.Random(derive(cfg.seed, "split")).shuffle(task_ids)
    hold_ids = set(task_ids[: int(len(task_ids) * cfg.holdout_fraction)])
    holdout = [it for it in items if it[0].task_id in hold_ids]
    train = [it for it in items if it[0].task_id not in hold_ids] or items
    prm = TinyPrm()
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = list(range(len(train)))
        random.Random(derive(cfg.seed, "epoch", epoch)).shuffle(order)
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            batch = order[start : start + cfg.batch]
            grad = np.zeros_like(prm.phi)
            for idx in batch:
                task, sample = train[idx]
                total += prm_loss(prm, task, sample, cfg.normalize)
                grad += grad_prm_loss(prm, task, sample, cfg.normalize)
            prm.phi -= cfg.lr * grad / len(batch)
        epoch_losses.append(total / len(train))
    report = {
        "epoch_losses": epoch_losses,
        "n_train": len(train),
        "n_holdout": len(holdout),
        "auc_overall": _token_auc(prm, holdout, None),
        "auc_small_jitter": _token_auc(prm, holdout, "small_jitter"),
        "auc_large_jitter": _token_auc(prm, holdout, "large_jitter"),
        "auc_tamper": _token_auc(prm, holdout, "tamper"),
    }
    return prm, report

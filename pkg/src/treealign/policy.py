"""Token-policy contract and a small trainable softmax policy.

A policy maps (task, token prefix) to a probability distribution over the
full vocabulary.  The toy policy conditions on a hand-crafted discrete
feature of the grammar position (query kind, position slot, and a percept
summarizing what the evidence so far supports) instead of a neural encoder,
so gradients are exact and the whole state space is enumerable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from . import toy_env
from .core import Step, Trajectory
from .seeds import derive
from .vocab import (
    GrammarCursor,
    N_SLOTS,
    SLOT_ANS_NUM,
    SLOT_ANS_X0,
    SLOT_ATTR_VAL,
    SLOT_BODY,
    SLOT_CNT_NUM,
    SLOT_PLAN,
    SLOT_SEE_X0,
    TaskVocabulary,
    replay,
)


class PolicyFault(RuntimeError):
    """A policy produced an invalid distribution or the transport failed.

    ``reason`` is a short machine-readable code; ``retryable``/``attempts``
    carry transport retry metadata for remote policies.
    """

    def __init__(self, reason: str, detail: str = "", retryable: bool = False, attempts: int = 1):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason
        self.retryable = retryable
        self.attempts = attempts


class VocabularyError(ValueError):
    """A trajectory token is not in the policy's vocabulary."""


@runtime_checkable
class PolicyInterface(Protocol):
    vocab: TaskVocabulary

    def next_distribution(self, task, prefix_tokens: Sequence[str]) -> np.ndarray:
        """Probability vector over the full vocabulary at this prefix."""
        ...


def check_distribution(probs: np.ndarray, size: int, tol: float = 1e-6) -> None:
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (size,):
        raise PolicyFault("WrongLength", f"expected {size} probabilities, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise PolicyFault("NonFinite")
    if np.any(probs < 0):
        raise PolicyFault("NonDistribution", "negative probability")
    if abs(float(probs.sum()) - 1.0) > tol:
        raise PolicyFault("NonDistribution", f"sum {probs.sum():.9f} != 1")


@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    max_steps: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")


# ---------------------------------------------------------------------------
# Feature map


PERCEPTS = 40  # generous upper bound over all per-slot percept ranges


def _class_index(vocab: TaskVocabulary, name: str) -> int:
    return vocab.classes.index(name)


def feature_state(cursor: GrammarCursor) -> tuple[int, int]:
    """(slot, percept) of the next token position.

    The percept is slot-specific: the query kind at the plan slot; a
    progress state crossed with the queried class at body slots; the
    looked-at object's true coordinate at evidence box slots; the number of
    verified sightings at count-claim slots; the query's attribute value at
    attribute slots; and the last claimed value at answer slots (sentinel
    when there is no prior claim to copy).
    """
    v = cursor.vocab
    task = cursor.task
    slot = cursor.slot()
    C = len(v.classes)
    coord_sentinel = max(v.width, v.height) + 1
    count_sentinel = v.count_max + 1

    if slot == SLOT_PLAN:
        return slot, 0 if task.query.kind == "count" else 1
    if slot == SLOT_BODY:
        c = _class_index(v, task.query.class_name)
        if task.query.kind == "count":
            if cursor._next_object_of(task.query.class_name) is not None:
                s = 0
            elif cursor.last_count_claim is None:
                s = 1
            elif not cursor.synthesized:
                s = 2
            else:
                s = 3
            return slot, s * C + c
        if cursor.attr_claim is None:
            s = 0
        elif cursor.last_box_claim is None:
            s = 1
        elif not cursor.synthesized:
            s = 2
        else:
            s = 3
        return slot, 4 * C + s * C + c
    if SLOT_SEE_X0 <= slot <= SLOT_SEE_X0 + 3:
        idx = cursor.pending_target
        if idx is None:
            return slot, coord_sentinel
        box = task.scene.objects[idx].box
        coord = (box.x_min, box.y_min, box.x_max, box.y_max)[slot - SLOT_SEE_X0]
        return slot, coord
    if slot == SLOT_CNT_NUM:
        seen = len(cursor.seen_objects.get(cursor.cur_class, ()))
        return slot, min(seen, v.count_max)
    if slot == SLOT_ATTR_VAL:
        if task.query.kind == "ground":
            val = task.query.attr_filter.get(v.attr_key)
            if val in v.attr_values:
                return slot, v.attr_values.index(val)
        return slot, len(v.attr_values)
    if slot == SLOT_ANS_NUM:
        if cursor.last_count_claim is None:
            return slot, count_sentinel
        return slot, min(cursor.last_count_claim.count, v.count_max)
    if SLOT_ANS_X0 <= slot <= SLOT_ANS_X0 + 3:
        if cursor.last_box_claim is None:
            return slot, coord_sentinel
        b = cursor.last_box_claim
        coord = (b.x_min, b.y_min, b.x_max, b.y_max)[slot - SLOT_ANS_X0]
        return slot, coord
    raise RuntimeError(f"unhandled slot {slot}")


def state_row(slot: int, percept: int) -> int:
    return slot * PERCEPTS + percept


N_STATES = N_SLOTS * PERCEPTS


# ---------------------------------------------------------------------------
# Toy policy


class ToySoftmaxPolicy:
    """Tabular softmax policy over (feature state, token) logits.

    The next-token distribution is the softmax of the current state's logit
    row restricted to grammar-legal tokens; illegal tokens get probability
    exactly zero.
    """

    def __init__(self, vocab: TaskVocabulary, theta: Optional[np.ndarray] = None):
        self.vocab = vocab
        self._layout = vocab.layout()
        self._tokens = self._layout.tokens
        self._ids = self._layout.ids
        n = len(self._tokens)
        if theta is None:
            theta = np.zeros((N_STATES, n), dtype=np.float64)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (N_STATES, n):
            raise ValueError(f"theta must have shape {(N_STATES, n)}, got {theta.shape}")
        self.theta = theta

    @staticmethod
    def init(vocab: TaskVocabulary, seed: int = 0, scale: float = 0.0) -> "ToySoftmaxPolicy":
        theta = np.zeros((N_STATES, vocab.size()), dtype=np.float64)
        if scale > 0:
            rng = np.random.Generator(np.random.PCG64(seed))
            theta += scale * rng.standard_normal(theta.shape)
        return ToySoftmaxPolicy(vocab, theta)

    def clone(self) -> "ToySoftmaxPolicy":
        return ToySoftmaxPolicy(self.vocab, self.theta.copy())

    def token_id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"token {token!r} not in vocabulary") from None

    def _legal_ids(self, cursor: GrammarCursor) -> np.ndarray:
        return np.asarray(cursor.legal_ids(self._layout), dtype=np.int64)

    def legal_distribution(self, cursor: GrammarCursor) -> tuple[np.ndarray, np.ndarray]:
        """(legal token ids, probabilities over them); zero mass elsewhere."""
        slot, percept = feature_state(cursor)
        row = self.theta[state_row(slot, percept)]
        legal = self._legal_ids(cursor)
        logits = row[legal]
        logits = logits - logits.max()
        w = np.exp(logits)
        w /= w.sum()
        return legal, w

    def distribution_from_cursor(self, cursor: GrammarCursor) -> np.ndarray:
        legal, w = self.legal_distribution(cursor)
        probs = np.zeros(len(self._tokens), dtype=np.float64)
        probs[legal] = w
        return probs

    def next_distribution(self, task, prefix_tokens: Sequence[str]) -> np.ndarray:
        cursor = replay(task, self.vocab, prefix_tokens)
        if cursor.done():
            raise ValueError("prefix is already a complete trajectory")
        return self.distribution_from_cursor(cursor)

    def to_json(self) -> dict:
        return {
            "kind": "toy_softmax",
            "vocab": self.vocab.to_json(),
            "theta": self.theta.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "ToySoftmaxPolicy":
        vocab = TaskVocabulary.from_json(obj["vocab"])
        return ToySoftmaxPolicy(vocab, np.asarray(obj["theta"], dtype=np.float64))

    def save(self, path) -> None:
        import os

        tmp = str(path) + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_json(), f)
        os.replace(tmp, path)

    @staticmethod
    def load(path) -> "ToySoftmaxPolicy":
        with open(path) as f:
            return ToySoftmaxPolicy.from_json(json.load(f))


# ---------------------------------------------------------------------------
# Sampling


def _apply_temperature(probs: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return probs
    out = np.zeros_like(probs)
    pos = probs > 0
    logs = np.log(probs[pos]) / temperature
    logs -= logs.max()
    w = np.exp(logs)
    out[pos] = w / w.sum()
    return out


def _apply_top_p(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest prefix of tokens (by descending probability, ties by
    token index) whose cumulative mass reaches top_p, renormalized."""
    if top_p >= 1.0:
        return probs
    order = np.lexsort((np.arange(len(probs)), -probs))  # prob desc, ties by index
    cum = 0.0
    keep = []
    for idx in order:
        if probs[idx] <= 0:
            break
        keep.append(idx)
        cum += probs[idx]
        if cum >= top_p:
            break
    out = np.zeros_like(probs)
    kept = probs[keep]
    out[keep] = kept / kept.sum()
    return out


def _sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF sample over a probability vector (deterministic given the rng state)."""
    u = rng.random()
    cum = np.cumsum(probs)
    i = int(np.searchsorted(cum, u * cum[-1], side="right"))
    i = min(i, len(probs) - 1)
    while probs[i] <= 0:  # guard against landing on a zero entry at the tail
        i -= 1
    return i


def rollout_tokens(
    policy: PolicyInterface,
    task,
    prefix_tokens: Sequence[str],
    cfg: SamplingConfig,
    rng: Optional[np.random.Generator] = None,
    prefix_logprobs: Optional[Sequence[float]] = None,
) -> Trajectory:
    """Extend a token prefix to a complete trajectory under the policy.

    Sampling is constrained to grammar-legal tokens (renormalized), with
    temperature and top-p applied after the legality mask; the recorded
    log-probs are the policy's own raw probabilities of the chosen tokens.
    When the prefix's log-probs are not supplied they are recomputed from
    the policy.
    """
    vocab = policy.vocab
    lay = vocab.layout()
    token_list = lay.tokens
    ids = lay.ids
    fast = isinstance(policy, ToySoftmaxPolicy)
    cursor = GrammarCursor(task, vocab, max_steps=cfg.max_steps)
    tokens: list[str] = []
    logprobs: list[float] = []

    for i, tok in enumerate(prefix_tokens):
        if prefix_logprobs is not None:
            logprobs.append(float(prefix_logprobs[i]))
        else:
            if fast:
                dist = policy.distribution_from_cursor(cursor)
            else:
                dist = np.asarray(policy.next_distribution(task, tokens), dtype=float)
                check_distribution(dist, vocab.size())
            p = float(dist[ids[tok]])
            logprobs.append(math.log(p) if p > 0 else float("-inf"))
        tokens.append(tok)
        cursor.advance(tok)

    if rng is None:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
    while not cursor.done():
        if fast:
            legal_ids, probs = policy.legal_distribution(cursor)
        else:
            raw = np.asarray(policy.next_distribution(task, tokens), dtype=float)
            check_distribution(raw, vocab.size())
            legal = cursor.legal_tokens()
            if not legal:
                raise PolicyFault("DegenerateTask", "no legal continuation")
            legal_ids = np.asarray([ids[t] for t in legal], dtype=np.int64)
            probs = raw[legal_ids]
            total = probs.sum()
            if total <= 0:
                raise PolicyFault("ZeroMassOnLegal", "policy puts no mass on any legal token")
            probs = probs / total
        sampled = _apply_top_p(_apply_temperature(probs, cfg.temperature), cfg.top_p)
        k = _sample_index(sampled, rng)
        tok_id = int(legal_ids[k])
        tok = token_list[tok_id]
        p_raw = float(probs[k]) if fast else float(raw[tok_id])
        logprobs.append(math.log(p_raw) if p_raw > 0 else float("-inf"))
        tokens.append(tok)
        cursor.advance(tok)
    base = cursor.finish()
    traj = Trajectory(
        task_id=base.task_id,
        steps=base.steps,
        token_logprobs=tuple(logprobs),
        final_answer=base.final_answer,
    )
    return Trajectory(
        task_id=traj.task_id,
        steps=traj.steps,
        token_logprobs=traj.token_logprobs,
        final_answer=traj.final_answer,
        outcome_score=toy_env.outcome_score(traj, task),
    )


def rollout(policy: PolicyInterface, task, prefix: Sequence[Step], cfg: SamplingConfig) -> Trajectory:
    """Complete a partial trajectory given as a step list (see rollout_tokens)."""
    prefix_tokens: list[str] = []
    for s in prefix:
        prefix_tokens.extend(s.tokens)
    return rollout_tokens(policy, task, prefix_tokens, cfg)


def entropy_nats(probs: np.ndarray) -> float:
    p = probs[probs > 0]
    return float(-(p * np.log(p)).sum())


def position_entropies(policy: PolicyInterface, task, t: Trajectory) -> list[float]:
    """Shannon entropy (nats) of the next-token distribution at every token position.

    Entry i is the entropy at prefix length i, computed over the full
    vocabulary distribution the policy returns (before any truncation).
    """
    tokens = t.tokens()
    out: list[float] = []
    if isinstance(policy, ToySoftmaxPolicy):
        cursor = GrammarCursor(task, policy.vocab)
        for tok in tokens:
            _, w = policy.legal_distribution(cursor)
            out.append(entropy_nats(w))
            cursor.advance(tok)
        return out
    prefix: list[str] = []
    for tok in tokens:
        probs = np.asarray(policy.next_distribution(task, prefix), dtype=float)
        check_distribution(probs, policy.vocab.size())
        out.append(entropy_nats(probs))
        prefix.append(tok)
    return out


def logprob_of(policy: PolicyInterface, task, t: Trajectory) -> float:
    """Sum of per-token natural log-probabilities of the trajectory under the policy."""
    total = 0.0
    tokens = t.tokens()
    if isinstance(policy, ToySoftmaxPolicy):
        cursor = GrammarCursor(task, policy.vocab)
        for tok in tokens:
            probs = policy.distribution_from_cursor(cursor)
            p = float(probs[policy.token_id(tok)])
            total += math.log(p) if p > 0 else float("-inf")
            cursor.advance(tok)
        return total
    known = policy.vocab.token_set()
    ids = policy.vocab.token_ids()
    prefix: list[str] = []
    for tok in tokens:
        if tok not in known:
            raise VocabularyError(f"token {tok!r} not in vocabulary")
        probs = np.asarray(policy.next_distribution(task, prefix), dtype=float)
        p = float(probs[ids[tok]])
        total += math.log(p) if p > 0 else float("-inf")
        prefix.append(tok)
    return total


def grad_logprob(policy: ToySoftmaxPolicy, task, t: Trajectory) -> np.ndarray:
    """Exact gradient of logprob_of with respect to the policy's logit table."""
    grad = np.zeros_like(policy.theta)
    cursor = GrammarCursor(task, policy.vocab)
    for tok in t.tokens():
        slot, percept = feature_state(cursor)
        row = state_row(slot, percept)
        legal = policy._legal_ids(cursor)
        logits = policy.theta[row, legal]
        logits = logits - logits.max()
        w = np.exp(logits)
        w /= w.sum()
        tid = policy.token_id(tok)
        grad[row, legal] -= w
        grad[row, tid] += 1.0
        cursor.advance(tok)
    return grad


# ---------------------------------------------------------------------------
# Supervised fine-tuning on oracle trajectories


@dataclass(frozen=True)
class SftConfig:
    lr: float = 0.1
    steps: int = 200
    seed: int = 0
    batch: Optional[int] = None  # None: full-batch gradient descent


def sft_loss_and_grad(policy: ToySoftmaxPolicy, pairs: Sequence[tuple]) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over (task, trajectory) pairs, with gradient."""
    total = 0.0
    grad = np.zeros_like(policy.theta)
    for task, traj in pairs:
        total -= logprob_of(policy, task, traj)
        grad -= grad_logprob(policy, task, traj)
    n = max(len(pairs), 1)
    return total / n, grad / n


def train_sft(policy: ToySoftmaxPolicy, pairs: Sequence[tuple], cfg: SftConfig) -> dict:
    """Minimize the supervised loss; returns a per-step loss report.

    Full-batch gradient descent by default.  With ``batch`` set, each step
    updates on the next minibatch of a seeded shuffled cycle, which trains
    rarely visited feature rows at full strength instead of diluting them by
    their corpus frequency.
    """
    losses: list[float] = []
    if cfg.batch is None:
        for _ in range(cfg.steps):
            loss, grad = sft_loss_and_grad(policy, pairs)
            losses.append(loss)
            policy.theta -= cfg.lr * grad
    else:
        import random as _random

        order: list[int] = []
        rng = _random.Random(derive(cfg.seed, "sft_shuffle"))
        cursor = 0
        for _ in range(cfg.steps):
            batch = []
            for _ in range(cfg.batch):
                if cursor >= len(order):
                    order = list(range(len(pairs)))
                    rng.shuffle(order)
                    cursor = 0
                batch.append(pairs[order[cursor]])
                cursor += 1
            loss, grad = sft_loss_and_grad(policy, batch)
            losses.append(loss)
            policy.theta -= cfg.lr * grad
    final, _ = sft_loss_and_grad(policy, pairs)
    losses.append(final)
    return {"losses": losses, "final_loss": final}

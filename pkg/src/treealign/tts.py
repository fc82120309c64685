"""Test-time scaling: spend more inference compute under verifier guidance.

Strategies: greedy decoding, self-consistency (majority vote over sampled
final answers), best-of-N (rank complete samples by mean token verifier
score), and step-synchronous beam search (the verifier prunes partial
trajectories by their mean completed-step score, keeping the top half of
the beam for expansion).  All ties break deterministically so result tables
are bitwise reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import toy_env
from .core import Answer, Trajectory, token_count
from .policy import PolicyInterface, SamplingConfig, rollout_tokens
from .prm import PrmInterface, PRMScoreSequence
from .seeds import derive
from .vocab import GrammarCursor

STRATEGY_GREEDY = "greedy"
STRATEGY_SELF_CONSISTENCY = "sc"
STRATEGY_BEST_OF_N = "bon"
STRATEGY_BEAM = "beam"
STRATEGIES = (STRATEGY_GREEDY, STRATEGY_SELF_CONSISTENCY, STRATEGY_BEST_OF_N, STRATEGY_BEAM)


@dataclass(frozen=True)
class TtsConfig:
    strategy: str = STRATEGY_BEST_OF_N
    budget_n: int = 8
    temperature: float = 1.0
    top_p: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.budget_n < 1:
            raise ValueError("budget_n must be >= 1")
        if self.strategy == STRATEGY_BEAM and (self.budget_n < 2 or self.budget_n % 2):
            raise ValueError("beam search needs an even budget >= 2")


def _sample_cfg(policy: PolicyInterface, cfg: TtsConfig, seed: int) -> SamplingConfig:
    return SamplingConfig(
        temperature=cfg.temperature,
        top_p=cfg.top_p,
        max_steps=policy.vocab.max_steps,
        seed=seed,
    )


def greedy_decode(policy: PolicyInterface, task) -> Trajectory:
    cfg = SamplingConfig(temperature=1e-9, top_p=1.0, max_steps=policy.vocab.max_steps, seed=0)
    return rollout_tokens(policy, task, [], cfg)


def sample_candidates(policy: PolicyInterface, task, cfg: TtsConfig) -> list[Trajectory]:
    return [
        rollout_tokens(policy, task, [], _sample_cfg(policy, cfg, derive(cfg.seed, "cand", i)))
        for i in range(cfg.budget_n)
    ]


def _mean_logprob(t: Trajectory) -> float:
    n = token_count(t)
    return sum(t.token_logprobs) / n if n else 0.0


def self_consistency(policy: PolicyInterface, task, cfg: TtsConfig) -> Answer:
    """Modal final answer over N samples; ties break to the answer whose
    supporters have the highest mean policy log-prob, then first occurrence."""
    candidates = sample_candidates(policy, task, cfg)
    groups: dict = {}
    order: list = []
    for i, t in enumerate(candidates):
        key = t.final_answer
        if key not in groups:
            groups[key] = []
            order.append(key)
        groups[key].append(i)
    best_key = None
    best_rank = None
    for key in order:
        members = groups[key]
        rank = (
            -len(members),
            -max(_mean_logprob(candidates[i]) for i in members),
            min(members),
        )
        if best_rank is None or rank < best_rank:
            best_rank = rank
            best_key = key
    return best_key


@dataclass(frozen=True)
class ScoredCandidate:
    index: int
    trajectory: Trajectory
    mean_token_score: float
    mean_reasoning_score: float

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "traj": self.trajectory.to_json(),
            "mean_token_score": self.mean_token_score,
            "mean_reasoning_score": self.mean_reasoning_score,
        }


@dataclass(frozen=True)
class BestOfNResult:
    chosen: Trajectory
    candidates: tuple[ScoredCandidate, ...]

    def to_json(self) -> dict:
        return {"chosen": self.chosen.to_json(), "candidates": [c.to_json() for c in self.candidates]}


def _reasoning_mean(t: Trajectory, seq: PRMScoreSequence) -> float:
    """Mean token score over non-answer steps (outcome-agnostic portion)."""
    vals: list[float] = []
    offset = 0
    for s in t.steps:
        n = len(s.tokens)
        if s.kind.value != "answer":
            vals.extend(seq.token_scores[offset : offset + n])
        offset += n
    return sum(vals) / len(vals) if vals else 0.0


def best_of_n(policy: PolicyInterface, prm: PrmInterface, task, cfg: TtsConfig) -> BestOfNResult:
    """Sample N trajectories and return the one with the highest mean token
    verifier score.  Ties break to the higher mean over reasoning tokens
    only, then to the lower candidate index.  The full scored slate is
    returned so rankings can be re-checked from the output alone."""
    candidates = sample_candidates(policy, task, cfg)
    scored: list[ScoredCandidate] = []
    for i, t in enumerate(candidates):
        seq = prm.score(task, t)
        mean_tok = sum(seq.token_scores) / len(seq.token_scores) if seq.token_scores else 0.0
        scored.append(ScoredCandidate(i, t, mean_tok, _reasoning_mean(t, seq)))
    winner = min(scored, key=lambda c: (-c.mean_token_score, -c.mean_reasoning_score, c.index))
    return BestOfNResult(winner.trajectory, tuple(scored))


@dataclass
class _BeamItem:
    tokens: list[str]
    logprobs: list[float]
    done: bool
    score: float  # mean of completed step scores so far
    order: tuple  # deterministic lineage key


def _extend_one_step(policy, task, item: _BeamItem, seed: int, cfg: TtsConfig) -> _BeamItem:
    """Sample tokens until exactly one more step completes (or the trajectory ends)."""
    vocab = policy.vocab
    cursor = GrammarCursor(task, vocab)
    for tok in item.tokens:
        cursor.advance(tok)
    steps_before = cursor.steps_done
    rng = np.random.Generator(np.random.PCG64(seed))
    samp = _sample_cfg(policy, cfg, seed)
    # reuse rollout machinery token by token via a bounded manual loop
    from .policy import ToySoftmaxPolicy, _apply_temperature, _apply_top_p, _sample_index, check_distribution

    lay = vocab.layout()
    tokens = list(item.tokens)
    logprobs = list(item.logprobs)
    fast = isinstance(policy, ToySoftmaxPolicy)
    while not cursor.done() and cursor.steps_done == steps_before:
        if fast:
            legal_ids, probs = policy.legal_distribution(cursor)
        else:
            raw = np.asarray(policy.next_distribution(task, tokens), dtype=float)
            check_distribution(raw, vocab.size())
            legal = cursor.legal_tokens()
            legal_ids = np.asarray([lay.ids[t] for t in legal], dtype=np.int64)
            probs = raw[legal_ids]
            probs = probs / probs.sum()
        sampled = _apply_top_p(_apply_temperature(probs, samp.temperature), samp.top_p)
        k = _sample_index(sampled, rng)
        tok = lay.tokens[int(legal_ids[k])]
        logprobs.append(math.log(float(probs[k])) if probs[k] > 0 else float("-inf"))
        tokens.append(tok)
        cursor.advance(tok)
    return _BeamItem(tokens, logprobs, cursor.done(), 0.0, item.order)


def _partial_score(prm: PrmInterface, task, policy, item: _BeamItem) -> float:
    """Mean of completed step scores to date (length-neutral partial ranking)."""
    t = _partial_trajectory(policy, task, item)
    if not t.steps:
        return 0.0
    seq = prm.score(task, t)
    return sum(seq.step_scores) / len(seq.step_scores)


def _partial_trajectory(policy, task, item: _BeamItem) -> Trajectory:
    cursor = GrammarCursor(task, policy.vocab)
    for tok in item.tokens:
        cursor.advance(tok)
    # trajectory over *completed* steps only
    steps = tuple(cursor.steps)
    n = sum(len(s.tokens) for s in steps)
    return Trajectory(
        task_id=task.task_id,
        steps=steps,
        token_logprobs=tuple(item.logprobs[:n]),
        final_answer=cursor.final_answer,
    )


def beam_search(policy: PolicyInterface, prm: PrmInterface, task, cfg: TtsConfig) -> Trajectory:
    """Step-synchronous beam search with the verifier as a step-wise pruner.

    The live beam holds N partial trajectories; the top M = N/2 by mean
    completed-step score survive to expansion, each into N/M continuations.
    Finished trajectories retire into a finals pool; the finished trajectory
    with the highest final mean step score wins (first by lineage on ties).
    """
    n = cfg.budget_n
    m = n // 2
    survivors = [_BeamItem([], [], False, 0.0, ())]
    finals: list[tuple[float, tuple, Trajectory]] = []
    max_rounds = policy.vocab.max_steps + 2
    for rnd in range(max_rounds):
        if not survivors:
            break
        fan = max(2, n // len(survivors))
        expanded: list[_BeamItem] = []
        for si, item in enumerate(survivors):
            for j in range(fan):
                child = _extend_one_step(
                    policy, task, item, derive(cfg.seed, "beam", rnd, si, j), cfg
                )
                child.order = item.order + (si, j)
                expanded.append(child)
        for item in expanded:
            item.score = _partial_score(prm, task, policy, item)
        done_items = [it for it in expanded if it.done]
        for it in done_items:
            traj = _partial_trajectory(policy, task, it)
            traj = Trajectory(
                task_id=traj.task_id,
                steps=traj.steps,
                token_logprobs=traj.token_logprobs,
                final_answer=traj.final_answer,
                outcome_score=toy_env.outcome_score(traj, task),
            )
            finals.append((it.score, it.order, traj))
        live = [it for it in expanded if not it.done]
        live.sort(key=lambda it: (-it.score, it.order))
        survivors = live[:m]
    if not finals:
        raise RuntimeError("beam search produced no finished trajectory")
    finals.sort(key=lambda f: (-f[0], f[1]))
    return finals[0][2]


def run_strategy(policy, prm: Optional[PrmInterface], task, cfg: TtsConfig) -> Trajectory:
    """Run one strategy and return the chosen complete trajectory."""
    if cfg.strategy == STRATEGY_GREEDY:
        return greedy_decode(policy, task)
    if cfg.strategy == STRATEGY_SELF_CONSISTENCY:
        answer = self_consistency(policy, task, cfg)
        candidates = sample_candidates(policy, task, cfg)
        for t in candidates:
            if t.final_answer == answer:
                return t
        return candidates[0]
    if cfg.strategy == STRATEGY_BEST_OF_N:
        if prm is None:
            raise ValueError("best-of-n needs a verifier")
        return best_of_n(policy, prm, task, cfg).chosen
    if prm is None:
        raise ValueError("beam search needs a verifier")
    return beam_search(policy, prm, task, cfg)


def scaling_curve(
    policy,
    prm: Optional[PrmInterface],
    tasks: Sequence,
    strategy: str,
    budgets: Sequence[int],
    seeds: Sequence[int],
    temperature: float = 1.0,
    top_p: float = 0.9,
) -> dict:
    """Mean correctness (exact count match / IoU >= 0.5) per budget, with the
    standard error over seeds.  Emits a plot-ready dict."""
    if not budgets or not tasks:
        raise ValueError("budgets and tasks must be nonempty")
    rows = []
    for n in budgets:
        per_seed: list[float] = []
        for seed in seeds:
            correct = 0
            for task in tasks:
                cfg = TtsConfig(
                    strategy=strategy,
                    budget_n=n,
                    temperature=temperature,
                    top_p=top_p,
                    seed=derive(seed, "tts", task.task_id),
                )
                chosen = run_strategy(policy, prm, task, cfg)
                correct += int(toy_env.is_correct(chosen, task))
            per_seed.append(correct / len(tasks))
        mean = float(np.mean(per_seed))
        stderr = float(np.std(per_seed, ddof=1) / math.sqrt(len(per_seed))) if len(per_seed) > 1 else 0.0
        rows.append({"n": int(n), "mean": mean, "stderr": stderr, "per_seed": per_seed})
    return {"strategy": strategy, "budgets": rows}

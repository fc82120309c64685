"""HTTP clients for remote policies and reward models, plus the protocol
conformance suite used against any server that implements the wire format.

Wire protocol (JSON bodies, all numbers finite doubles):

    POST /v1/policy/next     {task, prefix_tokens}                          -> {probs: [..]}
    POST /v1/policy/rollout  {task, prefix_tokens, temperature, top_p, seed} -> trajectory JSON
    POST /v1/prm/score       {task, trajectory}                             -> {token_scores: [..]}
    GET  /v1/health                                                          -> {status, model}

Probabilities must sum to 1 within 1e-6 and scores must lie in [0, 1] with
one entry per token, or the client rejects the response.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import requests

from .core import Trajectory, token_count
from .policy import PolicyFault, PolicyInterface, check_distribution
from .prm import PrmFault, PRMScoreSequence, enforce_score_contract
from .toy_env import Task
from .vocab import TaskVocabulary

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 2


def _post(url: str, body: dict, timeout: float, retries: int, fault):
    last = None
    for attempt in range(1, retries + 2):
        try:
            resp = requests.post(url, json=body, timeout=timeout)
        except requests.RequestException as e:
            last = fault("Transport", str(e), retryable=True, attempts=attempt)
            continue
        if resp.status_code != 200:
            last = fault("HttpStatus", f"{resp.status_code}: {resp.text[:200]}",
                         retryable=resp.status_code >= 500, attempts=attempt)
            if resp.status_code < 500:
                raise last
            continue
        try:
            return resp.json()
        except ValueError as e:
            raise fault("MalformedResponse", str(e), attempts=attempt)
    raise last


def _policy_fault(reason, detail="", retryable=False, attempts=1):
    return PolicyFault(reason, detail, retryable=retryable, attempts=attempts)


def _prm_fault(reason, detail="", retryable=False, attempts=1):
    f = PrmFault(reason, detail)
    f.retryable = retryable
    f.attempts = attempts
    return f


class RemotePolicy:
    """PolicyInterface adapter over the HTTP wire protocol."""

    def __init__(self, endpoint: str, vocab: TaskVocabulary,
                 timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES):
        self.endpoint = endpoint.rstrip("/")
        self.vocab = vocab
        self.timeout = timeout
        self.retries = retries

    def next_distribution(self, task: Task, prefix_tokens: Sequence[str]) -> np.ndarray:
        body = {"task": task.to_json(), "prefix_tokens": list(prefix_tokens)}
        obj = _post(f"{self.endpoint}/v1/policy/next", body, self.timeout, self.retries, _policy_fault)
        if "probs" not in obj:
            raise PolicyFault("MalformedResponse", "missing 'probs'")
        probs = np.asarray(obj["probs"], dtype=float)
        check_distribution(probs, self.vocab.size())
        return probs

    def remote_rollout(self, task: Task, prefix_tokens: Sequence[str],
                       temperature: float = 1.0, top_p: float = 1.0, seed: int = 0) -> Trajectory:
        body = {
            "task": task.to_json(),
            "prefix_tokens": list(prefix_tokens),
            "temperature": temperature,
            "top_p": top_p,
            "seed": seed,
        }
        obj = _post(f"{self.endpoint}/v1/policy/rollout", body, self.timeout, self.retries, _policy_fault)
        try:
            traj = Trajectory.from_json(obj)
        except (KeyError, ValueError, TypeError) as e:
            raise PolicyFault("MalformedResponse", f"bad trajectory: {e}")
        return traj


def remote_policy(endpoint: str, vocab: Optional[TaskVocabulary] = None) -> RemotePolicy:
    return RemotePolicy(endpoint, vocab or TaskVocabulary())


class RemotePrm:
    """PrmInterface adapter over the HTTP wire protocol."""

    def __init__(self, endpoint: str, pooling: str = "mean",
                 timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES):
        self.endpoint = endpoint.rstrip("/")
        self.pooling = pooling
        self.timeout = timeout
        self.retries = retries

    def score(self, task: Task, t: Trajectory) -> PRMScoreSequence:
        body = {"task": task.to_json(), "trajectory": t.to_json()}
        obj = _post(f"{self.endpoint}/v1/prm/score", body, self.timeout, self.retries, _prm_fault)
        if "token_scores" not in obj:
            raise PrmFault("MalformedResponse", "missing 'token_scores'")
        scores = [float(x) for x in obj["token_scores"]]
        enforce_score_contract(t, scores)
        return PRMScoreSequence.from_trajectory(t, scores, self.pooling)


def remote_prm(endpoint: str, pooling: str = "mean") -> RemotePrm:
    return RemotePrm(endpoint, pooling)


def health(endpoint: str, timeout: float = DEFAULT_TIMEOUT) -> dict:
    resp = requests.get(f"{endpoint.rstrip('/')}/v1/health", timeout=timeout)
    resp.raise_for_status()
    return resp.json()


# ---------------------------------------------------------------------------
# Conformance suite


@dataclass
class ConformanceReport:
    checks: list
    passed: bool

    def to_json(self) -> dict:
        return {"passed": self.passed, "checks": self.checks}


def run_conformance(endpoint: str, tasks: Sequence[Task], vocab: TaskVocabulary,
                    prm_trajectories: Optional[Sequence[Trajectory]] = None) -> ConformanceReport:
    """Exercise every endpoint and validate distribution normalization, score
    length/range, rollout validity, and health metadata."""
    checks: list[dict] = []

    def record(name: str, ok: bool, detail: str = ""):
        checks.append({"check": name, "ok": bool(ok), "detail": detail})

    try:
        h = health(endpoint)
        record("health", h.get("status") == "ok", str(h))
    except Exception as e:
        record("health", False, str(e))

    pol = RemotePolicy(endpoint, vocab)
    prm = RemotePrm(endpoint)
    from .core import validate_trajectory

    for i, task in enumerate(tasks):
        try:
            probs = pol.next_distribution(task, [])
            record(f"next[{i}].normalized", abs(float(np.sum(probs)) - 1.0) <= 1e-6)
            record(f"next[{i}].nonnegative", bool(np.all(probs >= 0)))
            record(f"next[{i}].finite", bool(np.all(np.isfinite(probs))))
        except Exception as e:
            record(f"next[{i}]", False, str(e))
        try:
            traj = pol.remote_rollout(task, [], temperature=1.0, top_p=1.0, seed=1000 + i)
            violations = validate_trajectory(traj, vocab)
            record(f"rollout[{i}].valid", not violations, ",".join(violations))
            try:
                seq = prm.score(task, traj)
                n = token_count(traj)
                record(f"score[{i}].length", len(seq.token_scores) == n)
                record(f"score[{i}].range", all(0.0 <= s <= 1.0 for s in seq.token_scores))
            except Exception as e:
                record(f"score[{i}]", False, str(e))
        except Exception as e:
            record(f"rollout[{i}]", False, str(e))
    if prm_trajectories:
        for j, traj in enumerate(prm_trajectories):
            task = next((t for t in tasks if t.task_id == traj.task_id), None)
            if task is None:
                continue
            try:
                seq = prm.score(task, traj)
                record(f"score_fixed[{j}].length", len(seq.token_scores) == token_count(traj))
            except Exception as e:
                record(f"score_fixed[{j}]", False, str(e))
    return ConformanceReport(checks, all(c["ok"] for c in checks))

"""Minimal legality machine for serving well-formed rollouts.

Mirrors the wire contract's trajectory shape: a plan step, evidence steps
(box claims as see + 4 coordinates, count claims, attribute claims), an
optional synthesis marker, and a final answer step; the last step within the
step budget must be the answer, and box coordinates must form a positive-
area in-bounds box.
"""

from __future__ import annotations

from .tokens import VocabSpec


class StepDecoder:
    def __init__(self, spec: VocabSpec, task: dict):
        self.spec = spec
        self.task = task
        self.phase = "plan"
        self.steps_done = 0
        self.coords: list[int] = []
        self.cur_tokens: list[str] = []
        self.steps: list[dict] = []
        self.answer = None

    def done(self) -> bool:
        return self.phase == "done"

    def _answer_only(self) -> bool:
        return self.spec.max_steps - self.steps_done <= 1

    def legal(self) -> list[str]:
        s = self.spec
        if self.phase in ("plan", "body"):
            if self._answer_only():
                return ["answer/count", "answer/ground"]
            if self.phase == "plan":
                return ["plan/count", "plan/ground"]
            out = [f"see/{c}" for c in s.classes]
            out += [f"count/{c}" for c in s.classes]
            out += [f"attr/{s.attr_key}", "conclude", "answer/count", "answer/ground"]
            return out
        if self.phase in ("see", "ans_box"):
            k = len(self.coords)
            if k == 0:
                return [f"coord/{x}" for x in range(s.width)]
            if k == 1:
                return [f"coord/{y}" for y in range(s.height)]
            if k == 2:
                return [f"coord/{x}" for x in range(self.coords[0] + 1, s.width + 1)]
            return [f"coord/{y}" for y in range(self.coords[1] + 1, s.height + 1)]
        if self.phase in ("cnt", "ans_num"):
            return [f"num/{k}" for k in range(s.count_max + 1)]
        if self.phase == "attr":
            return [f"val/{v}" for v in s.attr_values]
        return []

    def advance(self, token: str) -> None:
        kind, _, arg = token.partition("/")
        if self.phase in ("plan", "body"):
            self.cur_tokens = [token]
            if kind == "plan":
                self._close("plan", None)
                self.phase = "body"
            elif kind == "see":
                self.cur_class = arg
                self.coords = []
                self.phase = "see"
            elif kind == "count":
                self.cur_class = arg
                self.phase = "cnt"
            elif kind == "attr":
                self.phase = "attr"
            elif token == "conclude":
                self._close("synthesis", None)
            elif token == "answer/count":
                self.phase = "ans_num"
            elif token == "answer/ground":
                self.coords = []
                self.phase = "ans_box"
            else:
                raise ValueError(f"illegal token {token!r}")
            return
        self.cur_tokens.append(token)
        if self.phase == "see":
            self.coords.append(int(arg))
            if len(self.coords) == 4:
                claim = {"type": "box", "class": self.cur_class, "box": list(self.coords)}
                self._close("evidence", claim)
                self.phase = "body"
        elif self.phase == "cnt":
            claim = {"type": "count", "class": self.cur_class, "count": int(arg)}
            self._close("evidence", claim)
            self.phase = "body"
        elif self.phase == "attr":
            claim = {"type": "attr", "key": self.spec.attr_key, "value": arg}
            self._close("evidence", claim)
            self.phase = "body"
        elif self.phase == "ans_num":
            self.answer = {"kind": "count", "count": int(arg)}
            self._close("answer", None)
            self.phase = "done"
        elif self.phase == "ans_box":
            self.coords.append(int(arg))
            if len(self.coords) == 4:
                self.answer = {"kind": "ground", "box": list(self.coords)}
                self._close("answer", None)
                self.phase = "done"
        else:
            raise ValueError(f"illegal token {token!r} in phase {self.phase}")

    def _close(self, kind: str, claim) -> None:
        self.steps.append({"kind": kind, "tokens": list(self.cur_tokens), "claim": claim})
        self.cur_tokens = []
        self.coords = []
        self.steps_done += 1

    def trajectory_json(self, task_id: str, logprobs: list[float]) -> dict:
        return {
            "task_id": task_id,
            "steps": self.steps,
            "logprobs": logprobs,
            "answer": self.answer,
            "outcome_score": None,
        }

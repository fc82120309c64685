"""Structured token vocabulary and the decoding grammar for reasoning steps.

A trajectory is a token sequence over a small structured vocabulary:

    plan/count | plan/ground          one-token planning step
    see/<class> coord x4              evidence step claiming a box for <class>
    count/<class> num/<k>             evidence step claiming a class count
    attr/<key> val/<v>                evidence step claiming a target attribute
    conclude                          one-token synthesis step
    answer/count num/<k>              final count answer
    answer/ground coord x4            final grounding answer

The grammar tracks which tokens are legal at every position (box coordinates
must produce a positive-area in-bounds box; the last step within the step
budget must be an answer) so that any sequence it admits decodes into a valid
trajectory.  GrammarCursor also maintains the derived evidence state that the
toy policy's feature map and the oracle scorer consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import (
    Answer,
    AttrClaim,
    Box,
    BoxClaim,
    Claim,
    CountClaim,
    Step,
    StepKind,
    Trajectory,
)

# Feature slots: the grammar position kinds a policy distinguishes.
SLOT_PLAN = 0
SLOT_BODY = 1
SLOT_SEE_X0 = 2
SLOT_SEE_Y0 = 3
SLOT_SEE_X1 = 4
SLOT_SEE_Y1 = 5
SLOT_CNT_NUM = 6
SLOT_ATTR_VAL = 7
SLOT_ANS_NUM = 8
SLOT_ANS_X0 = 9
SLOT_ANS_Y0 = 10
SLOT_ANS_X1 = 11
SLOT_ANS_Y1 = 12
N_SLOTS = 13


@dataclass(frozen=True)
class TaskVocabulary:
    """Token inventory shared by tasks, policies, and reward models."""

    classes: tuple[str, ...] = ("plane", "ship", "car", "tank")
    attr_key: str = "color"
    attr_values: tuple[str, ...] = ("red", "blue", "green", "yellow")
    width: int = 32
    height: int = 32
    count_max: int = 12
    max_steps: int = 12

    def tokens(self) -> list[str]:
        toks = ["plan/count", "plan/ground", "conclude", "answer/count", "answer/ground"]
        toks += [f"see/{c}" for c in self.classes]
        toks += [f"count/{c}" for c in self.classes]
        toks += [f"attr/{self.attr_key}"]
        toks += [f"val/{v}" for v in self.attr_values]
        toks += [f"num/{k}" for k in range(self.count_max + 1)]
        toks += [f"coord/{v}" for v in range(max(self.width, self.height) + 1)]
        return toks

    def layout(self) -> "VocabLayout":
        return VocabLayout(self)

    def token_set(self) -> frozenset[str]:
        return frozenset(self.tokens())

    def token_ids(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens())}

    def size(self) -> int:
        return len(self.tokens())

    def decode_answer_step(self, step: Step) -> Optional[Answer]:
        """Decode the Answer payload encoded in an answer step's tokens, or None if malformed."""
        toks = step.tokens
        if not toks:
            return None
        if toks[0] == "answer/count" and len(toks) == 2 and toks[1].startswith("num/"):
            return Answer.count(int(toks[1].split("/", 1)[1]))
        if toks[0] == "answer/ground" and len(toks) == 5:
            try:
                coords = [int(t.split("/", 1)[1]) for t in toks[1:]]
                return Answer.grounding(Box.from_list(coords))
            except (ValueError, IndexError):
                return None
        return None

    def to_json(self) -> dict:
        return {
            "classes": list(self.classes),
            "attr_key": self.attr_key,
            "attr_values": list(self.attr_values),
            "width": self.width,
            "height": self.height,
            "count_max": self.count_max,
            "max_steps": self.max_steps,
        }

    @staticmethod
    def from_json(obj: dict) -> "TaskVocabulary":
        return TaskVocabulary(
            classes=tuple(obj["classes"]),
            attr_key=obj["attr_key"],
            attr_values=tuple(obj["attr_values"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            count_max=int(obj["count_max"]),
            max_steps=int(obj["max_steps"]),
        )


class VocabLayout:
    """Integer token-id layout of a vocabulary, for arithmetic id computation."""

    def __init__(self, vocab: TaskVocabulary):
        toks = vocab.tokens()
        self.size = len(toks)
        self.ids = {t: i for i, t in enumerate(toks)}
        self.tokens = toks
        self.plan_count = 0
        self.plan_ground = 1
        self.conclude = 2
        self.answer_count = 3
        self.answer_ground = 4
        self.see_base = 5
        self.count_base = 5 + len(vocab.classes)
        self.attr_id = 5 + 2 * len(vocab.classes)
        self.val_base = self.attr_id + 1
        self.num_base = self.val_base + len(vocab.attr_values)
        self.coord_base = self.num_base + vocab.count_max + 1


# Grammar phases
_P_PLAN = "plan"
_P_BODY = "body"
_P_SEE = "see"
_P_CNT = "cnt"
_P_ATTR = "attr"
_P_ANS_NUM = "ans_num"
_P_ANS_BOX = "ans_box"
_P_DONE = "done"


class GrammarCursor:
    """Incremental decoding state for one task.

    Tracks phase, in-progress claim, completed steps, and the evidence
    summary used by feature maps: which scene objects have been matched by
    exact box claims, the last count and box claims, and whether an attribute
    claim or synthesis step was made.
    """

    def __init__(self, task, vocab: TaskVocabulary, max_steps: Optional[int] = None):
        self.task = task
        self.vocab = vocab
        self.max_steps = vocab.max_steps if max_steps is None else min(max_steps, vocab.max_steps)
        self.phase = _P_PLAN
        self.steps_done = 0
        self.cur_class: Optional[str] = None
        self.cur_coords: list[int] = []
        self.cur_tokens: list[str] = []
        self.steps: list[Step] = []
        self.final_answer: Optional[Answer] = None
        # evidence summary
        self.seen_objects: dict[str, set[int]] = {c: set() for c in vocab.classes}
        self.pending_target: Optional[int] = None  # scene object index the open see-step looks at
        self.last_count_claim: Optional[CountClaim] = None
        self.last_box_claim: Optional[Box] = None
        self.attr_claim: Optional[AttrClaim] = None
        self.synthesized = False

    # -- queries ---------------------------------------------------------

    def done(self) -> bool:
        return self.phase == _P_DONE

    def _answer_only(self) -> bool:
        return self.max_steps - self.steps_done <= 1

    def legal_tokens(self) -> list[str]:
        v = self.vocab
        if self.phase == _P_PLAN:
            if self._answer_only():
                return ["answer/count", "answer/ground"]
            return ["plan/count", "plan/ground"]
        if self.phase == _P_BODY:
            if self._answer_only():
                return ["answer/count", "answer/ground"]
            toks = [f"see/{c}" for c in v.classes]
            toks += [f"count/{c}" for c in v.classes]
            toks += [f"attr/{v.attr_key}", "conclude", "answer/count", "answer/ground"]
            return toks
        if self.phase in (_P_SEE, _P_ANS_BOX):
            slot = len(self.cur_coords)
            if slot == 0:
                return [f"coord/{x}" for x in range(0, v.width)]
            if slot == 1:
                return [f"coord/{y}" for y in range(0, v.height)]
            if slot == 2:
                return [f"coord/{x}" for x in range(self.cur_coords[0] + 1, v.width + 1)]
            return [f"coord/{y}" for y in range(self.cur_coords[1] + 1, v.height + 1)]
        if self.phase == _P_CNT or self.phase == _P_ANS_NUM:
            return [f"num/{k}" for k in range(v.count_max + 1)]
        if self.phase == _P_ATTR:
            return [f"val/{x}" for x in v.attr_values]
        return []

    def legal_ids(self, lay: VocabLayout) -> range | list[int]:
        """Token ids of legal_tokens(), computed arithmetically (hot path)."""
        v = self.vocab
        if self.phase in (_P_PLAN, _P_BODY):
            if self._answer_only():
                return [lay.answer_count, lay.answer_ground]
            if self.phase == _P_PLAN:
                return [lay.plan_count, lay.plan_ground]
            nc = len(v.classes)
            out = list(range(lay.see_base, lay.see_base + nc))
            out += list(range(lay.count_base, lay.count_base + nc))
            out += [lay.attr_id, lay.conclude, lay.answer_count, lay.answer_ground]
            return out
        if self.phase in (_P_SEE, _P_ANS_BOX):
            slot = len(self.cur_coords)
            base = lay.coord_base
            if slot == 0:
                return range(base, base + v.width)
            if slot == 1:
                return range(base, base + v.height)
            if slot == 2:
                return range(base + self.cur_coords[0] + 1, base + v.width + 1)
            return range(base + self.cur_coords[1] + 1, base + v.height + 1)
        if self.phase in (_P_CNT, _P_ANS_NUM):
            return range(lay.num_base, lay.num_base + v.count_max + 1)
        if self.phase == _P_ATTR:
            return range(lay.val_base, lay.val_base + len(v.attr_values))
        return []

    def slot(self) -> int:
        """The feature slot of the next token position."""
        if self.phase == _P_PLAN:
            return SLOT_BODY if self._answer_only() else SLOT_PLAN
        if self.phase == _P_BODY:
            return SLOT_BODY
        if self.phase == _P_SEE:
            return SLOT_SEE_X0 + len(self.cur_coords)
        if self.phase == _P_CNT:
            return SLOT_CNT_NUM
        if self.phase == _P_ATTR:
            return SLOT_ATTR_VAL
        if self.phase == _P_ANS_NUM:
            return SLOT_ANS_NUM
        if self.phase == _P_ANS_BOX:
            return SLOT_ANS_X0 + len(self.cur_coords)
        raise RuntimeError("no next position after the answer step")

    # -- transitions -----------------------------------------------------

    def advance(self, token: str) -> None:
        if self.phase == _P_DONE:
            raise ValueError("cannot advance a finished trajectory")
        kind, _, arg = token.partition("/")
        if self.phase in (_P_PLAN, _P_BODY):
            self.cur_tokens = [token]
            if kind == "plan":
                self._close_step(StepKind.PLAN, None)
                self.phase = _P_BODY
            elif kind == "see":
                self.cur_class = arg
                self.pending_target = self._next_object_of(arg)
                self.cur_coords = []
                self.phase = _P_SEE
            elif kind == "count":
                self.cur_class = arg
                self.phase = _P_CNT
            elif kind == "attr":
                self.phase = _P_ATTR
            elif token == "conclude":
                self.synthesized = True
                self._close_step(StepKind.SYNTHESIS, None)
            elif token == "answer/count":
                self.phase = _P_ANS_NUM
            elif token == "answer/ground":
                self.cur_coords = []
                self.phase = _P_ANS_BOX
            else:
                raise ValueError(f"token {token!r} illegal in phase {self.phase}")
            return

        self.cur_tokens.append(token)
        if self.phase == _P_SEE:
            self.cur_coords.append(int(arg))
            if len(self.cur_coords) == 4:
                box = Box.from_list(self.cur_coords)
                claim = BoxClaim(self.cur_class, box)
                self._register_box_claim(claim)
                self._close_step(StepKind.EVIDENCE, claim)
                self.phase = _P_BODY
        elif self.phase == _P_CNT:
            claim = CountClaim(self.cur_class, int(arg))
            self.last_count_claim = claim
            self._close_step(StepKind.EVIDENCE, claim)
            self.phase = _P_BODY
        elif self.phase == _P_ATTR:
            claim = AttrClaim(self.vocab.attr_key, arg)
            self.attr_claim = claim
            self._close_step(StepKind.EVIDENCE, claim)
            self.phase = _P_BODY
        elif self.phase == _P_ANS_NUM:
            self.final_answer = Answer.count(int(arg))
            self._close_step(StepKind.ANSWER, None)
            self.phase = _P_DONE
        elif self.phase == _P_ANS_BOX:
            self.cur_coords.append(int(arg))
            if len(self.cur_coords) == 4:
                self.final_answer = Answer.grounding(Box.from_list(self.cur_coords))
                self._close_step(StepKind.ANSWER, None)
                self.phase = _P_DONE
        else:
            raise ValueError(f"token {token!r} illegal in phase {self.phase}")

    def _close_step(self, kind: StepKind, claim: Optional[Claim]) -> None:
        self.steps.append(Step(kind, tuple(self.cur_tokens), claim))
        self.cur_tokens = []
        self.cur_coords = []
        self.cur_class = None
        self.pending_target = None
        self.steps_done += 1

    def _register_box_claim(self, claim: BoxClaim) -> None:
        self.last_box_claim = claim.box
        for idx, obj in enumerate(self.task.scene.objects):
            if obj.class_name == claim.class_name and obj.box == claim.box:
                self.seen_objects[claim.class_name].add(idx)
                break

    def _next_object_of(self, class_name: str) -> Optional[int]:
        """Scene index of the object a see-step of this class should look at.

        Ground queries point at the query's unique target until it has been
        matched; otherwise (and for count queries) the first object of the
        class not yet matched by an exact box claim.
        """
        if class_name not in self.seen_objects:
            return None
        task = self.task
        q = task.query
        if q.kind == "ground" and class_name == q.class_name and task.gt_answer.box is not None:
            for idx, obj in enumerate(task.scene.objects):
                if obj.class_name == class_name and obj.box == task.gt_answer.box:
                    if idx not in self.seen_objects[class_name]:
                        return idx
                    break
        for idx, obj in enumerate(self.task.scene.objects):
            if obj.class_name == class_name and idx not in self.seen_objects[class_name]:
                return idx
        return None

    def finish(self) -> Trajectory:
        if self.phase != _P_DONE:
            raise ValueError("trajectory is incomplete")
        return Trajectory(
            task_id=self.task.task_id,
            steps=tuple(self.steps),
            token_logprobs=(),
            final_answer=self.final_answer,
        )


def replay(task, vocab: TaskVocabulary, tokens) -> GrammarCursor:
    cur = GrammarCursor(task, vocab)
    for tok in tokens:
        cur.advance(tok)
    return cur


def assemble_trajectory(task, vocab: TaskVocabulary, tokens, logprobs) -> Trajectory:
    """Decode a complete token sequence into a Trajectory with the given log-probs."""
    cur = replay(task, vocab, tokens)
    traj = cur.finish()
    if len(logprobs) != len(list(tokens)):
        raise ValueError("logprob count must equal token count")
    return Trajectory(
        task_id=traj.task_id,
        steps=traj.steps,
        token_logprobs=tuple(float(x) for x in logprobs),
        final_answer=traj.final_answer,
    )

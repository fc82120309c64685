"""Synthetic grounding/counting world with exact oracle answers.

Scenes are grids of class-labelled boxes with one categorical attribute per
object.  Tasks ask either "how many objects of class c" (count) or "where is
the unique object of class c with attribute value v" (ground).  Both query
kinds have an exhaustive-scan oracle, and the outcome score of a trajectory
against its task is a continuous value in [0, 1].
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional

from .core import Answer, AnswerKind, Box, StepKind, Trajectory, compute_iou
from .seeds import derive
from .vocab import GrammarCursor, TaskVocabulary


class AmbiguousQueryError(ValueError):
    """A ground query matched zero or more than one scene object."""


@dataclass(frozen=True)
class SceneObject:
    class_name: str
    box: Box
    attributes: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"class": self.class_name, "box": self.box.as_list(), "attrs": dict(self.attributes)}

    @staticmethod
    def from_json(obj: dict) -> "SceneObject":
        return SceneObject(obj["class"], Box.from_list(obj["box"]), dict(obj.get("attrs", {})))


@dataclass(frozen=True)
class Scene:
    width: int
    height: int
    objects: tuple[SceneObject, ...]

    def to_json(self) -> dict:
        return {"w": self.width, "h": self.height, "objects": [o.to_json() for o in self.objects]}

    @staticmethod
    def from_json(obj: dict) -> "Scene":
        return Scene(int(obj["w"]), int(obj["h"]), tuple(SceneObject.from_json(o) for o in obj["objects"]))


QUERY_COUNT = "count"
QUERY_GROUND = "ground"


@dataclass(frozen=True)
class Query:
    kind: str  # QUERY_COUNT | QUERY_GROUND
    class_name: str
    attr_filter: dict = field(default_factory=dict)  # ground queries only

    def to_json(self) -> dict:
        out = {"kind": self.kind, "class": self.class_name}
        if self.kind == QUERY_GROUND:
            out["filter"] = dict(self.attr_filter)
        return out

    @staticmethod
    def from_json(obj: dict) -> "Query":
        return Query(obj["kind"], obj["class"], dict(obj.get("filter", {})))


@dataclass(frozen=True)
class Task:
    task_id: str
    scene: Scene
    query: Query
    gt_answer: Answer

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "scene": self.scene.to_json(),
            "query": self.query.to_json(),
            "gt_answer": self.gt_answer.to_json(),
        }

    @staticmethod
    def from_json(obj: dict) -> "Task":
        return Task(
            obj["task_id"],
            Scene.from_json(obj["scene"]),
            Query.from_json(obj["query"]),
            Answer.from_json(obj["gt_answer"]),
        )


@dataclass(frozen=True)
class GenConfig:
    """Task generation parameters.  Defaults: 32x32 grid, 1-8 objects, 4 classes."""

    width: int = 32
    height: int = 32
    classes: tuple[str, ...] = ("plane", "ship", "car", "tank")
    attr_key: str = "color"
    attr_values: tuple[str, ...] = ("red", "blue", "green", "yellow")
    min_objects: int = 1
    max_objects: int = 8
    min_box: int = 2
    max_box: int = 6
    ground_fraction: float = 0.5

    def vocabulary(self, max_steps: int = 12, count_max: int = 12) -> TaskVocabulary:
        return TaskVocabulary(
            classes=self.classes,
            attr_key=self.attr_key,
            attr_values=self.attr_values,
            width=self.width,
            height=self.height,
            count_max=count_max,
            max_steps=max_steps,
        )

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "classes": list(self.classes),
            "attr_key": self.attr_key,
            "attr_values": list(self.attr_values),
            "min_objects": self.min_objects,
            "max_objects": self.max_objects,
            "min_box": self.min_box,
            "max_box": self.max_box,
            "ground_fraction": self.ground_fraction,
        }

    @staticmethod
    def from_json(obj: dict) -> "GenConfig":
        return GenConfig(
            width=int(obj["width"]),
            height=int(obj["height"]),
            classes=tuple(obj["classes"]),
            attr_key=obj["attr_key"],
            attr_values=tuple(obj["attr_values"]),
            min_objects=int(obj["min_objects"]),
            max_objects=int(obj["max_objects"]),
            min_box=int(obj["min_box"]),
            max_box=int(obj["max_box"]),
            ground_fraction=float(obj["ground_fraction"]),
        )


def _sample_box(rng: random.Random, cfg: GenConfig) -> Box:
    w = rng.randint(cfg.min_box, cfg.max_box)
    h = rng.randint(cfg.min_box, cfg.max_box)
    x = rng.randint(0, cfg.width - w)
    y = rng.randint(0, cfg.height - h)
    return Box(x, y, x + w, y + h)


def _sample_scene(rng: random.Random, cfg: GenConfig) -> Scene:
    n = rng.randint(cfg.min_objects, cfg.max_objects) if cfg.max_objects > 0 else 0
    objects: list[SceneObject] = []
    used: set[tuple[str, tuple[int, int, int, int]]] = set()
    for _ in range(n):
        cls = rng.choice(cfg.classes)
        for _attempt in range(100):
            box = _sample_box(rng, cfg)
            key = (cls, (box.x_min, box.y_min, box.x_max, box.y_max))
            if key not in used:
                used.add(key)
                break
        else:
            continue
        color = rng.choice(cfg.attr_values)
        objects.append(SceneObject(cls, box, {cfg.attr_key: color}))
    return Scene(cfg.width, cfg.height, tuple(objects))


def generate_tasks(seed: int, count: int, config: Optional[GenConfig] = None) -> list[Task]:
    """Deterministically generate ``count`` tasks; every task passes oracle consistency."""
    cfg = config or GenConfig()
    if count < 1:
        raise ValueError("count must be >= 1")
    if cfg.width < 4 or cfg.height < 4:
        raise ValueError("grid must be at least 4x4")
    if not cfg.classes:
        raise ValueError("need at least one object class")
    tasks: list[Task] = []
    for i in range(count):
        rng = random.Random(derive(seed, "task", i))
        scene = _sample_scene(rng, cfg)
        want_ground = rng.random() < cfg.ground_fraction and len(scene.objects) > 0
        if want_ground:
            target_idx = rng.randrange(len(scene.objects))
            target = scene.objects[target_idx]
            # Make (class, attr) identify the target uniquely by recoloring clashes.
            objs = list(scene.objects)
            tcolor = target.attributes[cfg.attr_key]
            for j, obj in enumerate(objs):
                if j != target_idx and obj.class_name == target.class_name and obj.attributes[cfg.attr_key] == tcolor:
                    alternatives = [v for v in cfg.attr_values if v != tcolor]
                    objs[j] = SceneObject(obj.class_name, obj.box, {cfg.attr_key: rng.choice(alternatives)})
            scene = Scene(scene.width, scene.height, tuple(objs))
            query = Query(QUERY_GROUND, target.class_name, {cfg.attr_key: tcolor})
            gt = Answer.grounding(target.box)
        else:
            cls = rng.choice(cfg.classes)
            query = Query(QUERY_COUNT, cls)
            gt = Answer.count(sum(1 for o in scene.objects if o.class_name == cls))
        task = Task(f"task-{seed}-{i:05d}", scene, query, gt)
        assert oracle_answer(task) == gt
        tasks.append(task)
    return tasks


def oracle_answer(task: Task) -> Answer:
    """Exact ground truth by exhaustive scan of scene objects."""
    q = task.query
    if q.kind == QUERY_COUNT:
        return Answer.count(sum(1 for o in task.scene.objects if o.class_name == q.class_name))
    matches = [
        o
        for o in task.scene.objects
        if o.class_name == q.class_name
        and all(o.attributes.get(k) == v for k, v in q.attr_filter.items())
    ]
    if len(matches) != 1:
        raise AmbiguousQueryError(f"query matches {len(matches)} objects in {task.task_id}")
    return Answer.grounding(matches[0].box)


def target_object(task: Task) -> Optional[SceneObject]:
    """The unique object a ground query refers to, or None for count queries."""
    if task.query.kind != QUERY_GROUND:
        return None
    ans = oracle_answer(task)
    for o in task.scene.objects:
        if o.class_name == task.query.class_name and o.box == ans.box:
            return o
    return None


def outcome_score(t: Trajectory, task: Task) -> float:
    """Continuous outcome score in [0, 1].

    Count queries: 1 on exact match, else a linear ramp 1 - |pred - gt| / max(gt, 1).
    Ground queries: IoU of the predicted and true boxes.  A missing answer or an
    answer of the wrong kind scores 0 rather than faulting.
    """
    gt = task.gt_answer
    pred = t.final_answer
    if pred is None or pred.kind != gt.kind:
        return 0.0
    if gt.kind == AnswerKind.COUNT:
        if pred.count_value == gt.count_value:
            return 1.0
        return max(0.0, 1.0 - abs(pred.count_value - gt.count_value) / max(gt.count_value, 1))
    if gt.kind == AnswerKind.GROUNDING:
        return compute_iou(pred.box, gt.box)
    return 1.0 if pred == gt else 0.0


def is_correct(t: Trajectory, task: Task) -> bool:
    """Binary correctness gate: exact match for counts, IoU >= 0.5 for grounding."""
    score = t.outcome_score if t.outcome_score is not None else outcome_score(t, task)
    if task.gt_answer.kind == AnswerKind.COUNT:
        return score == 1.0
    return score >= 0.5


def gold_trajectory(task: Task, vocab: TaskVocabulary) -> Trajectory:
    """Oracle-faithful trajectory: plan, enumerate evidence, synthesize, answer.

    Count tasks claim every object of the queried class before stating the
    count; ground tasks confirm the target attribute then its box.  Token
    log-probs are zeros (an ideal deterministic narrator).
    """
    if vocab.max_steps < 5:
        raise ValueError("gold trajectories need a step budget of at least 5")
    cur = GrammarCursor(task, vocab)
    toks: list[str] = []

    def emit(tok: str):
        toks.append(tok)
        cur.advance(tok)

    q = task.query
    if q.kind == QUERY_COUNT:
        emit("plan/count")
        members = [o for o in task.scene.objects if o.class_name == q.class_name]
        budget = max(0, vocab.max_steps - 4)  # plan + count-claim + conclude + answer
        for obj in members[:budget]:
            emit(f"see/{q.class_name}")
            for c in (obj.box.x_min, obj.box.y_min, obj.box.x_max, obj.box.y_max):
                emit(f"coord/{c}")
        emit(f"count/{q.class_name}")
        emit(f"num/{min(len(members), vocab.count_max)}")
        emit("conclude")
        emit("answer/count")
        emit(f"num/{min(task.gt_answer.count_value, vocab.count_max)}")
    else:
        target = target_object(task)
        emit("plan/ground")
        emit(f"attr/{vocab.attr_key}")
        emit(f"val/{q.attr_filter[vocab.attr_key]}")
        emit(f"see/{q.class_name}")
        for c in (target.box.x_min, target.box.y_min, target.box.x_max, target.box.y_max):
            emit(f"coord/{c}")
        emit("conclude")
        emit("answer/ground")
        for c in (target.box.x_min, target.box.y_min, target.box.x_max, target.box.y_max):
            emit(f"coord/{c}")
    traj = cur.finish()
    traj = Trajectory(
        task_id=traj.task_id,
        steps=traj.steps,
        token_logprobs=tuple(0.0 for _ in toks),
        final_answer=traj.final_answer,
    )
    return Trajectory(
        task_id=traj.task_id,
        steps=traj.steps,
        token_logprobs=traj.token_logprobs,
        final_answer=traj.final_answer,
        outcome_score=outcome_score(traj, task),
    )

"""Hard-negative sample synthesis by perturbing oracle-correct trajectories.

Three perturbation families:

* small jitter — replace one claimed box with a nearby box whose IoU with the
  original falls in a configurable band (default [0.1, 0.5]), and which stays
  below the 0.5 correctness gate against every same-class object;
* large jitter — replace one claimed box with a box disjoint from every
  object in the scene (background region);
* tamper — replace one claimed count with a different value, or one claimed
  attribute with a different vocabulary value.

Labels follow first-error-onward semantics: every token of the perturbed
step and everything after it gets label 0; everything before keeps label 1.
Unmodified gold trajectories are emitted as all-ones anchors.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import (
    AttrClaim,
    Box,
    BoxClaim,
    CountClaim,
    Step,
    StepKind,
    Trajectory,
    compute_iou,
)
from .mc_labeler import LabeledSample, SOURCE_ANCHOR, SOURCE_INJECTED, reasoning_mask
from .seeds import derive
from .toy_env import Scene, Task

KIND_SMALL = "small_jitter"
KIND_LARGE = "large_jitter"
KIND_TAMPER = "tamper"
KIND_ANCHOR = "anchor"


class NothingToPerturbError(ValueError):
    pass


class NoBackgroundRegionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PerturbationSpec:
    small_iou_range: tuple[float, float] = (0.1, 0.5)
    seed: int = 0
    ratio: dict = field(default_factory=lambda: {"anchor": 1, "small": 1, "large": 1, "tamper": 1})
    repeats: int = 1  # passes over the gold corpus, each with fresh perturbation draws

    def __post_init__(self):
        lo, hi = self.small_iou_range
        if not (0 < lo < hi < 1):
            raise ValueError("small_iou_range must satisfy 0 < lo < hi < 1")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")


def _box_claim_steps(t: Trajectory) -> list[int]:
    return [i for i, s in enumerate(t.steps) if isinstance(s.claim, BoxClaim)]


def _fact_claim_steps(t: Trajectory) -> list[int]:
    return [i for i, s in enumerate(t.steps) if isinstance(s.claim, (CountClaim, AttrClaim))]


def _poisoned_labels(t: Trajectory, step_index: int) -> tuple[int, ...]:
    """All-1 before the perturbed step, all-0 from its first token onward."""
    labels: list[int] = []
    for i, s in enumerate(t.steps):
        bit = 1 if i < step_index else 0
        labels.extend([bit] * len(s.tokens))
    return tuple(labels)


def _replace_box_step(t: Trajectory, step_index: int, new_box: Box) -> Trajectory:
    old = t.steps[step_index]
    claim: BoxClaim = old.claim
    tokens = (old.tokens[0],) + tuple(f"coord/{c}" for c in new_box.as_list())
    new_step = Step(StepKind.EVIDENCE, tokens, BoxClaim(claim.class_name, new_box))
    steps = t.steps[:step_index] + (new_step,) + t.steps[step_index + 1 :]
    return Trajectory(t.task_id, steps, t.token_logprobs, t.final_answer, t.outcome_score)


def _small_jitter_box(orig: Box, scene: Scene, class_name: str, rng: random.Random,
                      iou_range: tuple[float, float]) -> Box:
    """A box overlapping the original with IoU in the band, and IoU < 0.5
    against every same-class object (so the claim is unambiguously false)."""
    lo, hi = iou_range
    same_class = [o.box for o in scene.objects if o.class_name == class_name]
    w = orig.x_max - orig.x_min
    h = orig.y_max - orig.y_min

    def ok(b: Box) -> bool:
        if not b.within(scene.width, scene.height):
            return False
        v = compute_iou(b, orig)
        if not (lo <= v <= hi):
            return False
        return all(compute_iou(b, other) < 0.5 for other in same_class)

    for _ in range(1000):
        dx0 = rng.randint(-w, w)
        dy0 = rng.randint(-h, h)
        dx1 = rng.randint(-w, w)
        dy1 = rng.randint(-h, h)
        if dx0 == dy0 == dx1 == dy1 == 0:
            continue
        cand = (orig.x_min + dx0, orig.y_min + dy0, orig.x_max + dx1, orig.y_max + dy1)
        if cand[0] < cand[2] and cand[1] < cand[3]:
            b = Box(*cand)
            if ok(b):
                return b
    # deterministic exhaustive fallback over pure translations then rescales
    for r in range(1, max(scene.width, scene.height)):
        for dx in range(-r, r + 1):
            for dy in (-r, r):
                for cand in ((dx, dy), (dy, dx)):
                    moved = (orig.x_min + cand[0], orig.y_min + cand[1],
                             orig.x_max + cand[0], orig.y_max + cand[1])
                    if moved[0] < moved[2] and moved[1] < moved[3]:
                        try:
                            b = Box(*moved)
                        except ValueError:
                            continue
                        if ok(b):
                            return b
    raise NothingToPerturbError(f"no small-jitter placement for {orig}")


def _large_jitter_box(scene: Scene, rng: random.Random, min_side: int = 1, max_side: int = 6) -> Box:
    """A box disjoint from every object in the scene, by rejection sampling."""
    for _ in range(1000):
        w = rng.randint(min_side, min(max_side, scene.width))
        h = rng.randint(min_side, min(max_side, scene.height))
        x = rng.randint(0, scene.width - w)
        y = rng.randint(0, scene.height - h)
        b = Box(x, y, x + w, y + h)
        if all(compute_iou(b, o.box) == 0.0 for o in scene.objects):
            return b
    raise NoBackgroundRegionError("scene too crowded for a disjoint box")


def inject_box(t: Trajectory, scene: Scene, kind: str, seed: int,
               iou_range: tuple[float, float] = (0.1, 0.5)) -> LabeledSample:
    """Replace one box claim with a jittered box; labels poison from that step on."""
    steps = _box_claim_steps(t)
    if not steps:
        raise NothingToPerturbError("trajectory has no box claim")
    rng = random.Random(derive(seed, "inject_box", kind))
    step_index = steps[rng.randrange(len(steps))]
    claim: BoxClaim = t.steps[step_index].claim
    if kind == KIND_SMALL:
        new_box = _small_jitter_box(claim.box, scene, claim.class_name, rng, iou_range)
    elif kind == KIND_LARGE:
        new_box = _large_jitter_box(scene, rng)
    else:
        raise ValueError(f"unknown box jitter kind {kind!r}")
    perturbed = _replace_box_step(t, step_index, new_box)
    return LabeledSample(
        trajectory=perturbed,
        labels=_poisoned_labels(perturbed, step_index),
        mask=reasoning_mask(perturbed),
        source=SOURCE_INJECTED,
        kind=kind,
    )


def inject_fact(t: Trajectory, task: Task, seed: int) -> LabeledSample:
    """Tamper one fact claim: a count becomes a different value in [0, k+3], an
    attribute becomes a different vocabulary value."""
    steps = _fact_claim_steps(t)
    if not steps:
        raise NothingToPerturbError("trajectory has no fact claim")
    rng = random.Random(derive(seed, "inject_fact"))
    step_index = steps[rng.randrange(len(steps))]
    old = t.steps[step_index]
    if isinstance(old.claim, CountClaim):
        k = old.claim.count
        choices = [x for x in range(0, k + 4) if x != k]
        new_k = choices[rng.randrange(len(choices))]
        new_step = Step(
            StepKind.EVIDENCE,
            (old.tokens[0], f"num/{new_k}"),
            CountClaim(old.claim.class_name, new_k),
        )
    else:
        values = _attr_values_for(task, old.claim.key)
        choices = [v for v in values if v != old.claim.value]
        if not choices:
            raise NothingToPerturbError("no alternative attribute value")
        new_v = choices[rng.randrange(len(choices))]
        new_step = Step(StepKind.EVIDENCE, (old.tokens[0], f"val/{new_v}"), AttrClaim(old.claim.key, new_v))
    steps_out = t.steps[:step_index] + (new_step,) + t.steps[step_index + 1 :]
    perturbed = Trajectory(t.task_id, steps_out, t.token_logprobs, t.final_answer, t.outcome_score)
    return LabeledSample(
        trajectory=perturbed,
        labels=_poisoned_labels(perturbed, step_index),
        mask=reasoning_mask(perturbed),
        source=SOURCE_INJECTED,
        kind=KIND_TAMPER,
    )


def _attr_values_for(task: Task, key: str) -> list[str]:
    values = sorted({o.attributes[key] for o in task.scene.objects if key in o.attributes})
    # make sure the standard palette is available even in sparse scenes
    for v in ("red", "blue", "green", "yellow"):
        if v not in values:
            values.append(v)
    return values


def anchor_sample(t: Trajectory) -> LabeledSample:
    n = sum(len(s.tokens) for s in t.steps)
    return LabeledSample(
        trajectory=t,
        labels=tuple([1] * n),
        mask=reasoning_mask(t),
        source=SOURCE_ANCHOR,
        kind=KIND_ANCHOR,
    )


def build_injection_set(
    gold: Sequence[Trajectory],
    tasks: dict[str, Task],
    spec: PerturbationSpec,
) -> tuple[list[LabeledSample], dict]:
    """Mix of anchors and perturbed negatives over a gold corpus.

    Each gold trajectory is assigned one sample kind by spec.ratio weights;
    trajectories lacking the needed claim are skipped and reported.
    """
    kinds = []
    weights = []
    for name, key in (("anchor", KIND_ANCHOR), ("small", KIND_SMALL),
                      ("large", KIND_LARGE), ("tamper", KIND_TAMPER)):
        w = float(spec.ratio.get(name, 0))
        if w > 0:
            kinds.append(key)
            weights.append(w)
    if not kinds:
        raise ValueError("ratio selects no sample kinds")
    total_w = sum(weights)
    samples: list[LabeledSample] = []
    skipped: list[dict] = []
    counts = {k: 0 for k in kinds}
    for rep in range(spec.repeats):
        for i, traj in enumerate(gold):
            rng = random.Random(derive(spec.seed, "mix", rep, i))
            u = rng.random() * total_w
            acc = 0.0
            kind = kinds[-1]
            for k, w in zip(kinds, weights):
                acc += w
                if u < acc:
                    kind = k
                    break
            task = tasks[traj.task_id]
            item_seed = derive(spec.seed, "item", rep, i)
            try:
                if kind == KIND_ANCHOR:
                    sample = anchor_sample(traj)
                elif kind in (KIND_SMALL, KIND_LARGE):
                    sample = inject_box(traj, task.scene, kind, item_seed,
                                        iou_range=spec.small_iou_range)
                else:
                    sample = inject_fact(traj, task, item_seed)
            except NothingToPerturbError as e:
                skipped.append({"index": i, "repeat": rep, "task_id": traj.task_id,
                                "kind": kind, "reason": str(e)})
                continue
            counts[kind] += 1
            samples.append(sample)
    report = {"counts": counts, "skipped": skipped, "total": len(samples)}
    return samples, report

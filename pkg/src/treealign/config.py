"""Hierarchical run configuration with strict JSON parsing.

Unknown keys are rejected by name; parse -> serialize -> parse is the
identity.  CLI flags override file values.  Defaults carry the tuned
hyperparameters: tree N=3/T=9/K=4 at temperature 1.2, shaping rho=0.3 and
gamma=0.7, clip 0.2 with group size 8, scaling temperature 1.0 with top-p
0.9.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from typing import Optional


class ConfigError(ValueError):
    pass


def _section_from_dict(cls, obj: dict, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in obj:
        if key not in known:
            raise ConfigError(f"{path}: unknown key {key!r}")
    kwargs = {}
    for name, f in known.items():
        if name not in obj:
            continue
        val = obj[name]
        if isinstance(f.default, tuple) and isinstance(val, list):
            val = tuple(val)
        kwargs[name] = val
    return cls(**kwargs)


@dataclass(frozen=True)
class GenSection:
    width: int = 32
    height: int = 32
    classes: tuple = ("plane", "ship", "car", "tank")
    attr_key: str = "color"
    attr_values: tuple = ("red", "blue", "green", "yellow")
    min_objects: int = 1
    max_objects: int = 8
    min_box: int = 2
    max_box: int = 6
    ground_fraction: float = 0.5
    count_max: int = 12
    max_steps: int = 12


@dataclass(frozen=True)
class SftSection:
    lr: float = 0.5
    steps: int = 600
    batch: Optional[int] = 8
    seed: int = 0


@dataclass(frozen=True)
class TreeSection:
    branch_n: int = 3
    rollouts_t: int = 9
    rounds_k: int = 4
    temperature: float = 1.2
    min_prefix_tokens: int = 1
    top_p: float = 1.0
    rescore_each_round: bool = True
    entropy_unit: str = "token"


@dataclass(frozen=True)
class LabelSection:
    threshold: float = 0.5
    min_std: float = 1e-6
    per_tree_cap: Optional[int] = 16


@dataclass(frozen=True)
class InjectSection:
    small_iou_lo: float = 0.1
    small_iou_hi: float = 0.5
    anchor: float = 1.0
    small: float = 1.0
    large: float = 1.0
    tamper: float = 1.0
    repeats: int = 16


@dataclass(frozen=True)
class PrmSection:
    lr: float = 0.5
    epochs: int = 2
    batch: int = 16
    holdout_fraction: float = 0.2
    normalize: str = "full_length"
    pooling: str = "mean"


@dataclass(frozen=True)
class ShapingSection:
    rho: float = 0.3
    gamma: float = 0.7
    strict_boundary: bool = False


@dataclass(frozen=True)
class AlignSection:
    epsilon: float = 0.2
    group_size: int = 8
    steps: int = 120
    lr: float = 0.22
    optimizer: str = "adam"
    inner_epochs: int = 1
    temperature: float = 1.0  # rollout temperature during alignment
    modes: tuple = ("vanilla", "tree", "tree+process", "chain+process", "tree+avg-score")
    prm: str = "oracle"  # oracle | tiny | <url>


@dataclass(frozen=True)
class TtsSection:
    strategies: tuple = ("greedy", "sc", "bon")
    budgets: tuple = (1, 8, 32)
    seeds: int = 3
    temperature: float = 1.0
    top_p: float = 0.9
    prm: str = "oracle"
    eval_tasks: int = 120


@dataclass(frozen=True)
class PipelineSection:
    tasks: int = 200
    sft_tasks: int = 200


@dataclass(frozen=True)
class Config:
    seed: int = 0
    gen: GenSection = field(default_factory=GenSection)
    sft: SftSection = field(default_factory=SftSection)
    tree: TreeSection = field(default_factory=TreeSection)
    label: LabelSection = field(default_factory=LabelSection)
    inject: InjectSection = field(default_factory=InjectSection)
    prm: PrmSection = field(default_factory=PrmSection)
    shaping: ShapingSection = field(default_factory=ShapingSection)
    align: AlignSection = field(default_factory=AlignSection)
    tts: TtsSection = field(default_factory=TtsSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)

    @staticmethod
    def from_dict(obj: dict) -> "Config":
        if not isinstance(obj, dict):
            raise ConfigError("config: expected an object")
        sections = {
            "gen": GenSection, "sft": SftSection, "tree": TreeSection,
            "label": LabelSection, "inject": InjectSection, "prm": PrmSection,
            "shaping": ShapingSection, "align": AlignSection, "tts": TtsSection,
            "pipeline": PipelineSection,
        }
        kwargs = {}
        for key, val in obj.items():
            if key == "seed":
                kwargs["seed"] = int(val)
            elif key in sections:
                kwargs[key] = _section_from_dict(sections[key], val, f"config.{key}")
            else:
                raise ConfigError(f"config: unknown key {key!r}")
        return Config(**kwargs)

    @staticmethod
    def load(path) -> "Config":
        with open(path) as f:
            return Config.from_dict(json.load(f))

    def to_dict(self) -> dict:
        def conv(x):
            if dataclasses.is_dataclass(x):
                return {f.name: conv(getattr(x, f.name)) for f in fields(x)}
            if isinstance(x, tuple):
                return [conv(v) for v in x]
            return x

        return conv(self)

    def gen_config(self):
        from .toy_env import GenConfig

        g = self.gen
        return GenConfig(
            width=g.width, height=g.height, classes=tuple(g.classes),
            attr_key=g.attr_key, attr_values=tuple(g.attr_values),
            min_objects=g.min_objects, max_objects=g.max_objects,
            min_box=g.min_box, max_box=g.max_box, ground_fraction=g.ground_fraction,
        )

    def vocabulary(self):
        return self.gen_config().vocabulary(max_steps=self.gen.max_steps, count_max=self.gen.count_max)

    def tree_config(self, seed: int):
        from .tree_engine import TreeConfig

        t = self.tree
        return TreeConfig(
            branch_n=t.branch_n, rollouts_t=t.rollouts_t, rounds_k=t.rounds_k,
            temperature=t.temperature, seed=seed, min_prefix_tokens=t.min_prefix_tokens,
            top_p=t.top_p, rescore_each_round=t.rescore_each_round, entropy_unit=t.entropy_unit,
        )

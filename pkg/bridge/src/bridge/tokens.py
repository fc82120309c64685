"""Symbol vocabulary and text rendering for the bridge model.

The toolkit's structured tokens are rendered one-to-one as model symbols (a
bijection), with extra prompt symbols for the query and the scene.  A task
plus a trajectory becomes:

    [bos] [q] <q/kind> <see/class> (<val/color>)  [scene] ([obj] <see/class>
    <coord/x0> <coord/y0> <coord/x1> <coord/y1> <val/color>)*  [sep]
    <trajectory tokens...> [eos]

Scene coordinates reuse the toolkit's coordinate symbols so the model can
match claimed boxes against scene boxes by symbol identity.
"""

from __future__ import annotations

from dataclasses import dataclass

SPECIALS = ["[pad]", "[bos]", "[eos]", "[q]", "[scene]", "[obj]", "[sep]", "q/count", "q/ground"]


@dataclass(frozen=True)
class VocabSpec:
    """Mirror of the toolkit vocabulary parameters (from its JSON form)."""

    classes: tuple
    attr_key: str
    attr_values: tuple
    width: int
    height: int
    count_max: int
    max_steps: int

    @staticmethod
    def from_json(obj: dict) -> "VocabSpec":
        return VocabSpec(
            classes=tuple(obj["classes"]),
            attr_key=obj["attr_key"],
            attr_values=tuple(obj["attr_values"]),
            width=int(obj["width"]),
            height=int(obj["height"]),
            count_max=int(obj["count_max"]),
            max_steps=int(obj["max_steps"]),
        )

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

    def toolkit_tokens(self) -> list[str]:
        toks = ["plan/count", "plan/ground", "conclude", "answer/count", "answer/ground"]
        toks += [f"see/{c}" for c in self.classes]
        toks += [f"count/{c}" for c in self.classes]
        toks += [f"attr/{self.attr_key}"]
        toks += [f"val/{v}" for v in self.attr_values]
        toks += [f"num/{k}" for k in range(self.count_max + 1)]
        toks += [f"coord/{v}" for v in range(max(self.width, self.height) + 1)]
        return toks


class TokenMap:
    """Bijection between toolkit tokens and model symbol ids, plus prompt symbols."""

    def __init__(self, spec: VocabSpec):
        self.spec = spec
        toolkit = spec.toolkit_tokens()
        self.symbols = SPECIALS + toolkit
        self.ids = {s: i for i, s in enumerate(self.symbols)}
        self.toolkit_ids = [self.ids[t] for t in toolkit]
        self.toolkit_tokens = toolkit

    def __len__(self) -> int:
        return len(self.symbols)

    def render_prompt(self, task: dict) -> list[int]:
        ids = self.ids
        out = [ids["[bos]"], ids["[q]"]]
        query = task["query"]
        out.append(ids["q/count"] if query["kind"] == "count" else ids["q/ground"])
        out.append(ids[f"see/{query['class']}"])
        if query["kind"] == "ground":
            for key, val in sorted(query.get("filter", {}).items()):
                out.append(ids[f"val/{val}"])
        out.append(ids["[scene]"])
        # canonical object order (class, box) so same-class objects cluster,
        # which makes claim-to-scene attention binding easier to learn
        objects = sorted(task["scene"]["objects"], key=lambda o: (o["class"], o["box"]))
        for obj in objects:
            out.append(ids["[obj]"])
            out.append(ids[f"see/{obj['class']}"])
            for c in obj["box"]:
                out.append(ids[f"coord/{c}"])
            for key, val in sorted(obj.get("attrs", {}).items()):
                out.append(ids[f"val/{val}"])
        out.append(ids["[sep]"])
        return out

    def render_trajectory_tokens(self, tokens: list[str]) -> list[int]:
        return [self.ids[t] for t in tokens]

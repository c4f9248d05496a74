from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import words

SHAPES = ("circle", "triangle", "square")
MIN_CAPTION, MAX_CAPTION = 12, 15


@dataclass(frozen=True)
class SceneObject:
    shape: str
    x: float
    y: float
    size: float
    hue: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 6:
            raise ValueError(f"a scene holds 1-6 objects, got {len(self.objects)}")
        for o in self.objects:
            if o.shape not in SHAPES:
                raise ValueError(f"unknown shape {o.shape!r}")
            if not (0.0 <= o.x <= 1.0 and 0.0 <= o.y <= 1.0):
                raise ValueError("object positions must lie in the unit square")
            if not 0.0 < o.size < 1.0:
                raise ValueError("object size is a fraction of the image width")

    @property
    def caption_tokens(self) -> list[int]:
        return caption_scene(self)


def random_scene(rng: np.random.Generator, max_objects: int = 4) -> SceneSpec:
    count = int(rng.integers(1, max_objects + 1))
    objs = tuple(
        SceneObject(
            shape=SHAPES[int(rng.integers(len(SHAPES)))],
            x=float(rng.uniform(0.2, 0.8)),
            y=float(rng.uniform(0.3, 0.8)),
            size=float(rng.uniform(0.14, 0.24)),
            hue=float(rng.uniform(0.0, 1.0)),
        )
        for _ in range(count)
    )
    return SceneSpec(seed=int(rng.integers(0, 2**63 - 1)), objects=objs)


def _position_word(x: float) -> str:
    if x < 0.4:
        return "left"
    return "center" if x <= 0.6 else "right"


def caption_scene(scene: SceneSpec) -> list[int]:
    """Template caption of 12-15 content-word ids, e.g. "two circles left one triangle right"."""
    groups: dict[tuple[int, int], int] = {}
    for o in scene.objects:
        key = (words.POSITIONS.index(_position_word(o.x)), SHAPES.index(o.shape))
        groups[key] = groups.get(key, 0) + 1
    phrases = []
    for (pos, shape), count in sorted(groups.items()):
        noun = SHAPES[shape] + ("s" if count > 1 else "")
        phrases.append([words.COUNTS[count - 1], noun, words.POSITIONS[pos]])

    prefix = ["a", "scene", "showing"]
    body = [w for p in phrases for w in p]
    while len(prefix) + len(body) > MAX_CAPTION and prefix:
        prefix.pop(0)
    while len(body) > MAX_CAPTION:
        body = body[:-3]
    tokens = prefix + body
    fillers = ["with", "some", "objects", "near", "the", "image", "and", "some", "objects"]
    tokens += fillers[: max(0, MIN_CAPTION - len(tokens))]
    return words.ids(tokens)

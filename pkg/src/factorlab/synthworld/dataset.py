"""Labelled datasets and their on-disk layout.

Layout under a data root::

    <root>/metadata.jsonl          one JSON object per sample
    <root>/<dataset_id>/<index:06d>.png   lossless 8-bit RGB

Metadata fields: ``dataset_id`` (str), ``index`` (int), ``tuple`` (object with
lens/sensor/viewpoint/domain), ``caption`` (list of content-word ids),
``seed`` (scene seed, int), ``file`` (path relative to the root).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from ..factorspace import CATEGORIES, DatasetDescriptor, FactorRegistry, FactorTuple
from .render import RenderConfig, render_scene
from .scene import caption_scene, random_scene

METADATA = "metadata.jsonl"


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    tuple: FactorTuple
    caption: tuple[int, ...]
    dataset_id: str
    index: int = 0
    seed: int = 0


def _stream_seed(seed: int, name: str) -> list[int]:
    digest = hashlib.sha256(name.encode()).digest()
    return [int(seed), int.from_bytes(digest[:4], "little")]


def build_dataset(descriptor: DatasetDescriptor, config: RenderConfig = RenderConfig(), seed: int = 0,
                  count: int | None = None) -> list[LabeledSample]:
    """``sample_count`` samples; fixed factors constant, per-image factors uniform over the allowed set."""
    rng = np.random.default_rng(_stream_seed(seed, descriptor.id))
    n = descriptor.sample_count if count is None else count
    samples = []
    for i in range(n):
        values = {}
        for cat in CATEGORIES:
            allowed = descriptor.allowed(cat)
            values[cat] = allowed[int(rng.integers(len(allowed)))] if len(allowed) > 1 else allowed[0]
        t = FactorTuple(**values)
        scene = random_scene(rng)
        samples.append(LabeledSample(render_scene(scene, t, config), t, tuple(caption_scene(scene)),
                                     descriptor.id, i, scene.seed))
    return samples


def build_world(registry: FactorRegistry, config: RenderConfig = RenderConfig(), seed: int = 0) -> list[LabeledSample]:
    return [s for d in registry.datasets for s in build_dataset(d, config, seed)]


def render_tuples(tuples: Sequence[FactorTuple], per_tuple: int, config: RenderConfig = RenderConfig(),
                  seed: int = 0, dataset_id: str = "render") -> list[LabeledSample]:
    """Fresh scenes rendered under given tuples (used for classifier splits and references)."""
    rng = np.random.default_rng(_stream_seed(seed, dataset_id))
    out = []
    for t in tuples:
        for _ in range(per_tuple):
            scene = random_scene(rng)
            out.append(LabeledSample(render_scene(scene, t, config), t, tuple(caption_scene(scene)),
                                     dataset_id, len(out), scene.seed))
    return out


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG", optimize=False)


def load_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def write_samples(root: str | Path, samples: Iterable[LabeledSample]) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    with open(root / METADATA, "w", encoding="utf-8") as meta:
        for s in samples:
            rel = Path(s.dataset_id) / f"{s.index:06d}.png"
            (root / rel.parent).mkdir(parents=True, exist_ok=True)
            save_png(root / rel, s.image)
            written.append(root / rel)
            meta.write(json.dumps({
                "dataset_id": s.dataset_id, "index": s.index, "tuple": s.tuple.as_dict(),
                "caption": list(s.caption), "seed": s.seed, "file": rel.as_posix(),
            }, sort_keys=True) + "\n")
    written.append(root / METADATA)
    return written


def read_samples(root: str | Path) -> list[LabeledSample]:
    root = Path(root)
    out = []
    with open(root / METADATA, encoding="utf-8") as meta:
        for line in meta:
            rec = json.loads(line)
            out.append(LabeledSample(load_png(root / rec["file"]), FactorTuple(**rec["tuple"]),
                                     tuple(rec["caption"]), rec["dataset_id"], rec["index"], rec["seed"]))
    return out


def group_by_dataset(samples: Iterable[LabeledSample]) -> dict[str, list[LabeledSample]]:
    out: dict[str, list[LabeledSample]] = {}
    for s in samples:
        out.setdefault(s.dataset_id, []).append(s)
    return out


def images_tensor(samples: Sequence[LabeledSample]):
    import torch
    return torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous()

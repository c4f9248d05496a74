"""Text-to-image and edge-conditioned generation with learned factor tokens or plain words."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .diffusion.backbone import Backbone, guided_sample
from .factorspace import CATEGORIES, FactorTuple
from .multitrain import InversionState
from .synthworld.edges import extract_edges
from .synthworld.render import RenderConfig, render_scene
from .synthworld.scene import caption_scene, random_scene
from .textencode import PromptError, Stage, assemble_prompt, encode_prompts, zeroshot_words

METHODS = ("multi", "zeroshot")


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    guidance: float = 2.5
    batch_size: int = 32


def _seed(*parts) -> int:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass
class GenerationRequest:
    """Per-image prompt content: tuple, caption ids and optional edge map."""

    tuples: list[FactorTuple]
    captions: list[tuple[int, ...]]
    controls: list[np.ndarray] | None = None


def scene_requests(tuples: Sequence[FactorTuple], count: int, seed: int, control: bool = False,
                   resolution: int = 32) -> GenerationRequest:
    """``count`` fresh scenes per tuple; edges (if requested) come from a render of the same
    scene under the intended tuple. Identical across methods for paired comparison."""
    out_t, out_c, out_e = [], [], []
    cfg = RenderConfig(resolution, resolution)
    for t in tuples:
        rng = np.random.default_rng(_seed(seed, t.to_string(), "scenes"))
        for _ in range(count):
            scene = random_scene(rng)
            out_t.append(t)
            out_c.append(tuple(caption_scene(scene)))
            if control:
                out_e.append(extract_edges(render_scene(scene, t, cfg)))
    return GenerationRequest(out_t, out_c, out_e if control else None)


def conditioning(backbone: Backbone, method: str, tuples: Sequence[FactorTuple], captions: Sequence[Sequence[int]],
                 state: InversionState | None = None, specific: Mapping[str, str] | None = None) -> torch.Tensor:
    with torch.no_grad():
        if method == "multi":
            if state is None:
                raise PromptError("multi generation needs a trained inversion state")
            prompts = [assemble_prompt(t, c, state.n, Stage.INFERENCE, specific) for t, c in zip(tuples, captions)]
            return encode_prompts(prompts, state.tables(), backbone.text_encoder)
        if method == "zeroshot":
            return backbone.text_encoder.encode_words([zeroshot_words(t) + list(c) for t, c in zip(tuples, captions)])
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


def generate(backbone: Backbone, request: GenerationRequest, method: str, seed: int,
             state: InversionState | None = None, specific: Mapping[str, str] | None = None,
             sampler: SamplerConfig = SamplerConfig()) -> np.ndarray:
    """Returns N x H x W x 3 float32 images in [0, 1]; deterministic given ``seed``."""
    if specific:
        unknown = set(specific) - set(CATEGORIES)
        if unknown:
            raise PromptError(f"unknown categories {sorted(unknown)}")
    null = backbone.text_encoder.null_conditioning().detach()
    res = backbone.config.resolution
    images = []
    n = len(request.tuples)
    for start in range(0, n, sampler.batch_size):
        sl = slice(start, min(n, start + sampler.batch_size))
        cond = conditioning(backbone, method, request.tuples[sl], request.captions[sl], state, specific)
        control = None
        if request.controls is not None:
            control = torch.from_numpy(np.stack(request.controls[sl]))[:, None].float()
        out = guided_sample(backbone.denoiser, backbone.schedule, cond, null, steps=sampler.steps,
                            guidance=sampler.guidance, seed=_seed(seed, start, "sample"),
                            control=control, resolution=res)
        images.append(out.numpy().astype(np.float32))
    return np.concatenate(images) if images else np.zeros((0, res, res, 3), np.float32)

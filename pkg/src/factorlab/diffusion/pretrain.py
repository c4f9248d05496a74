"""Creates theta_frozen: joint training of denoiser, text encoder and word table."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .. import words
from ..factorspace import CATEGORIES
from ..synthworld.dataset import LabeledSample, images_tensor
from ..synthworld.edges import extract_edges
from .backbone import Backbone, BackboneConfig, NonFiniteLossError, diffusion_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 2e-3
    weight_decay: float = 1e-2
    warmup: int = 100
    ema_decay: float = 0.995
    null_prob: float = 0.1
    control_prob: float = 0.5
    descriptor_prob: float = 0.5
    max_repeat: int = 15
    val_fraction: float = 0.05
    seed: int = 0


def pretrain_caption(sample: LabeledSample, rng: np.random.Generator, cfg: PretrainConfig) -> list[int]:
    """Alt-text style caption: appearance words (each kept with descriptor_prob, all
    repeated r times) followed by the content caption."""
    kept = [words.word_id(words.DESCRIPTORS[(c, sample.tuple[c])])
            for c in CATEGORIES if rng.random() < cfg.descriptor_prob]
    repeat = int(rng.integers(1, cfg.max_repeat + 1))
    prefix = [w for w in kept for _ in range(repeat)]
    caption = list(sample.caption)
    while len(prefix) + len(caption) > 77:
        prefix = prefix[len(kept):]
    return prefix + caption


def _split(samples, fraction, rng):
    order = rng.permutation(len(samples))
    n_val = max(1, int(round(len(samples) * fraction)))
    return [samples[i] for i in order[n_val:]], [samples[i] for i in order[:n_val]]


def validation_loss(backbone: Backbone, samples: Sequence[LabeledSample], seed: int = 1234,
                    batch_size: int = 64) -> float:
    """Content-caption loss on fixed (t, eps) draws; comparable across checkpoints."""
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            z0 = Backbone.encode_image(images_tensor(chunk))
            cond = backbone.text_encoder.encode_words([s.caption for s in chunk])
            loss = diffusion_loss(backbone.denoiser, backbone.schedule, z0, cond, generator=gen, per_sample=True)
            total += float(loss.sum())
            count += len(chunk)
    return total / count


def cosine_lr(step: int, total: int, warmup: int, peak: float) -> float:
    if step < warmup:
        return peak * (step + 1) / warmup
    progress = (step - warmup) / max(1, total - warmup)
    return peak * 0.5 * (1 + math.cos(math.pi * min(1.0, progress)))


def pretrain_backbone(
    samples: Sequence[LabeledSample],
    config: BackboneConfig = BackboneConfig(),
    train: PretrainConfig = PretrainConfig(),
    callback: Callable[[int, float], None] | None = None,
) -> tuple[Backbone, dict]:
    """Train on the noise-prediction loss with content/appearance captions; returns the frozen EMA backbone and a report."""
    torch.manual_seed(train.seed)
    rng = np.random.default_rng(train.seed)
    backbone = Backbone(config, seed=train.seed)
    train_set, val_set = _split(list(samples), train.val_fraction, rng)
    report = {"config": asdict(train), "val_loss_init": validation_loss(backbone, val_set)}

    params = list(backbone.parameters())
    opt = torch.optim.AdamW(params, lr=train.lr, weight_decay=train.weight_decay)
    ema = [p.detach().clone() for p in params]
    images = images_tensor(train_set)
    edges = torch.from_numpy(np.stack([extract_edges(s.image) for s in train_set]))[:, None] if config.denoiser.control else None
    gen = torch.Generator().manual_seed(train.seed)
    losses = []
    for step in range(train.steps):
        idx = rng.integers(0, len(train_set), size=train.batch_size)
        batch = [train_set[i] for i in idx]
        captions = [[] if rng.random() < train.null_prob else pretrain_caption(s, rng, train) for s in batch]
        z0 = Backbone.encode_image(images[idx])
        cond = backbone.text_encoder.encode_words(captions)
        control = None
        if edges is not None:
            keep = torch.from_numpy(rng.random(len(idx)) < train.control_prob).float()[:, None, None, None]
            control = edges[idx] * keep
        for g in opt.param_groups:
            g["lr"] = cosine_lr(step, train.steps, train.warmup, train.lr)
        try:
            loss = diffusion_loss(backbone.denoiser, backbone.schedule, z0, cond, control=control, generator=gen)
        except NonFiniteLossError as exc:
            raise NonFiniteLossError(f"pretraining diverged at step {step}") from exc
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, 1.0)
        opt.step()
        with torch.no_grad():
            for e, p in zip(ema, params):
                e.mul_(train.ema_decay).add_(p.detach(), alpha=1 - train.ema_decay)
        losses.append(loss.item())
        if callback is not None:
            callback(step, losses[-1])
        if step % 200 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])

    with torch.no_grad():
        for e, p in zip(ema, params):
            p.copy_(e)
    backbone.freeze()
    report["val_loss_final"] = validation_loss(backbone, val_set)
    report["train_loss_tail"] = float(np.mean(losses[-100:])) if losses else None
    return backbone, report

"""Two-stage factor-token optimisation against a frozen backbone.

Stage 1 learns one general multi-vector token per (category, value) from
factor-overlap batches. Stage 2 copies the general tokens into per-dataset
specific tokens and refines them one dataset at a time, updating a single
randomly chosen category per step.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .diffusion.backbone import Backbone, NonFiniteLossError, diffusion_loss
from .factorspace import CATEGORIES, FactorRegistry
from .synthworld.dataset import LabeledSample, images_tensor
from .tensorio import DigestMismatchError, TensorState, load_state, save_state
from .textencode import (PromptSpec, Stage, assemble_prompt, encode_prompts, general_token,
                         init_factor_token, specific_token)

log = logging.getLogger(__name__)
KIND = "inversion"


class DivergenceError(FloatingPointError):
    pass


class StageError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.1
    stage: Stage = Stage.S1
    seed: int = 0
    max_steps: int | None = None  # truncates the run; the schedule still spans the full run

    def __post_init__(self):
        object.__setattr__(self, "stage", Stage(self.stage))
        if self.lr <= 0 or self.weight_decay < 0 or self.epochs < 1:
            raise ValueError("epochs >= 1 and positive rates required")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.stage is Stage.S1 and self.batch_size < 2:
            raise ValueError("stage-1 overlap batches need batch_size >= 2")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage"] = self.stage.value
        return d


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    """Linear warmup to ``config.lr`` over the warmup fraction, then cosine decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(config.warmup_fraction * total_steps))
    if step < warmup:
        return config.lr * step / warmup
    if total_steps == warmup:
        return config.lr
    progress = (step - warmup) / (total_steps - warmup)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------------------- batches

@dataclass
class OverlapBatch:
    samples: list[LabeledSample]
    prompts: list[PromptSpec]
    category: str
    value: str
    dataset_ids: list[str]
    fallback: bool = False


class OverlapSampler:
    """Index of samples by (category, value, dataset) for repeated overlap-batch draws."""

    def __init__(self, registry: FactorRegistry, datasets: Mapping[str, Sequence[LabeledSample]]):
        if not datasets or not any(len(s) for s in datasets.values()):
            raise ValueError("no datasets to sample from")
        self.registry = registry
        self.datasets = {k: list(v) for k, v in sorted(datasets.items()) if len(v)}
        index: dict[tuple[str, str], dict[str, list[int]]] = defaultdict(dict)
        for ds_id, samples in self.datasets.items():
            for cat in CATEGORIES:
                by_value = defaultdict(list)
                for i, s in enumerate(samples):
                    by_value[s.tuple[cat]].append(i)
                for value, idx in by_value.items():
                    index[(cat, value)][ds_id] = idx
        self.index = {k: index[k] for k in sorted(index, key=self._order)}
        self.eligible = [k for k, carriers in self.index.items() if len(carriers) >= 2]

    def _order(self, key):
        cat, value = key
        values = self.registry.values(cat)
        return (CATEGORIES.index(cat), values.index(value) if value in values else len(values), value)

    @property
    def pairs(self) -> list[tuple[str, str]]:
        return list(self.index)

    def sample(self, batch_size: int, rng: np.random.Generator, n: int = 15) -> OverlapBatch:
        fallback = not self.eligible
        pool = self.pairs if fallback else self.eligible
        cat, value = pool[int(rng.integers(len(pool)))]
        carriers = sorted(self.index[(cat, value)])
        order = [carriers[i] for i in rng.permutation(len(carriers))]
        samples, ids = [], []
        for j in range(batch_size):
            ds_id = order[j % len(order)]
            idx = self.index[(cat, value)][ds_id]
            samples.append(self.datasets[ds_id][idx[int(rng.integers(len(idx)))]])
            ids.append(ds_id)
        prompts = [assemble_prompt(s.tuple, s.caption, n, Stage.S1) for s in samples]
        return OverlapBatch(samples, prompts, cat, value, ids, fallback)


def sample_overlap_batch(registry: FactorRegistry, datasets: Mapping[str, Sequence[LabeledSample]],
                         batch_size: int, rng: np.random.Generator, n: int = 15) -> OverlapBatch:
    return OverlapSampler(registry, datasets).sample(batch_size, rng, n)


# ----------------------------------------------------------------------------- state

@dataclass
class InversionState:
    """General and specific factor tokens, one trainable tensor per token."""

    n: int
    backbone_fingerprint: str
    general: dict[tuple[str, str], nn.Parameter] = field(default_factory=dict)
    specific: dict[tuple[str, str, str], nn.Parameter] = field(default_factory=dict)
    moments: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)
    step: int = 0
    stage1_done: bool = False
    log: list[dict] = field(default_factory=list)

    def tables(self) -> dict:
        return {**self.general, **self.specific}

    def token_name(self, key) -> str:
        return general_token(*key) if len(key) == 2 else specific_token(*key)

    def named_tokens(self) -> dict[str, nn.Parameter]:
        return {self.token_name(k): p for k, p in self.tables().items()}

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in self.named_tokens().items()}

    def state(self) -> TensorState:
        tensors = {f"token/{name}": p.detach() for name, p in self.named_tokens().items()}
        for name, moms in self.moments.items():
            for m, value in moms.items():
                tensors[f"opt/{name}/{m}"] = value
        meta = {
            "kind": KIND,
            "config": {"n": self.n, "backbone": self.backbone_fingerprint},
            "step": self.step,
            "stage1_done": self.stage1_done,
            "general": [list(k) for k in self.general],
            "specific": [list(k) for k in self.specific],
            "log": self.log,
        }
        return TensorState(meta, tensors)

    def save(self, path) -> str:
        return save_state(path, self.state())

    @classmethod
    def from_state(cls, state: TensorState, backbone: Backbone | None = None) -> "InversionState":
        if state.meta.get("kind") != KIND:
            raise DigestMismatchError(f"expected an inversion checkpoint, found {state.meta.get('kind')!r}")
        fp = state.meta["config"]["backbone"]
        if backbone is not None and backbone.fingerprint() != fp:
            raise DigestMismatchError("inversion checkpoint was trained against a different backbone")
        inv = cls(state.meta["config"]["n"], fp, step=state.meta["step"],
                  stage1_done=state.meta["stage1_done"], log=list(state.meta["log"]))
        for key in state.meta["general"]:
            inv.general[tuple(key)] = nn.Parameter(state.tensors[f"token/{general_token(*key)}"].clone())
        for key in state.meta["specific"]:
            inv.specific[tuple(key)] = nn.Parameter(state.tensors[f"token/{specific_token(*key)}"].clone())
        for name, value in state.tensors.items():
            if name.startswith("opt/"):
                token, m = name[4:].rsplit("/", 1)
                inv.moments.setdefault(token, {})[m] = value.clone()
        return inv

    @classmethod
    def load(cls, path, backbone: Backbone | None = None) -> "InversionState":
        return cls.from_state(load_state(path), backbone)


def init_state(backbone: Backbone, registry: FactorRegistry, n: int = 15) -> InversionState:
    """General tokens initialised as n copies of the embedding of the value's name."""
    if not backbone.frozen:
        raise StageError("the backbone must be frozen before inversion")
    state = InversionState(n, backbone.fingerprint())
    for cat in CATEGORIES:
        for value in registry.values(cat):
            emb = init_factor_token(value, n, backbone.text_encoder)
            state.general[(cat, value)] = nn.Parameter(emb.vectors)
    return state


def init_specific(state: InversionState, registry: FactorRegistry, dataset_id: str) -> list[tuple[str, str, str]]:
    """Copy the general tokens into specific tokens for every factor value the dataset carries."""
    if not state.stage1_done:
        raise StageError("stage 1 must complete before specific tokens are created")
    d = registry.dataset(dataset_id)
    keys = []
    for cat in CATEGORIES:
        for value in d.allowed(cat):
            key = (cat, value, dataset_id)
            state.specific[key] = nn.Parameter(state.general[(cat, value)].detach().clone())
            keys.append(key)
    return keys


# ----------------------------------------------------------------------------- training

class _TokenOptimizer:
    """AdamW over per-token tensors; tokens without a gradient in a step are untouched."""

    def __init__(self, state: InversionState, keys, config: TrainConfig):
        self.state = state
        self.params = {state.token_name(k): state.tables()[k] for k in keys}
        self.opt = torch.optim.AdamW(list(self.params.values()), lr=config.lr,
                                     weight_decay=config.weight_decay, foreach=False)
        for name, p in self.params.items():
            moms = state.moments.get(name)
            if moms:
                self.opt.state[p] = {"step": moms["step"].reshape(()).clone(),
                                     "exp_avg": moms["exp_avg"].clone(),
                                     "exp_avg_sq": moms["exp_avg_sq"].clone()}

    def step(self, lr: float):
        for g in self.opt.param_groups:
            g["lr"] = lr
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)

    def export(self):
        for name, p in self.params.items():
            st = self.opt.state.get(p)
            if st:
                self.state.moments[name] = {"step": st["step"].reshape(1).clone(),
                                            "exp_avg": st["exp_avg"].clone(),
                                            "exp_avg_sq": st["exp_avg_sq"].clone()}


def _check_backbone(state: InversionState, backbone: Backbone):
    if not backbone.frozen:
        raise StageError("the backbone must be frozen")
    if backbone.fingerprint() != state.backbone_fingerprint:
        raise DigestMismatchError("inversion state belongs to a different backbone")


def _loss(backbone: Backbone, tables: Mapping, samples, prompts, gen) -> torch.Tensor:
    cond = encode_prompts(prompts, tables, backbone.text_encoder)
    z0 = Backbone.encode_image(images_tensor(samples))
    try:
        return diffusion_loss(backbone.denoiser, backbone.schedule, z0, cond, generator=gen)
    except NonFiniteLossError as exc:
        raise DivergenceError(str(exc)) from exc


def prompt_loss(backbone: Backbone, state: InversionState, samples: Sequence[LabeledSample],
                specific_map: Callable[[LabeledSample], dict] | None = None,
                seed: int = 4321, batch_size: int = 64) -> float:
    """Mean diffusion loss on fixed (t, eps) draws using factor-token prompts."""
    gen = torch.Generator().manual_seed(seed)
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = list(samples[i:i + batch_size])
            prompts = [assemble_prompt(s.tuple, s.caption, state.n, Stage.INFERENCE,
                                       specific_map(s) if specific_map else None) for s in chunk]
            cond = encode_prompts(prompts, state.tables(), backbone.text_encoder)
            z0 = Backbone.encode_image(images_tensor(chunk))
            total += diffusion_loss(backbone.denoiser, backbone.schedule, z0, cond,
                                    generator=gen, per_sample=True).sum().item()
    return total / max(1, len(samples))


def stage1_steps(datasets: Mapping[str, Sequence[LabeledSample]], config: TrainConfig) -> int:
    n = sum(len(v) for v in datasets.values())
    return config.epochs * math.ceil(n / config.batch_size)


def stage1_train(
    state: InversionState,
    backbone: Backbone,
    registry: FactorRegistry,
    datasets: Mapping[str, Sequence[LabeledSample]],
    config: TrainConfig = TrainConfig(),
    validation: Sequence[LabeledSample] = (),
    on_step: Callable[[int, OverlapBatch, float], None] | None = None,
) -> InversionState:
    """Optimise the general tokens on factor-overlap batches; only tokens in a step's prompts move."""
    _check_backbone(state, backbone)
    config = replace(config, stage=Stage.S1)
    sampler = OverlapSampler(registry, datasets)
    rng = np.random.default_rng([config.seed, 1])
    gen = torch.Generator().manual_seed(config.seed)
    opt = _TokenOptimizer(state, list(state.general), config)
    total = stage1_steps(datasets, config)
    per_epoch = math.ceil(total / config.epochs)
    run = total if config.max_steps is None else min(total, config.max_steps)
    if validation:
        state.log.append({"stage": "S1", "epoch": 0, "val_loss": prompt_loss(backbone, state, validation)})
    epoch_losses = []
    for step in range(run):
        batch = sampler.sample(config.batch_size, rng, state.n)
        if batch.fallback:
            log.warning("overlap batch fell back to a single dataset for %s=%s", batch.category, batch.value)
        loss = _loss(backbone, state.general, batch.samples, batch.prompts, gen)
        loss.backward()
        opt.step(lr_schedule(step + 1, total, config))
        epoch_losses.append(loss.item())
        state.step += 1
        if on_step is not None:
            on_step(step, batch, epoch_losses[-1])
        if (step + 1) % per_epoch == 0 or step + 1 == run:
            entry = {"stage": "S1", "epoch": math.ceil((step + 1) / per_epoch), "step": step + 1,
                     "train_loss": float(np.mean(epoch_losses))}
            if validation:
                entry["val_loss"] = prompt_loss(backbone, state, validation)
            state.log.append(entry)
            log.info("stage 1 %s", entry)
            epoch_losses = []
    opt.export()
    state.stage1_done = True
    return state


def draw_k_star(rng: np.random.Generator) -> str:
    """The category whose specific token is trained in a stage-2 step, uniform over categories."""
    return CATEGORIES[int(rng.integers(len(CATEGORIES)))]


def stage2_train(
    state: InversionState,
    backbone: Backbone,
    registry: FactorRegistry,
    dataset_id: str,
    samples: Sequence[LabeledSample],
    config: TrainConfig = TrainConfig(stage=Stage.S2),
    on_step: Callable[[int, str, list, float], None] | None = None,
) -> InversionState:
    """Refine the specific tokens of one dataset; each step updates only the sampled category k*."""
    if not state.stage1_done:
        raise StageError("stage 1 state missing")
    if dataset_id not in {d.id for d in registry.datasets}:
        raise KeyError(f"unknown dataset {dataset_id!r}")
    if not samples:
        raise ValueError(f"dataset {dataset_id!r} has no samples")
    _check_backbone(state, backbone)
    config = replace(config, stage=Stage.S2)
    keys = [k for k in state.specific if k[2] == dataset_id] or init_specific(state, registry, dataset_id)
    seed_offset = [d.id for d in registry.datasets].index(dataset_id)
    rng = np.random.default_rng([config.seed, 2, seed_offset])
    gen = torch.Generator().manual_seed(config.seed * 1000 + 7919 + seed_offset)
    opt = _TokenOptimizer(state, keys, config)
    samples = list(samples)
    per_epoch = math.ceil(len(samples) / config.batch_size)
    total = config.epochs * per_epoch
    run = total if config.max_steps is None else min(total, config.max_steps)
    frozen_general = {k: p.detach() for k, p in state.general.items()}
    counts = {c: 0 for c in CATEGORIES}
    order = np.array([], dtype=np.int64)
    losses = []
    for step in range(run):
        if len(order) < config.batch_size:
            order = np.concatenate([order, rng.permutation(len(samples))])
        idx, order = order[:config.batch_size], order[config.batch_size:]
        batch = [samples[i] for i in idx]
        k_star = draw_k_star(rng)
        counts[k_star] += 1
        prompts = [assemble_prompt(s.tuple, s.caption, state.n, Stage.S2, {k_star: dataset_id}) for s in batch]
        loss = _loss(backbone, {**frozen_general, **state.specific}, batch, prompts, gen)
        loss.backward()
        updated = sorted({state.token_name((k_star, s.tuple[k_star], dataset_id)) for s in batch})
        opt.step(lr_schedule(step + 1, total, config))
        losses.append(loss.item())
        state.step += 1
        if on_step is not None:
            on_step(step, k_star, updated, losses[-1])
    opt.export()
    entry = {"stage": "S2", "dataset": dataset_id, "steps": run, "k_star_counts": counts,
             "train_loss": float(np.mean(losses)) if losses else None}
    state.log.append(entry)
    log.info("stage 2 %s", entry)
    return state


def append_jsonl(path, record: dict) -> None:
    with Path(path).open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")

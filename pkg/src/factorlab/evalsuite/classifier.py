"""Factor classifier: a small CNN trunk trained on one split and frozen, then four
independent linear heads trained on a disjoint split with summed cross-entropy."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..factorspace import CATEGORIES, FactorRegistry, FactorTuple
from ..synthworld.dataset import LabeledSample, images_tensor
from ..tensorio import TensorState, load_module_tensors, module_tensors

log = logging.getLogger(__name__)
KIND = "faa-classifier"


class LabelCoverageError(ValueError):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    width: int = 32
    feature_dim: int = 64
    trunk_epochs: int = 12
    trunk_lr: float = 2e-3
    trunk_batch_size: int = 32
    head_epochs: int = 10
    head_lr: float = 1e-4
    head_weight_decay: float = 1e-2
    batch_size: int = 8
    min_label_count: int = 20
    seed: int = 0


class Trunk(nn.Module):
    def __init__(self, width: int = 32, feature_dim: int = 64):
        super().__init__()
        w = width
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(w, w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * w, feature_dim, 3, padding=1), nn.SiLU(),
            nn.Conv2d(feature_dim, feature_dim, 3, stride=2, padding=1),
        )
        # fixed standardisation of pooled features, set once after trunk training
        self.register_buffer("mean", torch.zeros(feature_dim))
        self.register_buffer("std", torch.ones(feature_dim))

    def raw(self, x):
        return self.net(x).mean(dim=(2, 3))

    def forward(self, x):
        return (self.raw(x) - self.mean) / self.std


class FAAClassifier(nn.Module):
    def __init__(self, registry: FactorRegistry, cfg: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.cfg = cfg
        self.values = {c: registry.values(c) for c in CATEGORIES}
        self.trunk = Trunk(cfg.width, cfg.feature_dim)
        self.heads = nn.ModuleDict({c: nn.Linear(cfg.feature_dim, len(self.values[c])) for c in CATEGORIES})

    def reset_head(self, category: str, generator: torch.Generator | None = None):
        head = self.heads[category]
        with torch.no_grad():
            head.weight.normal_(0.0, 0.01, generator=generator)
            head.bias.zero_()

    @torch.no_grad()
    def features(self, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
        """images: N x 3 x H x W in [0, 1]."""
        return torch.cat([self.trunk(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])

    def logits(self, feats: torch.Tensor) -> dict[str, torch.Tensor]:
        return {c: self.heads[c](feats) for c in CATEGORIES}

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> list[FactorTuple]:
        logits = self.logits(self.features(images))
        idx = {c: logits[c].argmax(dim=1).tolist() for c in CATEGORIES}
        return [FactorTuple(*(self.values[c][idx[c][i]] for c in CATEGORIES)) for i in range(len(images))]

    def state(self) -> TensorState:
        meta = {"kind": KIND, "config": {"classifier": asdict(self.cfg), "values": {c: list(v) for c, v in self.values.items()}}}
        return TensorState(meta, module_tensors(self, "clf"))

    @classmethod
    def from_state(cls, state: TensorState, registry: FactorRegistry) -> "FAAClassifier":
        clf = cls(registry, ClassifierConfig(**state.meta["config"]["classifier"]))
        load_module_tensors(clf, state.tensors, "clf")
        return clf.eval()


def labels_tensor(samples: Sequence[LabeledSample], registry: FactorRegistry) -> dict[str, torch.Tensor]:
    return {c: torch.tensor([registry.values(c).index(s.tuple[c]) for s in samples]) for c in CATEGORIES}


def check_coverage(samples: Sequence[LabeledSample], registry: FactorRegistry, minimum: int):
    for c in CATEGORIES:
        for v in registry.values(c):
            n = sum(1 for s in samples if s.tuple[c] == v)
            if n < minimum:
                raise LabelCoverageError(f"{c}={v} has {n} training labels, need >= {minimum}")


def summed_cross_entropy(logits: dict[str, torch.Tensor], labels: dict[str, torch.Tensor]) -> torch.Tensor:
    return sum(F.cross_entropy(logits[c], labels[c]) for c in CATEGORIES)


def _epochs(n, batch_size, epochs, gen):
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        for i in range(0, n, batch_size):
            yield order[i:i + batch_size]


def train_heads(clf: FAAClassifier, feats: torch.Tensor, labels: dict[str, torch.Tensor],
                categories=CATEGORIES, seed: int = 0) -> list[float]:
    """Train the named heads on frozen features; other heads are untouched."""
    cfg = clf.cfg
    gen = torch.Generator().manual_seed(seed)
    for c in categories:
        clf.reset_head(c, gen)
    params = [p for c in categories for p in clf.heads[c].parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.head_lr, weight_decay=cfg.head_weight_decay)
    losses = []
    for idx in _epochs(len(feats), cfg.batch_size, cfg.head_epochs, gen):
        loss = sum(F.cross_entropy(clf.heads[c](feats[idx]), labels[c][idx]) for c in categories)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses


def train_faa_classifier(
    trunk_samples: Sequence[LabeledSample],
    head_samples: Sequence[LabeledSample],
    heldout: Sequence[LabeledSample],
    registry: FactorRegistry,
    cfg: ClassifierConfig = ClassifierConfig(),
) -> tuple[FAAClassifier, dict]:
    """Trunk on ``trunk_samples`` (then frozen), heads on the disjoint ``head_samples``."""
    check_coverage(head_samples, registry, cfg.min_label_count)
    torch.manual_seed(cfg.seed)
    clf = FAAClassifier(registry, cfg)
    gen = torch.Generator().manual_seed(cfg.seed)

    x = images_tensor(trunk_samples)
    y = labels_tensor(trunk_samples, registry)
    temp_heads = nn.ModuleDict({c: nn.Linear(cfg.feature_dim, len(registry.values(c))) for c in CATEGORIES})
    opt = torch.optim.AdamW(list(clf.trunk.parameters()) + list(temp_heads.parameters()), lr=cfg.trunk_lr)
    steps_total = cfg.trunk_epochs * ((len(x) + cfg.trunk_batch_size - 1) // cfg.trunk_batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, cfg.trunk_lr, total_steps=max(1, steps_total))
    for idx in _epochs(len(x), cfg.trunk_batch_size, cfg.trunk_epochs, gen):
        feats = clf.trunk.raw(x[idx])
        loss = summed_cross_entropy({c: temp_heads[c](feats) for c in CATEGORIES}, {c: y[c][idx] for c in CATEGORIES})
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
    with torch.no_grad():
        raw = torch.cat([clf.trunk.raw(x[i:i + 256]) for i in range(0, len(x), 256)])
        clf.trunk.mean.copy_(raw.mean(0))
        clf.trunk.std.copy_(raw.std(0).clamp_min(1e-4))
    for p in clf.trunk.parameters():
        p.requires_grad_(False)
    clf.trunk.eval()

    head_feats = clf.features(images_tensor(head_samples))
    head_labels = labels_tensor(head_samples, registry)
    losses = train_heads(clf, head_feats, head_labels, seed=cfg.seed)
    clf.eval()

    report = {"head_loss_first": losses[0], "head_loss_last": losses[-1],
              "heldout_accuracy": heldout_accuracy(clf, heldout, registry)}
    return clf, report


def heldout_accuracy(clf: FAAClassifier, samples: Sequence[LabeledSample], registry: FactorRegistry) -> dict[str, float]:
    preds = clf.predict(images_tensor(samples))
    acc = {c: float(np.mean([p[c] == s.tuple[c] for p, s in zip(preds, samples)])) for c in CATEGORIES}
    acc["average"] = float(np.mean([acc[c] for c in CATEGORIES]))
    return acc

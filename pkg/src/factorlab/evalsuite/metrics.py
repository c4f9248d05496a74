"""Factor-alignment accuracy, Frechet feature distance, diversity and embedding projection."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from ..factorspace import CATEGORIES, FactorTuple
from .classifier import FAAClassifier, Trunk


class TooFewSamplesError(ValueError):
    pass


def _as_batch(images) -> torch.Tensor:
    """Accepts N x H x W x 3 (numpy or torch) or N x 3 x H x W tensors in [0, 1]."""
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images, dtype=torch.float32)
    if x.ndim != 4:
        raise ValueError("expected a batch of images")
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
    return x.contiguous()


def faa_from_predictions(predicted: Sequence[FactorTuple], intended: Sequence[FactorTuple]) -> dict[str, float]:
    if len(predicted) != len(intended) or not predicted:
        raise ValueError("need one prediction per intended tuple and at least one image")
    acc = {c: float(np.mean([p[c] == t[c] for p, t in zip(predicted, intended)])) for c in CATEGORIES}
    acc["average"] = float(np.mean([acc[c] for c in CATEGORIES]))
    return acc


def compute_faa(images, intended: Sequence[FactorTuple], classifier: FAAClassifier) -> dict[str, float]:
    """Per-category fraction of images whose predicted value equals the intended one, plus the mean."""
    if len(intended) == 0:
        raise ValueError("at least one image is required")
    return faa_from_predictions(classifier.predict(_as_batch(images)), intended)


@torch.no_grad()
def trunk_features(images, trunk: Trunk, batch_size: int = 256) -> np.ndarray:
    x = _as_batch(images)
    return torch.cat([trunk(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]).double().numpy()


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, ridge: float = 1e-6) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    feats_a = np.asarray(feats_a, dtype=np.float64)
    feats_b = np.asarray(feats_b, dtype=np.float64)
    if feats_a.ndim == 1:
        feats_a, feats_b = feats_a[:, None], feats_b[:, None]
    dim = feats_a.shape[1]
    for f in (feats_a, feats_b):
        if len(f) < dim + 1:
            raise TooFewSamplesError(f"{len(f)} samples for {dim}-dim features; need at least {dim + 1}")
    mu_a, mu_b = feats_a.mean(0), feats_b.mean(0)
    cov_a = np.atleast_2d(np.cov(feats_a, rowvar=False)) + ridge * np.eye(dim)
    cov_b = np.atleast_2d(np.cov(feats_b, rowvar=False)) + ridge * np.eye(dim)
    # evaluate in a canonical argument order so that swapping the sets is bit-exact
    if (mu_b.tobytes(), cov_b.tobytes()) < (mu_a.tobytes(), cov_a.tobytes()):
        mu_a, mu_b, cov_a, cov_b = mu_b, mu_a, cov_b, cov_a
    # Tr((A B)^1/2) computed symmetrically as Tr((A^1/2 B A^1/2)^1/2)
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def frechet_feature_distance(images_a, images_b, trunk: Trunk) -> float:
    return frechet_distance(trunk_features(images_a, trunk), trunk_features(images_b, trunk))


def pairwise_diversity(feats: np.ndarray) -> float:
    """Mean pairwise Euclidean distance of L2-normalised feature vectors."""
    feats = np.asarray(feats, dtype=np.float64)
    if len(feats) < 2:
        raise TooFewSamplesError("diversity needs at least two images")
    unit = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    d = np.sqrt(np.clip(((unit[:, None, :] - unit[None, :, :]) ** 2).sum(-1), 0.0, None))
    iu = np.triu_indices(len(feats), 1)
    return float(np.sort(d[iu]).mean())


def diversity_score(images, trunk: Trunk) -> float:
    if len(images) < 2:
        raise TooFewSamplesError("diversity needs at least two images")
    return pairwise_diversity(trunk_features(images, trunk))


# ----------------------------------------------------------------------------- embedding geometry

@dataclass
class EmbeddingProjection:
    names: list[str]
    meta: list[dict]
    coords: np.ndarray          # tokens x 2
    coords10: np.ndarray        # tokens x k (k <= 10)
    nearest_general: dict[str, dict]

    def specific_self_match_rate(self) -> float:
        rows = [v for v in self.nearest_general.values()]
        return float(np.mean([r["self_match"] for r in rows])) if rows else float("nan")

    def to_dict(self) -> dict:
        return {"tokens": [dict(m, name=n, x=float(c[0]), y=float(c[1]))
                           for n, m, c in zip(self.names, self.meta, self.coords)],
                "nearest_general": self.nearest_general,
                "specific_self_match_rate": self.specific_self_match_rate()}


def pca(x: np.ndarray, k: int) -> np.ndarray:
    """Centered projection onto the top-k principal directions (SVD, deterministic sign)."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(0)
    u, s, vt = np.linalg.svd(centered, full_matrices=False)
    k = min(k, vt.shape[0])
    signs = np.sign(vt[:k][np.arange(k), np.abs(vt[:k]).argmax(1)])
    signs[signs == 0] = 1.0
    return centered @ (vt[:k] * signs[:, None]).T


def project_embeddings(general: Mapping[tuple, torch.Tensor], specific: Mapping[tuple, torch.Tensor]) -> EmbeddingProjection:
    """Average each token's n rows, PCA to 10 dims, then PCA again to 2 dims for plotting."""
    keys = list(general) + list(specific)
    if len(keys) < 3:
        raise TooFewSamplesError("projection needs at least three tokens")
    means = np.stack([np.asarray(torch.as_tensor(({**general, **specific})[k]).detach().double().mean(0)) for k in keys])
    coords10 = pca(means, 10)
    coords = pca(coords10, 2)
    names, meta = [], []
    for k in keys:
        if len(k) == 2:
            names.append(f"<{k[0]}:{k[1]}>")
            meta.append({"category": k[0], "value": k[1], "kind": "general", "dataset": None})
        else:
            names.append(f"<{k[0]}:{k[1]}@{k[2]}>")
            meta.append({"category": k[0], "value": k[1], "kind": "specific", "dataset": k[2]})
    n_gen = len(general)
    gen_keys = keys[:n_gen]
    nearest = {}
    for i in range(n_gen, len(keys)):
        d = np.linalg.norm(coords10[:n_gen] - coords10[i], axis=1)
        j = int(d.argmin())
        nearest[names[i]] = {"nearest": names[j], "distance": float(d[j]),
                             "self_match": gen_keys[j] == keys[i][:2]}
    return EmbeddingProjection(names, meta, coords, coords10, nearest)


# ----------------------------------------------------------------------------- reports

@dataclass
class MetricReport:
    faa: dict[str, float]
    sample_count: int
    descriptor: dict
    ffd: float | None = None
    diversity: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.faa.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"FAA {k}={v} outside [0, 1]")
        if self.ffd is not None and self.ffd < 0:
            raise ValueError("FFD must be non-negative")
        if self.diversity is not None and self.diversity < 0:
            raise ValueError("diversity must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def write_montage(path, rows: Sequence[Sequence[np.ndarray]], pad: int = 2, scale: int = 3) -> None:
    """Grid image: one row per method, one column per tuple (H x W x 3 images in [0, 1])."""
    if not rows or not rows[0]:
        raise ValueError("empty montage")
    h, w, _ = np.asarray(rows[0][0]).shape
    ncols = max(len(r) for r in rows)
    canvas = np.ones((len(rows) * (h + pad) + pad, ncols * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y:y + h, x:x + w] = np.clip(np.asarray(img), 0.0, 1.0)
    out = Image.fromarray(np.round(canvas * 255).astype(np.uint8))
    out.resize((out.width * scale, out.height * scale), Image.NEAREST).save(path)

"""Image-only factor detector that does not depend on any learned pipeline component.

Each category gets its own hand-designed statistics:

* lens: coarse luminance and edge-energy layout plus corner flatness. Barrel
  distortion pulls the border rectangle inward and blacks out the corners.
* sensor: colour histogram, chroma and palette fractions (white/red/blue for
  event frames, grey for gated, heat-map hues for thermal).
* viewpoint: layout grids and per-band horizontal/vertical gradient energy
  (horizon, road wedge, streaks, dot scatter, vignette).
* domain: high-frequency energy, palette cardinality, posterisation levels,
  film tint, lifted blacks, HUD-box colour and isolated event pixels.

Statistics are scored by a Gaussian discriminant with pooled covariance whose
means and covariance are fitted on a seeded render split that no evaluation
uses. A category is flagged low-confidence when the winning posterior is below
``min_posterior`` or the image lies outside the fitted cloud (Mahalanobis
distance beyond the tuning split's ``outlier_quantile``).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..factorspace import CATEGORIES, FactorRegistry, FactorTuple, default_registry, enumerate_full_space
from .render import RenderConfig, luminance

GRID = 8


def _blocks(a: np.ndarray, g: int = GRID) -> np.ndarray:
    h, w = a.shape[:2]
    if h % g or w % g:
        raise ValueError(f"image size {h}x{w} is not a multiple of {g}")
    return a.reshape(g, h // g, g, w // g, *a.shape[2:]).mean(axis=(1, 3))


def _gradients(y):
    gy, gx = np.gradient(y)
    return gx, gy


def _laplacian(y):
    pad = np.pad(y, 1, mode="edge")
    return 4 * y - pad[:-2, 1:-1] - pad[2:, 1:-1] - pad[1:-1, :-2] - pad[1:-1, 2:]


def _palette_masks(img):
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    white = (img > 0.9).all(-1)
    red = (r > 0.7) & (g < 0.3) & (b < 0.3)
    blue = (b > 0.7) & (r < 0.3) & (g < 0.3)
    return white, red, blue


def lens_features(img: np.ndarray) -> np.ndarray:
    y = luminance(img)
    gx, gy = _gradients(y)
    gm = np.hypot(gx, gy)
    h, w = y.shape
    c = max(2, h // 8)
    corners = [y[:c, :c], y[:c, -c:], y[-c:, :c], y[-c:, -c:]]
    corner_stats = [s for q in corners for s in (q.mean(), q.std())]
    return np.concatenate([_blocks(y).ravel(), _blocks(gm).ravel(), corner_stats])


def sensor_features(img: np.ndarray) -> np.ndarray:
    chroma = img.max(-1) - img.min(-1)
    white, red, blue = _palette_masks(img)
    hist, _ = np.histogramdd(img.reshape(-1, 3), bins=4, range=[(0, 1)] * 3)
    hist = hist.ravel() / img.shape[0] / img.shape[1]
    flat = img.reshape(-1, 3)
    cov = np.cov(flat.T) + 1e-6 * np.eye(3)
    d = np.sqrt(np.diag(cov))
    corr = (cov / np.outer(d, d))[np.triu_indices(3, 1)]
    stats = [chroma.mean(), (chroma < 0.05).mean(), white.mean(), red.mean(), blue.mean()]
    return np.concatenate([flat.mean(0), flat.std(0), stats, corr, hist])


def viewpoint_features(img: np.ndarray) -> np.ndarray:
    y = luminance(img)
    gx, gy = _gradients(y)
    bands = [np.abs(gx).reshape(GRID, -1).mean(1), np.abs(gy).reshape(GRID, -1).mean(1)]
    cols = [np.abs(gx).T.reshape(GRID, -1).mean(1), np.abs(gy).T.reshape(GRID, -1).mean(1)]
    return np.concatenate([_blocks(y).ravel(), _blocks(np.hypot(gx, gy)).ravel(), *bands, *cols])


def domain_features(img: np.ndarray) -> np.ndarray:
    h, w, _ = img.shape
    y = luminance(img)
    lap = np.abs(_laplacian(y))
    q = np.round(img * 63).astype(int)
    cardinality = len(np.unique(q[..., 0] * 4096 + q[..., 1] * 64 + q[..., 2])) / (h * w)
    levels = np.abs(img * 3 - np.round(img * 3)) < 0.06
    bh, bw = max(1, round(h * 0.08)), max(2, round(w * 0.4))
    box = img[:bh, :bw].reshape(-1, 3)
    white, red, blue = _palette_masks(img)
    event = red | blue
    pad = np.pad(event, 1)
    neighbours = pad[:-2, 1:-1].astype(int) + pad[2:, 1:-1] + pad[1:-1, :-2] + pad[1:-1, 2:]
    isolated = (event & (neighbours == 0)).mean()
    flat = img.reshape(-1, 3)
    stats = [
        lap.mean(), np.median(lap), np.quantile(lap, 0.25), cardinality, levels.all(-1).mean(),
        (flat[:, 0] - flat[:, 2]).mean(), (flat[:, 0] - flat[:, 1]).mean(),
        flat.min(), np.quantile(flat.min(1), 0.02), flat.max(0)[2], isolated, white.mean(),
    ]
    return np.concatenate([stats, box.mean(0), box.std(0)])


FEATURES = {
    "lens": lens_features,
    "sensor": sensor_features,
    "viewpoint": viewpoint_features,
    "domain": domain_features,
}


@dataclass
class _Discriminant:
    values: tuple[str, ...]
    mean: np.ndarray
    scale: np.ndarray
    centroids: np.ndarray
    precision: np.ndarray
    log_prior: np.ndarray
    distance_limit: float

    def scores(self, f: np.ndarray):
        z = (f - self.mean) / self.scale
        diff = z[None, :] - self.centroids
        d2 = np.einsum("ki,ij,kj->k", diff, self.precision, diff)
        logits = -0.5 * d2 + self.log_prior
        post = np.exp(logits - logits.max())
        return post / post.sum(), d2


def _fit_discriminant(feats: np.ndarray, labels: Sequence[str], values: Sequence[str],
                      ridge: float, quantile: float) -> _Discriminant:
    mean = feats.mean(0)
    scale = feats.std(0) + 1e-6
    z = (feats - mean) / scale
    labels = np.asarray(labels)
    present = [v for v in values if (labels == v).any()]
    centroids = np.stack([z[labels == v].mean(0) for v in present])
    resid = z - centroids[[present.index(v) for v in labels]]
    cov = resid.T @ resid / max(1, len(z) - len(present)) + ridge * np.eye(z.shape[1])
    precision = np.linalg.inv(cov)
    counts = np.array([(labels == v).sum() for v in present], dtype=float)
    d2 = np.einsum("ni,ij,nj->n", resid, precision, resid)
    return _Discriminant(tuple(present), mean, scale, centroids, precision,
                         np.log(counts / counts.sum()), float(np.quantile(d2, quantile)) * 1.5)


@dataclass(frozen=True)
class OracleResult:
    tuple: FactorTuple
    confident: dict[str, bool]
    posterior: dict[str, float]

    @property
    def low_confidence(self) -> dict[str, bool]:
        return {c: not ok for c, ok in self.confident.items()}


class Oracle:
    """Per-category discriminants; the domain one is chosen by the estimated sensor."""

    def __init__(self, models: dict[str, _Discriminant], domain_by_sensor: dict[str, _Discriminant],
                 min_posterior: float = 0.9):
        self.models = models
        self.domain_by_sensor = domain_by_sensor
        self.min_posterior = min_posterior

    def classify(self, image: np.ndarray) -> OracleResult:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim != 3 or image.shape[-1] != 3:
            raise ValueError("expected an H x W x 3 image")
        flat = image.std() < FLAT_STD
        values, confident, posterior = {}, {}, {}
        for c in CATEGORIES:
            m = self.models[c]
            if c == "domain" and values["sensor"] in self.domain_by_sensor:
                m = self.domain_by_sensor[values["sensor"]]
            post, d2 = m.scores(FEATURES[c](image))
            k = int(post.argmax())
            values[c] = m.values[k]
            posterior[c] = float(post[k])
            confident[c] = bool(not flat and post[k] >= self.min_posterior and d2[k] <= m.distance_limit)
        return OracleResult(FactorTuple(**values), confident, posterior)


# images with less pixel spread than this carry no factor evidence at all
FLAT_STD = 0.02


def fit_oracle(images: Sequence[np.ndarray], tuples: Sequence[FactorTuple], registry: FactorRegistry,
               ridge: float = 1e-2, outlier_quantile: float = 0.999, min_posterior: float = 0.9) -> Oracle:
    images = [np.asarray(im, dtype=np.float64) for im in images]
    models, feats = {}, {}
    for c in CATEGORIES:
        feats[c] = np.stack([FEATURES[c](im) for im in images])
        models[c] = _fit_discriminant(feats[c], [t[c] for t in tuples], registry.values(c), ridge, outlier_quantile)
    domain_by_sensor = {}
    sensors = np.array([t.sensor for t in tuples])
    for sensor in registry.values("sensor"):
        rows = np.flatnonzero(sensors == sensor)
        labels = [tuples[i].domain for i in rows]
        if len(set(labels)) >= 2:
            domain_by_sensor[sensor] = _fit_discriminant(feats["domain"][rows], labels, registry.values("domain"),
                                                         ridge, outlier_quantile)
    return Oracle(models, domain_by_sensor, min_posterior)


TUNING_SEED = 90210


@functools.lru_cache(maxsize=4)
def tuned_oracle(resolution: int = 32, per_tuple: int = 12) -> Oracle:
    """Oracle fitted on a dedicated render split of the full default factor space."""
    from .dataset import render_tuples

    registry = default_registry()
    samples = render_tuples(enumerate_full_space(registry), per_tuple, RenderConfig(resolution, resolution),
                            seed=TUNING_SEED, dataset_id="oracle-tuning")
    return fit_oracle([s.image for s in samples], [s.tuple for s in samples], registry)


def oracle_classify(image: np.ndarray, oracle: Oracle | None = None) -> OracleResult:
    """Factor estimate for one H x W x 3 image in [0, 1], with per-category confidence flags."""
    oracle = oracle or tuned_oracle(int(np.asarray(image).shape[0]))
    return oracle.classify(image)

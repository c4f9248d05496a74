"""Procedural renderer. Every factor is an exact transform of a flat 2-D scene.

Composition order: viewpoint layout -> lens warp -> sensor response -> domain
statistics. The layout is an analytic function of continuous coordinates, so
the fisheye warp evaluates it at warped positions instead of resampling pixels.
"""

from __future__ import annotations

import colorsys
import hashlib
from dataclasses import dataclass

import numpy as np

from ..factorspace import FactorTuple
from .scene import SceneSpec

KAPPA = 0.35
BORDER_INSET = 0.1
BORDER_WIDTH = 0.05

SKY = np.array([0.62, 0.74, 0.92])
GROUND = np.array([0.36, 0.42, 0.30])
ROAD = np.array([0.44, 0.44, 0.46])
BUMPER = np.array([0.10, 0.10, 0.12])
FIELD = np.array([0.40, 0.50, 0.36])
WHITE = np.array([1.0, 1.0, 1.0])
RED = np.array([1.0, 0.0, 0.0])
BLUE = np.array([0.0, 0.0, 1.0])

# Monotone heat colormap: (luminance, rgb) control points.
_HEAT = np.array([
    [0.00, 0.00, 0.00, 0.15],
    [0.30, 0.45, 0.00, 0.55],
    [0.55, 0.90, 0.20, 0.10],
    [0.80, 1.00, 0.70, 0.00],
    [1.00, 1.00, 1.00, 0.85],
])

EVENT_THRESHOLD = 0.08
SIDE_HORIZON = 0.62
REAL_LIFT = 0.08
REAL_TINT = np.array([1.0, 0.9, 0.74])
REAL_GRAIN_SIGMA = 0.03
HUD_COLOR = np.array([0.1, 0.85, 0.2])
HUD_HEIGHT = 0.08
HUD_WIDTH = 0.4
EVENT_NOISE_RATE = 0.08


class InvalidTupleError(ValueError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    height: int = 32
    width: int = 32
    supersampling: int = 2

    def __post_init__(self):
        if self.height != self.width:
            raise ValueError("images are square")
        if self.height not in (8, 16, 32, 64):
            raise ValueError("resolution must be 32 or 64 (8 and 16 for gradient tests)")
        if self.supersampling < 1:
            raise ValueError("supersampling must be >= 1")


VALID_VALUES = {
    "lens": ("normal", "fisheye"),
    "sensor": ("rgb", "thermal", "rgb-thermal", "gated", "event"),
    "viewpoint": ("front", "back", "side", "drone", "pole"),
    "domain": ("real", "simulation", "video-game"),
}


def _check_tuple(t: FactorTuple):
    for cat, value in t.as_dict().items():
        if value not in VALID_VALUES[cat]:
            raise InvalidTupleError(f"{cat}={value!r} cannot be rendered")


def luminance(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def heat_colormap(y: np.ndarray) -> np.ndarray:
    y = np.clip(y, 0.0, 1.0)
    return np.stack([np.interp(y, _HEAT[:, 0], _HEAT[:, c]) for c in (1, 2, 3)], axis=-1)


def fisheye_source(px: np.ndarray, py: np.ndarray, kappa: float = KAPPA):
    """Map output coordinates (centred, half-width units) to source coordinates.

    r' = r (1 + kappa r^2): the output pixel at radius r shows the scene point at r'.
    """
    scale = 1.0 + kappa * (px * px + py * py)
    return px * scale, py * scale


def fisheye_displacement(r, kappa: float = KAPPA):
    r = np.asarray(r, dtype=float)
    return kappa * r ** 3


def _hsv(h: float, s: float = 0.8, v: float = 0.95) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _seed_for(scene: SceneSpec, t: FactorTuple, salt: str) -> int:
    digest = hashlib.sha256(f"{scene.seed}|{t.to_string()}|{salt}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _layout(u: np.ndarray, v: np.ndarray, viewpoint: str, scene: SceneSpec) -> np.ndarray:
    """Background signature of the viewpoint at unit coords (u right, v down)."""
    out = np.empty(u.shape + (3,))
    if viewpoint == "drone":
        out[:] = FIELD
        # uniform scatter of dark dots on a jittered 6x6 grid
        rng = np.random.default_rng(scene.seed % (2**32))
        jitter = rng.uniform(0.25, 0.75, size=(6, 6, 2))
        cu = np.clip((u * 6).astype(int), 0, 5)
        cv = np.clip((v * 6).astype(int), 0, 5)
        du = u * 6 - cu - jitter[cv, cu, 0]
        dv = v * 6 - cv - jitter[cv, cu, 1]
        out[(du * du + dv * dv) < 0.2 ** 2] = (0.18, 0.22, 0.16)
        return out

    if viewpoint == "pole":
        horizon = 0.15 + 0.5 * u
    elif viewpoint == "side":
        horizon = np.full_like(u, SIDE_HORIZON)
    else:
        horizon = np.full_like(u, 0.5)
    below = v >= horizon
    out[~below] = SKY
    out[below] = GROUND
    if viewpoint in ("front", "back"):
        depth = (v - 0.5) / 0.5
        road = below & (np.abs(u - 0.5) < 0.03 + 0.32 * depth)
        out[road] = ROAD
    elif viewpoint == "pole":
        # road runs diagonally across the tilted ground
        road = below & (np.abs((v - horizon) - 0.6 * (1.0 - u)) < 0.08)
        out[road] = ROAD
    elif viewpoint == "side":
        phase = (v * 7.0) % 1.0
        streak = below & (phase < 0.5)
        out[streak] = GROUND * 1.8
        sky_streak = ~below & (((v * 7.0 + 0.5) % 1.0) < 0.3)
        out[sky_streak] = SKY * 0.85
    if viewpoint == "back":
        out[v > 0.84] = BUMPER
    return out


def _draw_objects(canvas, u, v, scene: SceneSpec):
    for o in scene.objects:
        half = o.size / 2
        du, dv = u - o.x, v - o.y
        if o.shape == "circle":
            mask = du * du + dv * dv <= half * half
        elif o.shape == "square":
            mask = (np.abs(du) <= half) & (np.abs(dv) <= half)
        else:
            # upward triangle with base at y+half and apex at y-half
            rel = (dv + half) / (2 * half)
            mask = (rel >= 0) & (rel <= 1) & (np.abs(du) <= half * rel)
        canvas[mask] = _hsv(o.hue)


def _draw_border(canvas, u, v):
    a, b, w = BORDER_INSET, 1.0 - BORDER_INSET, BORDER_WIDTH / 2
    inside = (u >= a - w) & (u <= b + w) & (v >= a - w) & (v <= b + w)
    on_line = (np.abs(u - a) <= w) | (np.abs(u - b) <= w) | (np.abs(v - a) <= w) | (np.abs(v - b) <= w)
    canvas[inside & on_line] = WHITE


def _vignette(canvas, u, v):
    rho = np.sqrt((u - 0.5) ** 2 + (v - 0.5) ** 2) / np.sqrt(0.5)
    canvas *= (1.0 - 0.7 * np.clip((rho - 0.55) / 0.45, 0.0, 1.0))[..., None]


def canvas_at(u: np.ndarray, v: np.ndarray, viewpoint: str, scene: SceneSpec) -> np.ndarray:
    """The pre-lens scene (layout, objects, border rectangle) at unit coordinates."""
    canvas = _layout(u, v, viewpoint, scene)
    _draw_objects(canvas, u, v, scene)
    _draw_border(canvas, u, v)
    if viewpoint == "pole":
        _vignette(canvas, u, v)
    return canvas


def render_optics(scene: SceneSpec, lens: str, viewpoint: str, config: RenderConfig) -> np.ndarray:
    """Steps 1-2: layout and lens, supersampled and box-filtered to H x W x 3."""
    s = config.supersampling
    n = config.height * s
    centers = (np.arange(n) + 0.5) / n
    u, v = np.meshgrid(centers, centers)
    if lens == "fisheye":
        px, py = fisheye_source(2 * u - 1, 2 * v - 1)
        su, sv = (px + 1) / 2, (py + 1) / 2
        valid = (su >= 0) & (su <= 1) & (sv >= 0) & (sv <= 1)
        img = np.zeros(u.shape + (3,))
        img[valid] = canvas_at(su[valid], sv[valid], viewpoint, scene)
    else:
        img = canvas_at(u, v, viewpoint, scene)
    return img.reshape(config.height, s, config.width, s, 3).mean(axis=(1, 3))


def _gradients(y: np.ndarray):
    gx = np.zeros_like(y)
    gy = np.zeros_like(y)
    gx[:, 1:-1] = (y[:, 2:] - y[:, :-2]) / 2
    gy[1:-1, :] = (y[2:, :] - y[:-2, :]) / 2
    return gx, gy


def event_image(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """White canvas with red (positive) / blue (negative) edge pixels; also returns polarity map."""
    gx, gy = _gradients(luminance(img))
    mag = np.hypot(gx, gy)
    polarity = np.zeros(mag.shape, dtype=np.int8)
    edge = mag > EVENT_THRESHOLD
    polarity[edge & (gx + gy >= 0)] = 1
    polarity[edge & (gx + gy < 0)] = -1
    return _paint_events(polarity), polarity


def _paint_events(polarity):
    out = np.ones(polarity.shape + (3,))
    out[polarity > 0] = RED
    out[polarity < 0] = BLUE
    return out


def apply_sensor(img: np.ndarray, sensor: str) -> np.ndarray:
    if sensor == "rgb":
        return img
    if sensor == "thermal":
        return heat_colormap(luminance(img))
    if sensor == "rgb-thermal":
        return 0.5 * img + 0.5 * heat_colormap(luminance(img))
    if sensor == "gated":
        g = np.clip(1.8 * (luminance(img) - 0.5) + 0.5, 0.0, 1.0)
        return np.repeat(g[..., None], 3, axis=-1)
    if sensor == "event":
        return event_image(img)[0]
    raise InvalidTupleError(f"unknown sensor {sensor!r}")


def apply_domain(img: np.ndarray, domain: str, sensor: str, rng: np.random.Generator) -> np.ndarray:
    """Domain look applied after the sensor so it composes with every sensor.

    real: lifted blacks, warm film tint and fine grain. simulation: untouched.
    video-game: boosted saturation, 4-level posterisation and a HUD bar in the top-left corner.
    Event frames use palette-preserving variants instead.
    """
    h, w, _ = img.shape
    if domain not in ("real", "simulation", "video-game"):
        raise InvalidTupleError(f"unknown domain {domain!r}")
    if sensor == "event":
        return _event_domain(img, domain, rng)
    if domain == "real":
        img = (REAL_LIFT + (1.0 - 2 * REAL_LIFT) * img) * REAL_TINT
        grain = rng.normal(0.0, REAL_GRAIN_SIGMA, size=((h + 1) // 2, (w + 1) // 2))
        grain = np.repeat(np.repeat(grain, 2, axis=0), 2, axis=1)[:h, :w]
        img = img + grain[..., None]
    elif domain == "video-game":
        y = luminance(img)[..., None]
        img = np.clip(y + 1.3 * (img - y), 0.0, 1.0)
        img = np.round(img * 3.0) / 3.0
        bh, bw = _hud_box(h, w)
        img = img.copy()
        img[:bh, :bw] = HUD_COLOR
    return img


def _hud_box(h: int, w: int) -> tuple[int, int]:
    return max(1, round(h * HUD_HEIGHT)), max(2, round(w * HUD_WIDTH))


def _event_domain(img: np.ndarray, domain: str, rng: np.random.Generator) -> np.ndarray:
    """Event frames keep their three-colour palette: real adds spurious noise events,
    video-game draws the HUD bar in the positive-event colour."""
    h, w, _ = img.shape
    polarity = np.where(img[..., 0] < 0.5, -1, np.where(img[..., 2] < 0.5, 1, 0)).astype(np.int8)
    if domain == "real":
        flip = rng.random((h, w)) < EVENT_NOISE_RATE
        sign = np.where(rng.random((h, w)) < 0.5, 1, -1).astype(np.int8)
        polarity = np.where(flip & (polarity == 0), sign, polarity)
    elif domain == "video-game":
        bh, bw = _hud_box(h, w)
        polarity[:bh, :bw] = 1
    return _paint_events(polarity)


def render_scene(scene: SceneSpec, t: FactorTuple, config: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render ``scene`` under factor tuple ``t``. Deterministic; float32 H x W x 3 in [0, 1]."""
    _check_tuple(t)
    img = render_optics(scene, t.lens, t.viewpoint, config)
    img = apply_sensor(img, t.sensor)
    img = apply_domain(img, t.domain, t.sensor, np.random.default_rng(_seed_for(scene, t, "domain")))
    return np.clip(img, 0.0, 1.0).astype(np.float32)

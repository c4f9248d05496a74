from __future__ import annotations

import numpy as np
from scipy import ndimage

from .render import luminance


def extract_edges(image: np.ndarray, percentile: float = 90.0) -> np.ndarray:
    """Binary edge map: Sobel magnitude on luminance above its per-image 90th percentile."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ValueError("expected an H x W x 3 image")
    y = luminance(image)
    mag = np.hypot(ndimage.sobel(y, axis=1, mode="nearest"), ndimage.sobel(y, axis=0, mode="nearest"))
    threshold = np.percentile(mag, percentile)
    return (mag > threshold).astype(np.float32)

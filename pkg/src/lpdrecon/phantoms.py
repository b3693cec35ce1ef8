"""Ellipse phantoms: random training phantoms and the modified Shepp-Logan."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "EllipseSpec",
    "render_ellipses",
    "sample_ellipse_specs",
    "sample_ellipse_phantom",
    "shepp_logan",
    "SHEPP_LOGAN_MODIFIED",
    "ELLIPSE_SAMPLING",
    "make_rng",
]

# Sampling ranges for random phantoms; recorded in dataset metadata.
ELLIPSE_SAMPLING = {
    "rng": "numpy.random.Philox",
    "count": [1, 10],
    "value": [0.1, 1.0],
    "center": "uniform in unit disk",
    "semi_axes": [0.05, 0.5],
    "rotation": [0.0, math.pi],
}


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator used for every random draw in the package."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass(frozen=True)
class EllipseSpec:
    """One ellipse on the normalized domain [-1, 1]^2 (x right, y up)."""

    value: float
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float = 0.0

    def __post_init__(self):
        a, b = self.semi_axes
        if a <= 0 or b <= 0:
            raise ValueError("semi-axes must be positive")


def _pixel_centres(shape) -> tuple[np.ndarray, np.ndarray]:
    h, w = shape
    x = (np.arange(w) - (w - 1) / 2) / (w / 2)
    y = ((h - 1) / 2 - np.arange(h)) / (h / 2)
    return x[None, :], y[:, None]


def render_ellipses(specs, shape) -> np.ndarray:
    """Sum of the values of the ellipses containing each pixel centre, clamped to [0, 1]."""
    h, w = shape
    if h <= 0 or w <= 0:
        raise ValueError("shape must be positive")
    x, y = _pixel_centres(shape)
    img = np.zeros((h, w))
    for e in specs:
        cos, sin = math.cos(e.rotation), math.sin(e.rotation)
        dx, dy = x - e.center[0], y - e.center[1]
        u = dx * cos + dy * sin
        v = -dx * sin + dy * cos
        inside = (u / e.semi_axes[0]) ** 2 + (v / e.semi_axes[1]) ** 2 <= 1.0
        img += np.where(inside, e.value, 0.0)
    return np.clip(img, 0.0, 1.0)


def sample_ellipse_specs(rng: np.random.Generator) -> list[EllipseSpec]:
    n = int(rng.integers(1, 11))
    specs = []
    for _ in range(n):
        value = rng.uniform(0.1, 1.0)
        radius = math.sqrt(rng.uniform())
        phi = rng.uniform(0, 2 * math.pi)
        a, b = rng.uniform(0.05, 0.5, size=2)
        rot = rng.uniform(0, math.pi)
        specs.append(EllipseSpec(float(value), (radius * math.cos(phi), radius * math.sin(phi)),
                                 (float(a), float(b)), float(rot)))
    return specs


def sample_ellipse_phantom(seed, shape=(128, 128)) -> np.ndarray:
    """Random ellipse phantom, a pure function of ``(seed, shape)``."""
    return render_ellipses(sample_ellipse_specs(make_rng(seed)), shape)


# Toft's modified Shepp-Logan: value, a, b, x0, y0, rotation (degrees)
SHEPP_LOGAN_MODIFIED = (
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
)


def shepp_logan(shape=(128, 128)) -> np.ndarray:
    specs = [EllipseSpec(v, (x0, y0), (a, b), math.radians(rot))
             for v, a, b, x0, y0, rot in SHEPP_LOGAN_MODIFIED]
    return render_ellipses(specs, shape)

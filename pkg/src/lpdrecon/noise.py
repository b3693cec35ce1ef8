"""Measurement noise models."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .phantoms import make_rng

__all__ = ["NoiseModel", "apply_noise"]


@dataclass(frozen=True)
class NoiseModel:
    """``additive-gaussian``: ``level`` is the std relative to mean |sinogram|.
    ``poisson-photon``: ``level`` is the incident photon count per detector pixel.
    """

    kind: str = "additive-gaussian"
    level: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("additive-gaussian", "poisson-photon"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not self.level > 0:
            raise ValueError("noise level must be positive")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "level": self.level, "seed": self.seed}


def apply_noise(s: np.ndarray, model: NoiseModel) -> np.ndarray:
    """Return a noisy copy of the sinogram ``s`` (never modified in place).

    Gaussian noise uses one standard deviation per sinogram; a stack of
    sinogram-shaped arrays ``(..., angles, bins)`` is treated per sample.
    """
    s = np.asarray(s, dtype=np.float64)
    rng = make_rng(model.seed)
    if model.kind == "additive-gaussian":
        sigma = model.level * np.mean(np.abs(s), axis=(-2, -1), keepdims=True)
        return s + sigma * rng.standard_normal(s.shape)
    if np.any(s <= 0):
        raise ValueError("poisson noise needs strictly positive transmission values")
    return rng.poisson(model.level * s).astype(np.float64) / model.level

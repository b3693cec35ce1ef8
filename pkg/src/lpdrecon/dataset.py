"""Paired (phantom, sinogram) datasets, streamed or stored on disk."""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .geometry import Geometry
from .noise import NoiseModel, apply_noise
from .phantoms import ELLIPSE_SAMPLING, render_ellipses, sample_ellipse_specs, shepp_logan
from .projector import ForwardModel, RayTransform
from .tnsr import read_tensor, write_tensor

__all__ = ["SimulatedDataset", "DirectoryDataset", "write_dataset", "simulate_data", "derive_seed"]


def derive_seed(seed: int, index: int) -> int:
    """Independent 64-bit seed for sample ``index`` of a run seeded with ``seed``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def simulate_data(image: np.ndarray, geom: Geometry, noise: NoiseModel | None,
                  mode: str = "linear", mu: float = 0.2) -> np.ndarray:
    """Noiseless forward model followed by optional noise."""
    clean = ForwardModel(RayTransform(geom), mode, mu)(image)
    return clean if noise is None else apply_noise(clean, noise)


class SimulatedDataset:
    """Random ellipse phantoms with simulated data, generated on demand.

    Sample ``k`` is a pure function of ``(seed, k)``; ``size`` bounds the
    index range used for sampling with replacement.
    """

    def __init__(self, geom: Geometry, noise: NoiseModel | None, size: int = 100_000,
                 seed: int = 0, mode: str = "linear", mu: float = 0.2, phantom: str = "ellipses"):
        if size <= 0:
            raise ValueError("dataset must be non-empty")
        self.geometry = geom
        self.noise = noise
        self.size = int(size)
        self.seed = int(seed)
        self.mode = mode
        self.mu = float(mu)
        self.phantom = phantom
        self._model = ForwardModel(RayTransform(geom), mode, mu)

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= k < self.size:
            raise IndexError(k)
        s = derive_seed(self.seed, k)
        if self.phantom == "shepp-logan":
            image = shepp_logan(self.geometry.image_shape)
        else:
            image = render_ellipses(sample_ellipse_specs(np.random.Generator(np.random.Philox(s))),
                                    self.geometry.image_shape)
        data = self._model(image)
        if self.noise is not None:
            data = apply_noise(data, replace(self.noise, seed=derive_seed(self.noise.seed, s)))
        return image, data

    def metadata(self) -> dict:
        return {
            "seed": self.seed,
            "size": self.size,
            "phantom": self.phantom,
            "sampling": ELLIPSE_SAMPLING,
            "geometry": self.geometry.to_dict(),
            "noise": None if self.noise is None else self.noise.to_dict(),
            "mode": self.mode,
            "mu": self.mu,
        }


def write_dataset(directory, dataset, count: int | None = None) -> Path:
    """Materialize the first ``count`` samples as ``meta.json`` plus TNSR files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count = len(dataset) if count is None else int(count)
    for k in range(count):
        image, data = dataset[k]
        write_tensor(directory / f"{k:06d}_image.tnsr", np.asarray(image, dtype=np.float64))
        write_tensor(directory / f"{k:06d}_sino.tnsr", np.asarray(data, dtype=np.float64))
    meta = dataset.metadata() if hasattr(dataset, "metadata") else {}
    meta["count"] = count
    (directory / "meta.json").write_text(json.dumps(meta, indent=2))
    return directory


class DirectoryDataset:
    """Dataset stored by :func:`write_dataset`."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.meta = json.loads((self.directory / "meta.json").read_text())
        self.geometry = Geometry.from_dict(self.meta["geometry"])
        self.mode = self.meta.get("mode", "linear")
        self.mu = float(self.meta.get("mu", 0.2))
        self.size = int(self.meta["count"])
        if self.size <= 0:
            raise ValueError("dataset is empty")

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= k < self.size:
            raise IndexError(k)
        return (read_tensor(self.directory / f"{k:06d}_image.tnsr"),
                read_tensor(self.directory / f"{k:06d}_sino.tnsr"))

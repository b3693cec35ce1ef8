"""2D acquisition geometries (parallel and flat-detector fan beam)."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Geometry", "parallel_geometry", "fan_geometry"]


@dataclass(frozen=True)
class Geometry:
    """Acquisition description shared by projectors, FBP and the networks.

    Lengths are in mm (or any consistent unit), angles in radians. Image
    pixel centres sit symmetrically around the rotation axis; the first
    array axis runs top to bottom (decreasing y), the second left to right.
    """

    beam: str
    angles: tuple[float, ...]
    num_detector_bins: int
    detector_extent: float
    image_shape: tuple[int, int]
    pixel_size: float
    src_to_axis: float | None = None
    axis_to_detector: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "angles", tuple(float(a) for a in self.angles))
        object.__setattr__(self, "image_shape", tuple(int(n) for n in self.image_shape))
        if self.beam not in ("parallel", "fan"):
            raise ValueError(f"unknown beam type {self.beam!r}")
        if not self.angles:
            raise ValueError("geometry needs at least one angle")
        period = math.pi if self.beam == "parallel" else 2 * math.pi
        a = np.asarray(self.angles)
        if a[0] < 0 or a[-1] >= period or np.any(np.diff(a) <= 0):
            raise ValueError(f"angles must be strictly increasing within [0, {period:.6g})")
        if self.num_detector_bins <= 0 or self.detector_extent <= 0:
            raise ValueError("detector needs positive bin count and extent")
        if len(self.image_shape) != 2 or min(self.image_shape) <= 0 or self.pixel_size <= 0:
            raise ValueError("image shape and pixel size must be positive")
        if self.beam == "fan":
            if not (self.src_to_axis and self.src_to_axis > 0 and self.axis_to_detector
                    and self.axis_to_detector > 0):
                raise ValueError("fan geometry requires positive source and detector distances")
            if self.src_to_axis <= self.image_radius:
                raise ValueError("source must lie outside the image circle")

    @property
    def num_angles(self) -> int:
        return len(self.angles)

    @property
    def sinogram_shape(self) -> tuple[int, int]:
        return (self.num_angles, self.num_detector_bins)

    @property
    def bin_width(self) -> float:
        return self.detector_extent / self.num_detector_bins

    @property
    def image_radius(self) -> float:
        h, w = self.image_shape
        return 0.5 * self.pixel_size * math.hypot(h, w)

    def detector_positions(self) -> np.ndarray:
        """Bin-centre coordinates along the detector."""
        n = self.num_detector_bins
        return (np.arange(n) - (n - 1) / 2) * self.bin_width

    def to_dict(self) -> dict:
        return {
            "beam": self.beam,
            "num_angles": self.num_angles,
            "angles": list(self.angles),
            "num_detector_bins": self.num_detector_bins,
            "detector_extent": self.detector_extent,
            "src_to_axis": self.src_to_axis,
            "axis_to_detector": self.axis_to_detector,
            "image_shape": list(self.image_shape),
            "pixel_size": self.pixel_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Geometry:
        geom = cls(
            beam=d["beam"],
            angles=tuple(d["angles"]),
            num_detector_bins=int(d["num_detector_bins"]),
            detector_extent=float(d["detector_extent"]),
            image_shape=tuple(d["image_shape"]),
            pixel_size=float(d["pixel_size"]),
            src_to_axis=d.get("src_to_axis"),
            axis_to_detector=d.get("axis_to_detector"),
        )
        if "num_angles" in d and int(d["num_angles"]) != geom.num_angles:
            raise ValueError("num_angles disagrees with the length of angles")
        return geom

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path_or_text) -> Geometry:
        text = str(path_or_text)
        if not text.lstrip().startswith("{"):
            text = Path(path_or_text).read_text()
        return cls.from_dict(json.loads(text))


def _uniform_angles(n: int, period: float) -> tuple[float, ...]:
    # midpoints of a uniform partition, as in ODL's default
    return tuple((np.arange(n) + 0.5) * period / n)


def parallel_geometry(image_shape, num_angles: int, num_bins: int, pixel_size: float = 1.0,
                      detector_extent: float | None = None) -> Geometry:
    """Parallel beam over [0, pi); the detector spans the image diagonal by default."""
    h, w = image_shape
    if detector_extent is None:
        detector_extent = pixel_size * math.hypot(h, w)
    return Geometry("parallel", _uniform_angles(num_angles, math.pi), num_bins,
                    float(detector_extent), (h, w), float(pixel_size))


def fan_geometry(image_shape, num_angles: int, num_bins: int, src_to_axis: float,
                 axis_to_detector: float, pixel_size: float = 1.0,
                 detector_extent: float | None = None) -> Geometry:
    """Full-circle fan beam with a flat detector.

    The default detector covers the image circle magnified onto the detector
    plane.
    """
    h, w = image_shape
    if detector_extent is None:
        r = 0.5 * pixel_size * math.hypot(h, w)
        if src_to_axis <= r:
            raise ValueError("source must lie outside the image circle")
        half_fan = math.asin(r / src_to_axis)
        detector_extent = 2 * (src_to_axis + axis_to_detector) * math.tan(half_fan)
    return Geometry("fan", _uniform_angles(num_angles, 2 * math.pi), num_bins,
                    float(detector_extent), (h, w), float(pixel_size),
                    float(src_to_axis), float(axis_to_detector))

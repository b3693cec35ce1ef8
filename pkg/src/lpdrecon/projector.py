"""Ray transform with an exactly matched back-projection.

Each ray is sampled every half pixel; the image is bilinearly interpolated
at the samples (Joseph-style ray driving) and the samples are summed times
the step length. The resulting linear map is assembled once per geometry
into a sparse matrix, so back-projection is its literal transpose and the
adjoint identity holds to rounding error.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .geometry import Geometry

__all__ = [
    "RayTransform",
    "ForwardModel",
    "MatrixOperator",
    "ray_transform",
    "back_projection",
    "beer_lambert_forward",
    "beer_lambert_derivative_adjoint",
    "operator_norm_estimate",
    "power_method",
    "SAMPLING_STEP",
]

#: ray sampling step in units of the pixel size
SAMPLING_STEP = 0.5


def _ray_lines(geom: Geometry) -> tuple[np.ndarray, np.ndarray]:
    """Closest point to the origin and unit direction for every ray, angle-major."""
    beta = np.asarray(geom.angles)[:, None]
    u = geom.detector_positions()[None, :]
    cos, sin = np.cos(beta), np.sin(beta)
    if geom.beam == "parallel":
        px, py = u * cos, u * sin
        dx = np.broadcast_to(-sin, px.shape)
        dy = np.broadcast_to(cos, px.shape)
    else:
        rs, rd = geom.src_to_axis, geom.axis_to_detector
        sx, sy = rs * cos, rs * sin
        qx = -rd * cos - u * sin
        qy = -rd * sin + u * cos
        dx, dy = qx - sx, qy - sy
        norm = np.hypot(dx, dy)
        dx, dy = dx / norm, dy / norm
        t = -(sx * dx + sy * dy)
        px, py = sx + t * dx, sy + t * dy
    return (np.stack([px, py], -1).reshape(-1, 2),
            np.stack([dx, dy], -1).reshape(-1, 2))


def _assemble(geom: Geometry) -> sp.csr_matrix:
    h, w = geom.image_shape
    px = geom.pixel_size
    step = SAMPLING_STEP * px
    # radius enclosing the support of every bilinear basis function
    radius = px * math.hypot((h + 1) / 2, (w + 1) / 2)
    n_half = int(math.ceil(radius / step))
    s = np.arange(-n_half, n_half + 1) * step

    origins, dirs = _ray_lines(geom)
    n_rays = origins.shape[0]
    rows, cols, vals = [], [], []
    chunk = max(1, 400_000 // s.size)
    for start in range(0, n_rays, chunk):
        o = origins[start:start + chunk]
        d = dirs[start:start + chunk]
        x = o[:, None, 0] + s[None, :] * d[:, None, 0]
        y = o[:, None, 1] + s[None, :] * d[:, None, 1]
        ci = x / px + (w - 1) / 2
        ri = (h - 1) / 2 - y / px
        c0 = np.floor(ci)
        r0 = np.floor(ri)
        fc = ci - c0
        fr = ri - r0
        c0 = c0.astype(np.int64)
        r0 = r0.astype(np.int64)
        ray = np.broadcast_to(np.arange(start, start + o.shape[0])[:, None], x.shape)
        for dr, dc, wt in ((0, 0, (1 - fr) * (1 - fc)), (0, 1, (1 - fr) * fc),
                           (1, 0, fr * (1 - fc)), (1, 1, fr * fc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w) & (wt > 0)
            rows.append(ray[ok])
            cols.append(rr[ok] * w + cc[ok])
            vals.append(wt[ok] * step)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_rays, h * w),
    ).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


@lru_cache(maxsize=16)
def _cached_matrix(geom: Geometry) -> sp.csr_matrix:
    return _assemble(geom)


class RayTransform:
    """Discrete ray transform ``P`` for a geometry, with exact adjoint ``P^T``.

    Works on arrays of shape ``(..., H, W)`` (forward) and
    ``(..., num_angles, num_bins)`` (adjoint); leading axes are batched.
    Call counters are kept for instrumentation.
    """

    def __init__(self, geom: Geometry):
        self.geometry = geom
        self.matrix = _cached_matrix(geom)
        self._by_dtype = {np.dtype(np.float64): self.matrix}
        self.forward_calls = 0
        self.adjoint_calls = 0

    @property
    def domain_shape(self) -> tuple[int, int]:
        return self.geometry.image_shape

    @property
    def range_shape(self) -> tuple[int, int]:
        return self.geometry.sinogram_shape

    def _mat(self, dtype) -> sp.csr_matrix:
        dtype = np.dtype(dtype)
        if dtype not in self._by_dtype:
            self._by_dtype[dtype] = self.matrix.astype(dtype)
        return self._by_dtype[dtype]

    def _apply(self, mat, x, in_shape, out_shape):
        x = np.asarray(x)
        if x.ndim < 2 or x.shape[-2:] != in_shape:
            raise ValueError(f"expected trailing shape {in_shape}, got {x.shape}")
        if x.dtype.kind != "f":
            x = x.astype(np.float64)
        lead = x.shape[:-2]
        flat = x.reshape(-1, in_shape[0] * in_shape[1])
        out = (mat @ flat.T).T
        return np.ascontiguousarray(out).reshape(lead + out_shape)

    def __call__(self, f: np.ndarray) -> np.ndarray:
        self.forward_calls += 1
        f = np.asarray(f)
        return self._apply(self._mat(f.dtype if f.dtype.kind == "f" else np.float64),
                           f, self.domain_shape, self.range_shape)

    forward = __call__

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        self.adjoint_calls += 1
        g = np.asarray(g)
        mat = self._mat(g.dtype if g.dtype.kind == "f" else np.float64)
        return self._apply(mat.T, g, self.range_shape, self.domain_shape)

    def reset_counters(self) -> None:
        self.forward_calls = 0
        self.adjoint_calls = 0


class MatrixOperator:
    """Linear operator backed by an explicit (dense or sparse) matrix."""

    def __init__(self, matrix, domain_shape, range_shape):
        self.matrix = matrix
        self.domain_shape = tuple(domain_shape)
        self.range_shape = tuple(range_shape)
        self.forward_calls = 0
        self.adjoint_calls = 0
        if matrix.shape != (math.prod(self.range_shape), math.prod(self.domain_shape)):
            raise ValueError("matrix shape does not match declared domain and range")

    def _apply(self, mat, x, in_shape, out_shape):
        x = np.asarray(x)
        lead = x.shape[:x.ndim - len(in_shape)]
        if x.shape[len(lead):] != in_shape:
            raise ValueError(f"expected trailing shape {in_shape}, got {x.shape}")
        out = (mat @ x.reshape(-1, math.prod(in_shape)).T).T
        return np.asarray(out).reshape(lead + out_shape)

    def __call__(self, x):
        self.forward_calls += 1
        return self._apply(self.matrix, x, self.domain_shape, self.range_shape)

    forward = __call__

    def adjoint(self, y):
        self.adjoint_calls += 1
        return self._apply(self.matrix.T, y, self.range_shape, self.domain_shape)

    @classmethod
    def identity(cls, shape, factor: float = 1.0) -> MatrixOperator:
        n = math.prod(shape)
        return cls(factor * sp.identity(n, format="csr"), shape, shape)


def ray_transform(f: np.ndarray, geom: Geometry) -> np.ndarray:
    """Line integrals of the bilinearly interpolated image along every ray."""
    return RayTransform(geom)(f)


def back_projection(s: np.ndarray, geom: Geometry) -> np.ndarray:
    """Exact transpose of :func:`ray_transform`."""
    return RayTransform(geom).adjoint(s)


def _operator(op):
    return RayTransform(op) if isinstance(op, Geometry) else op


def beer_lambert_forward(f: np.ndarray, geom, mu: float) -> np.ndarray:
    """Transmission ``exp(-mu * P f)``."""
    if mu <= 0:
        raise ValueError("mass attenuation coefficient must be positive")
    return np.exp(-mu * _operator(geom)(f))


def beer_lambert_derivative_adjoint(f: np.ndarray, g: np.ndarray, geom, mu: float) -> np.ndarray:
    """``-mu * P^T(exp(-mu P f) * g)``, the adjoint of the derivative at ``f``."""
    op = _operator(geom)
    return -mu * op.adjoint(np.exp(-mu * op(f)) * g)


class ForwardModel:
    """Forward operator used inside reconstruction schemes.

    ``mode='linear'`` is the ray transform itself; ``mode='beer-lambert'``
    is ``exp(-mu P f)``. The counters record how many times the operator and
    the adjoint of its derivative were evaluated, independently of how those
    evaluations are composed internally.
    """

    def __init__(self, op, mode: str = "linear", mu: float = 0.2):
        if mode not in ("linear", "beer-lambert"):
            raise ValueError(f"unknown operator mode {mode!r}")
        if mode == "beer-lambert" and mu <= 0:
            raise ValueError("mass attenuation coefficient must be positive")
        self.op = _operator(op)
        self.mode = mode
        self.mu = float(mu)
        self.forward_calls = 0
        self.adjoint_calls = 0

    @property
    def linear(self) -> bool:
        return self.mode == "linear"

    @property
    def domain_shape(self):
        return tuple(self.op.domain_shape)

    @property
    def range_shape(self):
        return tuple(self.op.range_shape)

    def reset_counters(self) -> None:
        self.forward_calls = 0
        self.adjoint_calls = 0

    def _transmission(self, f):
        return np.exp(-self.mu * self.op(f))

    def __call__(self, f: np.ndarray) -> np.ndarray:
        self.forward_calls += 1
        return self.op(f) if self.linear else self._transmission(f)

    def derivative(self, f: np.ndarray, df: np.ndarray) -> np.ndarray:
        if self.linear:
            return self.op(df)
        return -self.mu * self._transmission(f) * self.op(df)

    def adjoint_derivative(self, f: np.ndarray, h: np.ndarray) -> np.ndarray:
        self.adjoint_calls += 1
        if self.linear:
            return self.op.adjoint(h)
        return -self.mu * self.op.adjoint(self._transmission(f) * h)


def power_method(forward: Callable, adjoint: Callable, shape, iterations: int = 100,
                 seed: int = 0) -> float:
    """Largest singular value of a linear map by power iteration on ``A^T A``."""
    if iterations < 1:
        raise ValueError("iterations must be positive")
    x = np.random.Generator(np.random.Philox(seed)).standard_normal(shape)
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iterations):
        y = adjoint(forward(x))
        nrm = np.linalg.norm(y)
        if nrm == 0:
            return 0.0
        est = math.sqrt(nrm)
        x = y / nrm
    return est


def operator_norm_estimate(op, iterations: int = 100, seed: int = 0,
                           with_gradient: bool = False) -> float:
    """Estimate ``||P||`` (or ``||[P, grad]||``) by the power method.

    ``op`` is a :class:`Geometry` or any linear operator exposing
    ``__call__``, ``adjoint`` and ``domain_shape``.
    """
    if iterations < 10:
        raise ValueError("use at least 10 power iterations")
    op = _operator(op)
    if not with_gradient:
        return power_method(op, op.adjoint, op.domain_shape, iterations, seed)
    from .variational import div_op, grad_op

    def fwd(f):
        return op(f), grad_op(f)

    def adj(pair):
        return op.adjoint(pair[0]) - div_op(pair[1])

    return power_method(fwd, adj, op.domain_shape, iterations, seed)

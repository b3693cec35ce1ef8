"""Method comparison tables: mean PSNR/SSIM, runtime, parameter count."""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .fbp import fbp_reconstruct
from .geometry import Geometry
from .metrics import mean_metric, psnr, ssim
from .projector import ForwardModel, RayTransform
from .variational import default_params, k_norm, pdhg_solve

__all__ = ["Method", "Row", "ComparisonTable", "fbp_method", "tv_method", "learned_method", "compare"]

COLUMNS = ("method", "psnr", "ssim", "runtime_s", "parameters")


@dataclass(frozen=True)
class Method:
    name: str
    reconstruct: Callable[[np.ndarray], np.ndarray]
    parameters: int


@dataclass(frozen=True)
class Row:
    method: str
    psnr: float
    ssim: float
    runtime_s: float
    parameters: int


class ComparisonTable:
    def __init__(self, rows):
        self.rows = list(rows)

    def __eq__(self, other):
        return isinstance(other, ComparisonTable) and self.rows == other.rows

    def __getitem__(self, name: str) -> Row:
        for row in self.rows:
            if row.method == name:
                return row
        raise KeyError(name)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        for r in self.rows:
            writer.writerow([r.method, repr(r.psnr), repr(r.ssim), repr(r.runtime_s), r.parameters])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> ComparisonTable:
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader))
        if header != COLUMNS:
            raise ValueError(f"unexpected CSV header {header}")
        return cls(Row(m, float(p), float(s), float(t), int(n)) for m, p, s, t, n in reader)

    def to_text(self) -> str:
        cells = [("Method", "PSNR", "SSIM", "Runtime (s)", "Parameters")]
        cells += [(r.method, f"{r.psnr:.2f}", f"{r.ssim:.4f}", f"{r.runtime_s:.4f}", str(r.parameters))
                  for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(cells[0]))]
        lines = []
        for row in cells:
            first = row[0].ljust(widths[0])
            rest = [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join([first, *rest]))
        return "\n".join(lines) + "\n"

    def write(self, path) -> tuple[Path, Path]:
        """Write ``<path>.txt`` and ``<path>.csv``."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        txt, csv_path = path.with_suffix(".txt"), path.with_suffix(".csv")
        txt.write_text(self.to_text())
        csv_path.write_text(self.to_csv())
        return txt, csv_path


def _post_log(g, mode: str, mu: float):
    return g if mode == "linear" else -np.log(np.clip(g, 1e-12, None)) / mu


def fbp_method(geom: Geometry, filter: str = "hann", bandwidth: float = 1.0, mode: str = "linear",
               mu: float = 0.2, name: str = "FBP") -> Method:
    return Method(name, lambda g: fbp_reconstruct(_post_log(g, mode, mu), geom, filter, bandwidth), 1)


def tv_method(geom: Geometry, lam: float, iterations: int = 1000, mode: str = "linear", mu: float = 0.2,
              name: str = "TV") -> Method:
    model = ForwardModel(RayTransform(geom), mode, mu)
    params = default_params(model, lam, iterations)
    knorm = k_norm(model)
    return Method(name, lambda g: pdhg_solve(g, model, params, knorm=knorm).image, 1)


def learned_method(scheme, params, name: str | None = None) -> Method:
    return Method(name or scheme.kind, lambda g: scheme.reconstruct(params, g), scheme.num_parameters())


def _median_runtime(fn, x, runs: int, warmup: int) -> float:
    for _ in range(warmup):
        fn(x)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn(x)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def compare(methods, pairs, runs: int = 5, warmup: int = 1) -> ComparisonTable:
    """Evaluate each method on ``(image, data)`` pairs.

    Runtime is the median over ``runs`` reconstructions of the first sample
    after ``warmup`` discarded ones.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no evaluation pairs")
    rows = []
    for m in methods:
        recon = [m.reconstruct(g) for _, g in pairs]
        rows.append(Row(
            m.name,
            mean_metric(psnr(r, f) for r, (f, _) in zip(recon, pairs)),
            mean_metric(ssim(r, f) for r, (f, _) in zip(recon, pairs)),
            _median_runtime(m.reconstruct, pairs[0][1], runs, warmup) if runs else 0.0,
            int(m.parameters),
        ))
    return ComparisonTable(rows)

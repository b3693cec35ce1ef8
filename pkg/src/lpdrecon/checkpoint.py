"""Checkpoint directories: one TNSR file per parameter plus ``manifest.json``."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .geometry import Geometry
from .lpd import LearnedReconstructor, LpdConfig
from .projector import ForwardModel, RayTransform
from .tnsr import read_tensor, write_tensor

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "load_scheme"]

MANIFEST = "manifest.json"


class CheckpointError(FileNotFoundError):
    """Missing or inconsistent checkpoint directory."""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _restore(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _restore(v) for k, v in obj.items()}
    return obj


def save_checkpoint(directory, scheme: LearnedReconstructor, params: dict, step: int = 0,
                    rng_state: dict | None = None, train_config=None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = list(scheme.param_specs())
    for name in names:
        write_tensor(directory / f"{name}.tnsr", params[name].data)
    geom = getattr(scheme.model.op, "geometry", None) if scheme.model is not None else None
    manifest = {
        "kind": scheme.kind,
        "config": scheme.config.to_dict(),
        "parameters": names,
        "step": int(step),
        "rng_state": None if rng_state is None else _jsonable(rng_state),
        "train_config": None if train_config is None else train_config.to_dict(),
        "geometry": None if geom is None else geom.to_dict(),
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def load_checkpoint(directory, requires_grad: bool = False) -> tuple[dict, dict]:
    """Return ``(manifest, params)``; the manifest's RNG state is restored to arrays."""
    directory = Path(directory)
    path = directory / MANIFEST
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest in {directory}")
    manifest = json.loads(path.read_text())
    params = {}
    for name in manifest["parameters"]:
        file = directory / f"{name}.tnsr"
        if not file.is_file():
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        params[name] = Tensor(read_tensor(file), requires_grad=requires_grad)
    if manifest.get("rng_state") is not None:
        manifest["rng_state"] = _restore(manifest["rng_state"])
    return manifest, params


def load_scheme(directory, geom: Geometry | None = None) -> tuple[LearnedReconstructor, dict]:
    """Rebuild the scheme (with its forward model) and parameters from a checkpoint."""
    manifest, params = load_checkpoint(directory)
    config = LpdConfig.from_dict(manifest["config"])
    if geom is None:
        if manifest.get("geometry") is None:
            raise CheckpointError("checkpoint stores no geometry; pass one explicitly")
        geom = Geometry.from_dict(manifest["geometry"])
    model = ForwardModel(RayTransform(geom), config.op_mode, config.mu)
    scheme = LearnedReconstructor(manifest["kind"], config, model)
    expected = list(scheme.param_specs())
    if expected != manifest["parameters"]:
        raise CheckpointError("checkpoint parameters do not match its configuration")
    return scheme, params

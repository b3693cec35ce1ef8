"""Training of the learned schemes: empirical loss, ADAM, cosine-annealed rate, clipping."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Graph, Tensor, scale, sub, sum_squares
from .dataset import derive_seed
from .lpd import LearnedReconstructor
from .metrics import mean_metric, psnr
from .phantoms import make_rng
from .projector import operator_norm_estimate

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "AdamState",
    "TrainResult",
    "reconstruction_loss",
    "empirical_loss",
    "cosine_lr",
    "global_norm",
    "clip_global_norm",
    "adam_step",
    "xavier_init",
    "init_params",
    "validation_psnr",
    "train",
]

#: offset separating the batch-sampling stream from per-parameter init streams
_SAMPLER_STREAM = 1 << 30


class TrainingDivergedError(FloatingPointError):
    """The training loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    eta0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 5
    seed: int = 0
    val_interval: int = 100
    monitor_interval: int = 0
    checkpoint_interval: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.eta0 <= 0 or self.eps <= 0 or self.clip_norm <= 0 or self.batch_size <= 0:
            raise ValueError("eta0, eps, clip_norm and batch_size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if min(self.val_interval, self.monitor_interval, self.checkpoint_interval) < 0:
            raise ValueError("intervals must be non-negative")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.precision == "f32" else np.float64)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def reconstruction_loss(recon: Tensor, truth, pixel_area: float = 1.0) -> Tensor:
    """Batch mean of ``pixel_area * sum (recon - truth)^2`` for ``(B, 1, H, W)`` tensors."""
    truth = np.asarray(truth)
    if truth.ndim == 3:
        truth = truth[:, None]
    if truth.shape != recon.shape:
        raise ValueError(f"reconstruction {recon.shape} vs ground truth {truth.shape}")
    diff = sub(recon, Tensor(truth, dtype=recon.dtype))
    return scale(sum_squares(diff), pixel_area / recon.shape[0])


def _pixel_area(scheme: LearnedReconstructor) -> float:
    geom = getattr(scheme.model.op, "geometry", None)
    return 1.0 if geom is None else geom.pixel_size ** 2


def empirical_loss(scheme: LearnedReconstructor, params: dict, batch) -> tuple[float, dict]:
    """Loss over ``batch`` (list of ``(image, data)``) and its gradient per parameter."""
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    images = np.stack([b[0] for b in batch])
    data = np.stack([b[1] for b in batch])
    for p in params.values():
        p.zero_grad()
    with Graph() as tape:
        loss = reconstruction_loss(scheme.forward(params, data), images, _pixel_area(scheme))
    tape.backward(loss)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
    return float(loss.data), grads


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

def cosine_lr(t: int, t_max: int, eta0: float) -> float:
    """``eta0 / 2 * (1 + cos(pi t / t_max))``."""
    if not 0 <= t <= t_max:
        raise ValueError(f"step {t} outside [0, {t_max}]")
    if t_max == 0:
        return float(eta0)
    return 0.5 * eta0 * (1.0 + math.cos(math.pi * t / t_max))


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))


def clip_global_norm(grads: dict, clip_norm: float) -> tuple[dict, float]:
    """Rescale all gradients jointly when their concatenated norm exceeds ``clip_norm``.

    Returns the (possibly new) gradient dict and the pre-clip norm.
    """
    norm = global_norm(grads)
    if norm <= clip_norm:
        return grads, norm
    factor = clip_norm / norm
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig) -> AdamState:
    """One bias-corrected ADAM update, applied to ``params`` in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in params.items():
        g = grads[k]
        data = p.data if isinstance(p, Tensor) else p
        if g.shape != data.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {data.shape}")
        m = state.m.get(k)
        v = state.v.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(data)
            v = state.v[k] = np.zeros_like(data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.eps)).astype(data.dtype)
    return state


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def xavier_init(shape, seed: int, dtype=np.float64) -> Tensor:
    """Uniform Glorot initialization of a ``(out, in, kh, kw)`` kernel."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ValueError("xavier_init expects a (out, in, kh, kw) shape")
    receptive = shape[2] * shape[3]
    fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(make_rng(seed).uniform(-a, a, size=shape), requires_grad=True, dtype=dtype)


def _step_size_init(scheme: LearnedReconstructor) -> float:
    norm = operator_norm_estimate(scheme.model.op, 100)
    if not scheme.model.linear:
        norm *= scheme.model.mu
    return 0.99 / norm


def init_params(scheme: LearnedReconstructor, seed: int = 0, dtype=np.float32) -> dict:
    """Xavier kernels, zero biases, PReLU coefficients at ``PRELU_INIT``.

    Learned PDHG step sizes start at ``0.99 / ||A||`` and ``theta`` at 1.
    """
    from .lpd import PRELU_INIT

    params = {}
    steps = None
    for i, (name, (shape, kind)) in enumerate(scheme.param_specs().items()):
        if kind == "xavier":
            params[name] = xavier_init(shape, derive_seed(seed, i), dtype)
            continue
        if kind == "zero":
            value = np.zeros(shape)
        elif kind == "prelu":
            value = np.full(shape, PRELU_INIT)
        elif kind in ("sigma", "tau"):
            steps = _step_size_init(scheme) if steps is None else steps
            value = np.full(shape, steps)
        elif kind == "theta":
            value = np.ones(shape)
        else:
            raise ValueError(f"unknown initializer {kind!r}")
        params[name] = Tensor(value, requires_grad=True, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def validation_psnr(scheme: LearnedReconstructor, params: dict, pairs) -> float:
    """Mean PSNR of the scheme on ``(image, data)`` pairs."""
    pairs = list(pairs)
    recon = scheme.reconstruct(params, np.stack([d for _, d in pairs]))
    return mean_metric(psnr(r, f) for r, (f, _) in zip(recon, pairs))


@dataclass
class TrainResult:
    params: dict
    log: list
    rng_state: dict
    monitor: list = field(default_factory=list)


def train(scheme: LearnedReconstructor, dataset, config: TrainConfig, validation=None,
          log_path=None, checkpoint_dir=None, monitor_batch=None) -> TrainResult:
    """Minimize the empirical loss for ``config.steps`` ADAM steps.

    Parameters
    ----------
    dataset : indexable of ``(image, data)``
        Batches are drawn with replacement by a seeded generator.
    validation : list of ``(image, data)``, optional
        Held-out pairs for the PSNR recorded every ``config.val_interval`` steps.
    log_path : path, optional
        Newline-delimited JSON log, one record per step.
    checkpoint_dir : path, optional
        Written every ``config.checkpoint_interval`` steps and at the end.
    monitor_batch : list of ``(image, data)``, optional
        Frozen batch whose loss is recorded every ``config.monitor_interval`` steps.
    """
    from .checkpoint import save_checkpoint

    if len(dataset) == 0:
        raise ValueError("empty dataset")
    dtype = config.dtype
    params = init_params(scheme, config.seed, dtype)
    rng = make_rng(derive_seed(config.seed, _SAMPLER_STREAM))
    state = AdamState()
    log, monitor = [], []
    area = _pixel_area(scheme)
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "w")

    def checkpoint(step):
        if checkpoint_dir is not None:
            save_checkpoint(checkpoint_dir, scheme, params, step=step,
                            rng_state=rng.bit_generator.state, train_config=config)

    try:
        for t in range(config.steps):
            idx = rng.integers(0, len(dataset), size=config.batch_size)
            loss, grads = empirical_loss(scheme, params, [dataset[int(k)] for k in idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss is {loss} at step {t}")
            grads, _ = clip_global_norm(grads, config.clip_norm)
            lr = cosine_lr(t, config.steps, config.eta0)
            adam_step(params, grads, state, lr, config)
            record = {"step": t + 1, "lr": lr, "loss": loss}
            if validation is not None and config.val_interval and (t + 1) % config.val_interval == 0:
                record["val_psnr"] = validation_psnr(scheme, params, validation)
            if monitor_batch is not None and config.monitor_interval and (t + 1) % config.monitor_interval == 0:
                images = np.stack([b[0] for b in monitor_batch])
                recon = scheme.forward(params, np.stack([b[1] for b in monitor_batch]))
                monitor.append((t + 1, float(reconstruction_loss(recon, images, area).data)))
            log.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record) + "\n")
            if config.checkpoint_interval and (t + 1) % config.checkpoint_interval == 0:
                checkpoint(t + 1)
    finally:
        if log_file is not None:
            log_file.close()
    checkpoint(config.steps)
    return TrainResult(params, log, rng.bit_generator.state, monitor)

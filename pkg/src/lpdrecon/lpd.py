"""Unrolled learned reconstruction schemes.

* ``lpd``      Learned Primal-Dual: per-iteration residual CNNs replace both
               proximal operators; primal and dual spaces carry extra memory
               channels.
* ``lpdhg``    Learned PDHG: the classical update structure with learned
               step sizes and one shared pair of residual CNNs.
* ``primal``   Learned Primal: the dual update is the fixed residual
               ``A(f2) - g``.
* ``residual`` FBP followed by a stack of residual CNNs (no operator calls).

The numpy-only ``oracle_reduction_*`` functions run the same unrolled
skeleton with analytic proximal/gradient maps in place of the networks.

Role conventions: dual channel 0 is the one back-projected; primal channel 1
is where the forward operator is evaluated and channel 0 is returned.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    channels,
    concat_channels,
    conv2d,
    linear_operator,
    mul,
    nonlinear_operator,
    prelu,
    scale,
    sub,
)
from .fbp import fbp_reconstruct
from .projector import ForwardModel
from .variational import PdhgParams, div_op, grad_op, prox_l1_conjugate_isotropic, prox_l2_conjugate

__all__ = [
    "KINDS",
    "LpdConfig",
    "LearnedReconstructor",
    "param_specs",
    "count_parameters",
    "learned_proximal_apply",
    "lpd_forward",
    "learned_pdhg_forward",
    "learned_primal_forward",
    "residual_denoiser_forward",
    "oracle_reduction_pdhg",
    "oracle_reduction_gd",
]

KINDS = ("lpd", "lpdhg", "primal", "residual")

#: PReLU coefficient at initialization; with the ``-c * x`` branch this is a
#: leaky slope of +0.01
PRELU_INIT = -0.01


@dataclass(frozen=True)
class LpdConfig:
    n_primal: int = 5
    n_dual: int = 5
    n_iter: int = 10
    primal_channels: tuple[int, ...] = (6, 32, 32, 5)
    dual_channels: tuple[int, ...] = (7, 32, 32, 5)
    op_mode: str = "linear"
    init_mode: str = "zero"
    share_weights: bool = False
    mu: float = 0.2
    fbp_filter: str = "hann"
    fbp_bandwidth: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "primal_channels", tuple(int(c) for c in self.primal_channels))
        object.__setattr__(self, "dual_channels", tuple(int(c) for c in self.dual_channels))
        if self.n_primal < 1 or self.n_dual < 1 or self.n_iter < 0:
            raise ValueError("channel counts must be positive and n_iter non-negative")
        if len(self.primal_channels) != 4 or len(self.dual_channels) != 4:
            raise ValueError("channel plans have four entries (in, hidden, hidden, out)")
        if self.primal_channels[0] != self.n_primal + 1 or self.primal_channels[-1] != self.n_primal:
            raise ValueError(f"primal plan must read {self.n_primal + 1} and write {self.n_primal} channels")
        if self.dual_channels[0] != self.n_dual + 2 or self.dual_channels[-1] != self.n_dual:
            raise ValueError(f"dual plan must read {self.n_dual + 2} and write {self.n_dual} channels")
        if self.op_mode not in ("linear", "beer-lambert"):
            raise ValueError(f"unknown operator mode {self.op_mode!r}")
        if self.init_mode not in ("zero", "pseudo-inverse"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")

    @classmethod
    def with_width(cls, width: int, n_primal: int = 5, n_dual: int = 5, **kw) -> LpdConfig:
        return cls(n_primal=n_primal, n_dual=n_dual,
                   primal_channels=(n_primal + 1, width, width, n_primal),
                   dual_channels=(n_dual + 2, width, width, n_dual), **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["primal_channels"] = list(self.primal_channels)
        d["dual_channels"] = list(self.dual_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> LpdConfig:
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _plans(kind: str, config: LpdConfig) -> dict[str, tuple[int, ...]]:
    ph = config.primal_channels[1:3]
    dh = config.dual_channels[1:3]
    if kind == "lpd":
        return {"primal": config.primal_channels, "dual": config.dual_channels}
    if kind == "lpdhg":
        return {"primal": (1, *ph, 1), "dual": (2, *dh, 1)}
    if kind == "primal":
        return {"primal": config.primal_channels}
    if kind == "residual":
        return {"primal": (config.n_primal, *ph, config.n_primal)}
    raise ValueError(f"unknown scheme {kind!r}; expected one of {KINDS}")


def _net_prefix(kind: str, config: LpdConfig, net: str, i: int) -> str:
    if kind == "lpdhg" or config.share_weights:
        return f"{net}.shared"
    return f"{net}.{i:02d}"


def param_specs(kind: str, config: LpdConfig) -> OrderedDict:
    """Ordered ``name -> (shape, init)`` with init in {xavier, zero, prelu, sigma, tau, theta}."""
    specs = OrderedDict()
    plans = _plans(kind, config)
    shared = kind == "lpdhg" or config.share_weights
    for i in range(1 if shared else config.n_iter):
        for net in ("dual", "primal"):
            if net not in plans:
                continue
            c0, c1, c2, c3 = plans[net]
            pre = _net_prefix(kind, config, net, i)
            specs[f"{pre}.w1"] = ((c1, c0, 3, 3), "xavier")
            specs[f"{pre}.b1"] = ((c1,), "zero")
            specs[f"{pre}.c1"] = ((c1,), "prelu")
            specs[f"{pre}.w2"] = ((c2, c1, 3, 3), "xavier")
            specs[f"{pre}.b2"] = ((c2,), "zero")
            specs[f"{pre}.c2"] = ((c2,), "prelu")
            specs[f"{pre}.w3"] = ((c3, c2, 3, 3), "xavier")
            specs[f"{pre}.b3"] = ((c3,), "zero")
    if kind == "lpdhg":
        for name in ("sigma", "tau", "theta"):
            specs[name] = ((1,), name)
    return specs


def count_parameters(kind: str, config: LpdConfig) -> int:
    return sum(math.prod(shape) for shape, _ in param_specs(kind, config).values())


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def learned_proximal_apply(params, prefix: str, inputs: Tensor, n_state: int) -> Tensor:
    """``state + W3 A W2 A W1 (inputs)`` where ``state`` is the first ``n_state`` input channels."""
    y = conv2d(inputs, params[f"{prefix}.w1"], params[f"{prefix}.b1"])
    y = prelu(y, params[f"{prefix}.c1"])
    y = conv2d(y, params[f"{prefix}.w2"], params[f"{prefix}.b2"])
    y = prelu(y, params[f"{prefix}.c2"])
    y = conv2d(y, params[f"{prefix}.w3"], params[f"{prefix}.b3"])
    if y.shape[1] != n_state:
        raise ValueError(f"network writes {y.shape[1]} channels, state has {n_state}")
    return add(channels(inputs, 0, n_state), y)


def _apply_op(model: ForwardModel, x: Tensor) -> Tensor:
    """``A`` on a single-channel ``(B, 1, H, W)`` tensor."""
    op = model.op

    def fwd(a):
        return model(a[:, 0])[:, None]

    if model.linear:
        return linear_operator(fwd, lambda c: op.adjoint(c[:, 0])[:, None], x)

    def dadj(p, c):
        return -model.mu * op.adjoint(np.exp(-model.mu * op(p[:, 0])) * c[:, 0])[:, None]

    return nonlinear_operator(fwd, dadj, x)


def _apply_adjoint_derivative(model: ForwardModel, f1: Tensor, h1: Tensor) -> Tensor:
    """``[dA(f1)]^* h1`` as a differentiable function of both ``f1`` and ``h1``."""
    op = model.op
    model.adjoint_calls += 1
    if model.linear:
        return linear_operator(lambda a: op.adjoint(a[:, 0])[:, None],
                               lambda c: op(c[:, 0])[:, None], h1)
    mu = model.mu

    def transmission(a):
        return np.exp(-mu * op(a[:, 0]))[:, None]

    def transmission_dadj(p, c):
        return -mu * op.adjoint(np.exp(-mu * op(p[:, 0])) * c[:, 0])[:, None]

    t = nonlinear_operator(transmission, transmission_dadj, f1)
    back = linear_operator(lambda a: op.adjoint(a[:, 0])[:, None], lambda c: op(c[:, 0])[:, None],
                           mul(t, h1))
    return scale(back, -mu)


def _prepare_data(g, model: ForwardModel, dtype) -> tuple[Tensor, int]:
    g = np.asarray(g)
    if g.shape[-2:] != model.range_shape:
        raise ValueError(f"data shape {g.shape} does not match operator range {model.range_shape}")
    if g.ndim == 2:
        g = g[None]
    if g.ndim != 3:
        raise ValueError("data must be (angles, bins) or (batch, angles, bins)")
    return Tensor(g[:, None], dtype=dtype), g.shape[0]


def _pseudo_inverse(g: np.ndarray, model: ForwardModel, config: LpdConfig) -> np.ndarray:
    geom = getattr(model.op, "geometry", None)
    if geom is None:
        raise ValueError("pseudo-inverse initialization needs a ray-transform forward model")
    data = g if model.linear else -np.log(np.clip(g, 1e-12, None)) / model.mu
    return fbp_reconstruct(data, geom, config.fbp_filter, config.fbp_bandwidth)


def _dtype_of(params) -> np.dtype:
    return next(iter(params.values())).dtype


def _initial_primal(g_arr, model, config, n_channels, batch, dtype) -> Tensor:
    h, w = model.domain_shape
    if config.init_mode == "zero":
        return Tensor(np.zeros((batch, n_channels, h, w)), dtype=dtype)
    x0 = _pseudo_inverse(np.asarray(g_arr).reshape(batch, *model.range_shape), model, config)
    return Tensor(np.repeat(x0[:, None], n_channels, axis=1), dtype=dtype)


# ---------------------------------------------------------------------------
# schemes
# ---------------------------------------------------------------------------

def lpd_forward(params, g, config: LpdConfig, model: ForwardModel, states: list | None = None) -> Tensor:
    """Learned Primal-Dual reconstruction, ``(B, 1, H, W)``."""
    dtype = _dtype_of(params)
    gt, batch = _prepare_data(g, model, dtype)
    f = _initial_primal(g, model, config, config.n_primal, batch, dtype)
    h = Tensor(np.zeros((batch, config.n_dual) + model.range_shape), dtype=dtype)
    for i in range(config.n_iter):
        kf = _apply_op(model, channels(f, 1, 2) if config.n_primal > 1 else f)
        h = learned_proximal_apply(params, _net_prefix("lpd", config, "dual", i),
                                   concat_channels([h, kf, gt]), config.n_dual)
        adj = _apply_adjoint_derivative(model, channels(f, 0, 1), channels(h, 0, 1))
        f = learned_proximal_apply(params, _net_prefix("lpd", config, "primal", i),
                                   concat_channels([f, adj]), config.n_primal)
        if states is not None:
            states.append({"f": f, "h": h})
    return channels(f, 0, 1)


def learned_pdhg_forward(params, g, config: LpdConfig, model: ForwardModel,
                         states: list | None = None) -> Tensor:
    """Learned PDHG with learned ``sigma``, ``tau``, ``theta`` and shared networks."""
    dtype = _dtype_of(params)
    gt, batch = _prepare_data(g, model, dtype)
    f = _initial_primal(g, model, config, 1, batch, dtype)
    f_bar = f
    h = Tensor(np.zeros((batch, 1) + model.range_shape), dtype=dtype)
    sigma, tau, theta = params["sigma"], params["tau"], params["theta"]
    for _ in range(config.n_iter):
        kf = _apply_op(model, f_bar)
        h = learned_proximal_apply(params, "dual.shared", concat_channels([add(h, mul(kf, sigma)), gt]), 1)
        step = sub(f, mul(_apply_adjoint_derivative(model, f, h), tau))
        f_new = learned_proximal_apply(params, "primal.shared", step, 1)
        f_bar = add(f_new, mul(sub(f_new, f), theta))
        f = f_new
        if states is not None:
            states.append({"f": f, "h": h})
    return f


def learned_primal_forward(params, g, config: LpdConfig, model: ForwardModel,
                           states: list | None = None) -> Tensor:
    """Learned Primal: dual state is the data residual ``A(f2) - g``."""
    dtype = _dtype_of(params)
    gt, batch = _prepare_data(g, model, dtype)
    f = _initial_primal(g, model, config, config.n_primal, batch, dtype)
    for i in range(config.n_iter):
        h = sub(_apply_op(model, channels(f, 1, 2) if config.n_primal > 1 else f), gt)
        adj = _apply_adjoint_derivative(model, channels(f, 0, 1), h)
        f = learned_proximal_apply(params, _net_prefix("primal", config, "primal", i),
                                   concat_channels([f, adj]), config.n_primal)
        if states is not None:
            states.append({"f": f, "h": h})
    return channels(f, 0, 1)


def residual_denoiser_forward(params, g, config: LpdConfig, model: ForwardModel,
                              states: list | None = None) -> Tensor:
    """FBP followed by ``n_iter`` residual CNN updates; no operator calls."""
    dtype = _dtype_of(params)
    g = np.asarray(g)
    batch = 1 if g.ndim == 2 else g.shape[0]
    x0 = _pseudo_inverse(g.reshape(batch, *model.range_shape), model, config)
    f = Tensor(np.repeat(x0[:, None], config.n_primal, axis=1), dtype=dtype)
    for i in range(config.n_iter):
        f = learned_proximal_apply(params, _net_prefix("residual", config, "primal", i), f, config.n_primal)
        if states is not None:
            states.append({"f": f})
    return channels(f, 0, 1)


_FORWARDS = {
    "lpd": lpd_forward,
    "lpdhg": learned_pdhg_forward,
    "primal": learned_primal_forward,
    "residual": residual_denoiser_forward,
}


@dataclass
class LearnedReconstructor:
    """A learned scheme bound to its configuration and forward model."""

    kind: str
    config: LpdConfig = field(default_factory=LpdConfig)
    model: ForwardModel | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {KINDS}")
        if self.model is not None and self.model.mode != self.config.op_mode:
            raise ValueError("forward model mode differs from config.op_mode")

    def param_specs(self) -> OrderedDict:
        return param_specs(self.kind, self.config)

    def num_parameters(self) -> int:
        return count_parameters(self.kind, self.config)

    def forward(self, params, g, states: list | None = None) -> Tensor:
        missing = [k for k in self.param_specs() if k not in params]
        if missing:
            raise KeyError(f"missing parameters: {missing[:3]}...")
        return _FORWARDS[self.kind](params, g, self.config, self.model, states)

    def reconstruct(self, params, g) -> np.ndarray:
        """Reconstruction as a numpy array, ``(H, W)`` or ``(B, H, W)``."""
        out = self.forward(params, g).data[:, 0]
        return out[0] if np.asarray(g).ndim == 2 else out


# ---------------------------------------------------------------------------
# analytic reductions of the unrolled skeleton
# ---------------------------------------------------------------------------

def oracle_reduction_pdhg(g, model: ForwardModel, params: PdhgParams, return_iterates: bool = False):
    """Unrolled primal-dual skeleton with the classical TV-PDHG proximal maps.

    Primal state ``[f1, f2]`` (``f2`` the over-relaxed point), dual state the
    product-space element ``(h1, h2)``. Returns the final ``f1`` and, when
    requested, the list of ``f1`` iterates.
    """
    g = np.asarray(g, dtype=np.float64)
    sigma, tau, theta, lam = params.sigma, params.tau, params.gamma, params.lam

    def gamma_op(h, kf2):
        return (prox_l2_conjugate(h[0] + sigma * kf2[0], g, sigma),
                prox_l1_conjugate_isotropic(h[1] + sigma * kf2[1], lam))

    def lambda_op(f, adj):
        p = f[0] - tau * adj  # prox of G = 0 is the identity
        return (p, (1 + theta) * p - theta * f[0])

    def k(x):
        return (model(x), grad_op(x))

    def dk_adj(x, h):
        return model.adjoint_derivative(x, h[0]) - div_op(h[1])

    zero = np.zeros(model.domain_shape)
    f = (zero, zero.copy())
    h = (np.zeros_like(g), np.zeros((2,) + model.domain_shape))
    iterates = []
    for _ in range(params.iterations):
        h = gamma_op(h, k(f[1]))
        f = lambda_op(f, dk_adj(f[0], h))
        if return_iterates:
            iterates.append(f[0].copy())
    return (f[0], iterates) if return_iterates else f[0]


def oracle_reduction_gd(g, model: ForwardModel, alpha: float, iterations: int,
                        return_iterates: bool = False):
    """Skeleton reduced to gradient descent on ``||A(f) - g||^2`` (``G = 0``)."""
    g = np.asarray(g, dtype=np.float64)

    def gamma_op(h, kf2):
        return 2.0 * (kf2 - g)

    def lambda_op(f, adj):
        p = f[0] - alpha * adj
        return (p, p)

    zero = np.zeros(model.domain_shape)
    f = (zero, zero.copy())
    h = np.zeros_like(g)
    iterates = []
    for _ in range(iterations):
        h = gamma_op(h, model(f[1]))
        f = lambda_op(f, model.adjoint_derivative(f[0], h))
        if return_iterates:
            iterates.append(f[0].copy())
    return (f[0], iterates) if return_iterates else f[0]

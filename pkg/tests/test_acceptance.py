"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest

from lpdrecon.autodiff import (
    Graph,
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
    sum_squares,
)
from lpdrecon.cli import main
from lpdrecon.fbp import fbp_reconstruct
from lpdrecon.geometry import fan_geometry, parallel_geometry
from lpdrecon.lpd import LearnedReconstructor, LpdConfig, oracle_reduction_gd, oracle_reduction_pdhg
from lpdrecon.metrics import psnr
from lpdrecon.phantoms import EllipseSpec, render_ellipses, sample_ellipse_phantom
from lpdrecon.projector import (
    ForwardModel,
    MatrixOperator,
    RayTransform,
    back_projection,
    beer_lambert_derivative_adjoint,
    beer_lambert_forward,
    ray_transform,
)
from lpdrecon.tnsr import read_tensor
from lpdrecon.trainer import init_params
from lpdrecon.variational import default_params, pdhg_solve
from oracles import central_difference_grad, rel_err, tv1d_taut_string


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail, elapsed, budget):
        ok = bool(ok) and elapsed < budget
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {detail} ({elapsed:.1f} s, budget {budget:.0f} s)")
        assert ok, detail
    return emit


def adjoint_defect(op, f, g):
    af = op(f)
    return abs(np.vdot(af, g) - np.vdot(f, op.adjoint(g))) / (np.linalg.norm(af) * np.linalg.norm(g))


def test_criterion_01_adjoint_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = {}
    for name, geom in (("parallel", parallel_geometry((32, 32), 30, 46)),
                       ("fan", fan_geometry((32, 32), 60, 64, src_to_axis=50.0, axis_to_detector=50.0))):
        op = RayTransform(geom)
        worst[name] = max(adjoint_defect(op, rng.standard_normal(geom.image_shape),
                                         rng.standard_normal(geom.sinogram_shape)) for _ in range(50))
    report(1, max(worst.values()) < 1e-10, f"worst adjoint defect {worst}", time.perf_counter() - t0, 10)


def test_criterion_02_dense_matrix(report):
    t0 = time.perf_counter()
    geom = parallel_geometry((8, 8), 10, 12)
    cols = []
    for k in range(64):
        e = np.zeros(64)
        e[k] = 1.0
        cols.append(ray_transform(e.reshape(8, 8), geom).ravel())
    a = np.stack(cols, axis=1)
    rng = np.random.default_rng(2)
    f = rng.standard_normal((8, 8))
    g = rng.standard_normal(geom.sinogram_shape)
    fwd = rel_err(ray_transform(f, geom).ravel(), a @ f.ravel())
    adj = rel_err(back_projection(g, geom).ravel(), a.T @ g.ravel())
    # the back-projection is assembled independently from unit sinograms as well
    rows = []
    for k in range(g.size):
        e = np.zeros(g.size)
        e[k] = 1.0
        rows.append(back_projection(e.reshape(g.shape), geom).ravel())
    transpose = np.max(np.abs(np.stack(rows, axis=0) - a)) / np.max(np.abs(a))
    ok = fwd < 1e-12 and adj < 1e-12 and transpose < 1e-12
    report(2, ok, f"forward {fwd:.1e}, adjoint {adj:.1e}, transpose {transpose:.1e}", time.perf_counter() - t0, 5)


def test_criterion_03_beer_lambert_derivatives(report):
    t0 = time.perf_counter()
    geom = parallel_geometry((8, 8), 10, 12)
    mu, eps = 0.2, 1e-5
    rng = np.random.default_rng(3)
    direction, adjoint = [], []
    for _ in range(10):
        f = rng.uniform(0, 1, (8, 8))
        d = rng.standard_normal((8, 8))
        h = rng.standard_normal(geom.sinogram_shape)
        fd = (beer_lambert_forward(f + eps * d, geom, mu) - beer_lambert_forward(f - eps * d, geom, mu)) / (2 * eps)
        exact = -mu * beer_lambert_forward(f, geom, mu) * ray_transform(d, geom)
        direction.append(rel_err(fd, exact))
        adjoint.append(abs(np.vdot(fd, h) - np.vdot(d, beer_lambert_derivative_adjoint(f, h, geom, mu)))
                       / abs(np.vdot(fd, h)))
    ok = max(direction) < 1e-5 and max(adjoint) < 1e-5
    report(3, ok, f"directional {max(direction):.1e}, adjoint {max(adjoint):.1e}", time.perf_counter() - t0, 10)


def _gradient_error(fn, arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as tape:
        out = fn(*ts)
    tape.backward(out)
    worst = 0.0
    for i, a in enumerate(arrays):
        def scalar(x, i=i):
            args = [Tensor(b) for b in arrays]
            args[i] = Tensor(x)
            return float(fn(*args).data)
        worst = max(worst, rel_err(ts[i].grad, central_difference_grad(scalar, a, 1e-5)))
    return worst


def test_criterion_04_autodiff(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    geom = parallel_geometry((8, 8), 10, 12)
    op = RayTransform(geom)
    x = rng.standard_normal((2, 3, 5, 5))
    y = rng.standard_normal((2, 3, 5, 5))
    cases = {
        "add": (lambda a, b: sum_squares(add(a, b)), [x, y]),
        "sub": (lambda a, b: sum_squares(sub(a, b)), [x, y]),
        "scale": (lambda a: sum_squares(scale(a, -1.7)), [x]),
        "mul": (lambda a, b: sum_squares(mul(a, b)), [x, y]),
        "sum_squares": (lambda a: sum_squares(a), [x]),
        "conv2d": (lambda a, w, b: sum_squares(conv2d(a, w, b)),
                   [x, rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)]),
        "prelu": (lambda a, c: sum_squares(prelu(a, c)), [x, rng.uniform(-0.5, 0.5, 3)]),
        "concat_channels": (lambda a, b: sum_squares(mul(concat_channels([a, b]), concat_channels([b, a]))), [x, y]),
        "channels": (lambda a: sum_squares(channels(a, 1, 3)), [x]),
        "linear_operator": (lambda f: sum_squares(linear_operator(op, op.adjoint, f)),
                            [rng.standard_normal((8, 8))]),
        "nonlinear_operator": (lambda f: sum_squares(nonlinear_operator(
            lambda v: np.exp(-0.2 * op(v)),
            lambda p, c: -0.2 * op.adjoint(np.exp(-0.2 * op(p)) * c), f)), [rng.uniform(0, 1, (8, 8))]),
    }
    errors = {name: _gradient_error(fn, arrays) for name, (fn, arrays) in cases.items()}

    model = ForwardModel(op)
    scheme = LearnedReconstructor("lpd", LpdConfig.with_width(4, n_iter=2), model)
    params = init_params(scheme, 0, np.float64)
    for name, p in params.items():
        if ".b" in name or ".c" in name:
            p.data[...] = 0.1 * rng.standard_normal(p.shape)
    f = sample_ellipse_phantom(4, (8, 8))
    g = model(f) + 0.05 * rng.standard_normal(geom.sinogram_shape)
    with Graph() as tape:
        loss = sum_squares(sub(scheme.forward(params, g), Tensor(f[None, None])))
    tape.backward(loss)
    direction = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    # a small step keeps the difference quotient from straddling PReLU kinks
    eps = 1e-6

    def value(sign):
        shifted = {k: Tensor(p.data + sign * eps * direction[k]) for k, p in params.items()}
        return float(np.sum((scheme.forward(shifted, g).data - f) ** 2))

    fd = (value(1) - value(-1)) / (2 * eps)
    analytic = sum(np.vdot(p.grad, direction[k]) for k, p in params.items())
    unroll = abs(fd - analytic) / abs(fd)
    ok = max(errors.values()) < 1e-5 and unroll < 1e-3
    worst = max(errors, key=errors.get)
    report(4, ok, f"worst op {worst} {errors[worst]:.1e}, 2-unroll network {unroll:.1e}",
           time.perf_counter() - t0, 60)


def test_criterion_05_reduction_fidelity(report):
    t0 = time.perf_counter()
    geom = parallel_geometry((16, 16), 20, 24, pixel_size=2 / 16)
    model = ForwardModel(RayTransform(geom))
    g = model(sample_ellipse_phantom(12, (16, 16)))
    params = default_params(model, lam=0.05, iterations=20)
    _, skeleton = oracle_reduction_pdhg(g, model, params, return_iterates=True)
    classical = pdhg_solve(g, model, params, return_iterates=True).iterates
    pdhg_diff = max(np.max(np.abs(a - b)) for a, b in zip(skeleton, classical))

    a = np.array([[2.0, 1.0, 0.0, 0.0], [0.0, 1.0, 3.0, 0.0], [1.0, 0.0, 0.0, 1.0]])
    data = np.array([1.0, -2.0, 0.5])
    _, its = oracle_reduction_gd(data, ForwardModel(MatrixOperator(a, (4,), (3,))), 0.02, 30, return_iterates=True)
    f = np.zeros(4)
    gd_diff = 0.0
    for k in range(30):
        f = f - 0.02 * 2 * a.T @ (a @ f - data)
        gd_diff = max(gd_diff, np.max(np.abs(its[k] - f)))
    ok = len(skeleton) == len(classical) == 20 and pdhg_diff < 1e-12 and gd_diff < 1e-12
    report(5, ok, f"PDHG max diff {pdhg_diff:.1e}, gradient descent max diff {gd_diff:.1e}",
           time.perf_counter() - t0, 10)


def test_criterion_06_tv_taut_string(report):
    t0 = time.perf_counter()
    errors = []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        n = int(rng.integers(8, 65))
        lam = float(rng.uniform(0.05, 1.0))
        y = np.cumsum(rng.standard_normal(n)) * 0.3 + rng.standard_normal(n) * 0.2
        op = MatrixOperator.identity((1, n))
        res = pdhg_solve(y.reshape(1, n), op, default_params(op, lam=lam, iterations=2000))
        errors.append(rel_err(res.image.ravel(), tv1d_taut_string(y, lam / 2)))
    report(6, max(errors) < 1e-4, f"worst relative L2 error {max(errors):.1e} over 20 instances",
           time.perf_counter() - t0, 30)


def test_criterion_07_fbp_disk(report):
    t0 = time.perf_counter()
    n = 128
    geom = parallel_geometry((n, n), 180, 182, pixel_size=2 / n)
    disk = render_ellipses([EllipseSpec(1.0, (0.0, 0.0), (0.8, 0.8))], (n, n))
    data = ray_transform(disk, geom)
    wide = fbp_reconstruct(data, geom, "hann", 1.0)
    narrow = fbp_reconstruct(data, geom, "hann", 0.3)
    err = rel_err(wide, disk)
    p_wide, p_narrow = psnr(wide, disk), psnr(narrow, disk)
    ok = err < 0.10 and p_wide > p_narrow
    report(7, ok, f"relative error {err:.3f}, PSNR bandwidth 1.0 {p_wide:.2f} dB vs 0.3 {p_narrow:.2f} dB",
           time.perf_counter() - t0, 10)


@pytest.mark.slow
def test_criterion_08_desk_training(report):
    import desk_experiment

    t0 = time.perf_counter()
    r = desk_experiment.run(log=lambda m: print(m, flush=True))
    elapsed = time.perf_counter() - t0
    windows = 50 // desk_experiment.MONITOR_INTERVAL
    smoothed = {}
    for kind in ("lpd", "primal"):
        losses = [v for _, v in r[f"{kind}_monitor"]]
        smoothed[kind] = (float(np.mean(losses[:windows])), float(np.mean(losses[-windows:])))
    orderings = {
        "LPD >= FBP + 3 dB": r["lpd"] >= r["fbp"] + 3,
        "LPD >= TV": r["lpd"] >= r["tv"],
        "Learned Primal >= FBP + 2 dB": r["primal"] >= r["fbp"] + 2,
        "frozen-batch loss decreases": all(last < first for first, last in smoothed.values()),
    }
    failed = [k for k, v in orderings.items() if not v]
    detail = (f"FBP {r['fbp']:.2f} dB (bandwidth {r['fbp_bandwidth']}), TV {r['tv']:.2f} dB "
              f"(lambda {r['tv_lambda']}), LPD {r['lpd']:.2f} dB, Learned Primal {r['primal']:.2f} dB"
              + (f"; violated: {', '.join(failed)}" if failed else ""))
    report(8, not failed, detail, elapsed, 3600)


def test_criterion_09_parameter_accounting(report):
    t0 = time.perf_counter()
    geom = parallel_geometry((32, 32), 30, 46, pixel_size=2 / 32)
    scheme = LearnedReconstructor("lpd", LpdConfig(), ForwardModel(RayTransform(geom)))
    count = scheme.num_parameters()
    params = init_params(scheme, 0)
    scheme.model.reset_counters()
    scheme.reconstruct(params, np.zeros(geom.sinogram_shape, dtype=np.float32))
    calls = (scheme.model.forward_calls, scheme.model.adjoint_calls)
    ok = 2.3e5 <= count <= 2.5e5 and calls == (10, 10)
    report(9, ok, f"{count} parameters (required [2.3e5, 2.5e5]), {calls[0]} forward and {calls[1]} adjoint calls",
           time.perf_counter() - t0, 5)


def test_criterion_10_determinism(report, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    main(["gen-data", "--count", "12", "--size", "32", "--seed", "5", "--out", str(data)])
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        main(["train", "--data", str(data), "--steps", "20", "--width", "8", "--n-iter", "3", "--val-count", "2",
              "--seed", "9", "--out", str(out)])
        runs.append({p.name: p.read_bytes() for p in sorted((out / "checkpoint").iterdir()) if p.suffix == ".tnsr"})
    same_ckpt = runs[0] == runs[1] and len(runs[0]) > 0
    images = []
    for name in ("r1", "r2"):
        main(["reconstruct", "--checkpoint", str(tmp_path / "a" / "checkpoint"),
              "--data", str(data / "000011_sino.tnsr"), "--out", str(tmp_path / name)])
        images.append((tmp_path / name / "reconstruction.tnsr").read_bytes())
    same_image = images[0] == images[1] and read_tensor(tmp_path / "r1" / "reconstruction.tnsr").shape == (32, 32)
    report(10, same_ckpt and same_image,
           f"checkpoints identical: {same_ckpt} ({len(runs[0])} files), reconstructions identical: {same_image}",
           time.perf_counter() - t0, 300)

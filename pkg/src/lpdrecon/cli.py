"""Command-line interface: ``lpdrecon <subcommand> [options]``."""
from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .checkpoint import load_scheme
from .compare import compare, fbp_method, learned_method, tv_method
from .dataset import DirectoryDataset, SimulatedDataset, simulate_data, write_dataset
from .fbp import fbp_reconstruct
from .geometry import Geometry, parallel_geometry
from .lpd import KINDS, LearnedReconstructor, LpdConfig
from .metrics import psnr, ssim
from .noise import NoiseModel
from .phantoms import shepp_logan
from .projector import ForwardModel, RayTransform
from .tnsr import read_tensor, write_tensor
from .trainer import TrainConfig, train
from .variational import default_params, pdhg_solve

__all__ = ["main", "build_parser", "default_geometry", "write_png"]


def default_geometry(size: int = 64, num_angles: int = 30) -> Geometry:
    """Parallel beam on the square ``[-1, 1]^2`` with a detector covering its diagonal."""
    bins = int(math.ceil(math.sqrt(2) * size)) + 1
    return parallel_geometry((size, size), num_angles, bins, pixel_size=2.0 / size)


def write_png(path, image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> Path:
    """8-bit grayscale preview with values windowed to ``[lo, hi]``."""
    from PIL import Image

    if not hi > lo:
        raise ValueError("window must satisfy hi > lo")
    scaled = np.clip((np.asarray(image, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path)
    return path


def _precision(args, default: str = "f64") -> str:
    return args.precision or default


def _dtype(args) -> np.dtype:
    return np.dtype(np.float32 if _precision(args) == "f32" else np.float64)


def _geometry(args, size: int | None = None) -> Geometry:
    if args.geometry:
        return Geometry.from_json(Path(args.geometry))
    return default_geometry(size or 64)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_image(args, name: str, image: np.ndarray) -> None:
    out = _out(args)
    write_tensor(out / f"{name}.tnsr", np.asarray(image, dtype=_dtype(args)))
    write_png(out / f"{name}.png", image, *args.window)


def _noise(args) -> NoiseModel | None:
    if args.noise_level <= 0:
        return None
    return NoiseModel(args.noise_kind, args.noise_level, args.seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    geom = _geometry(args, args.size)
    ds = SimulatedDataset(geom, _noise(args), size=args.count, seed=args.seed, mode=args.mode,
                          mu=args.mu, phantom=args.phantom)
    write_dataset(_out(args), ds, args.count)
    geom.to_json(_out(args) / "geometry.json")
    print(f"wrote {args.count} samples to {args.out}")
    return 0


def cmd_shepp_logan(args) -> int:
    _save_image(args, "shepp_logan", shepp_logan((args.size, args.size)))
    return 0


def cmd_simulate(args) -> int:
    image = read_tensor(args.image)
    geom = _geometry(args, image.shape[0])
    data = simulate_data(image, geom, _noise(args), args.mode, args.mu)
    write_tensor(_out(args) / "sinogram.tnsr", np.asarray(data, dtype=_dtype(args)))
    geom.to_json(_out(args) / "geometry.json")
    return 0


def _post_log(data, args):
    return data if args.mode == "linear" else -np.log(np.clip(data, 1e-12, None)) / args.mu


def cmd_fbp(args) -> int:
    data = read_tensor(args.data)
    geom = _geometry(args)
    _save_image(args, "fbp", fbp_reconstruct(_post_log(data, args), geom, args.filter, args.bandwidth))
    return 0


def cmd_tv(args) -> int:
    data = read_tensor(args.data)
    model = ForwardModel(RayTransform(_geometry(args)), args.mode, args.mu)
    params = default_params(model, args.lam, args.iterations)
    if args.sigma is not None or args.tau is not None:
        params = replace(params, sigma=args.sigma or params.sigma, tau=args.tau or params.tau)
    _save_image(args, "tv", pdhg_solve(data, model, params).image)
    return 0


def _dataset(args):
    ds = DirectoryDataset(args.data)
    return ds, ds.geometry


def cmd_train(args) -> int:
    ds, geom = _dataset(args)
    if args.val_count >= len(ds):
        raise SystemExit("validation count must be smaller than the dataset")
    config = LpdConfig.with_width(args.width, n_iter=args.n_iter, op_mode=ds.mode, mu=ds.mu,
                                  init_mode=args.init_mode, share_weights=args.share_weights)
    scheme = LearnedReconstructor(args.kind, config, ForwardModel(RayTransform(geom), ds.mode, ds.mu))
    n_train = len(ds) - args.val_count
    train_set = [ds[k] for k in range(n_train)]
    validation = [ds[k] for k in range(n_train, len(ds))] or None
    tc = TrainConfig(steps=args.steps, eta0=args.eta0, batch_size=args.batch_size, seed=args.seed,
                     val_interval=args.val_interval, checkpoint_interval=args.checkpoint_interval,
                     precision=_precision(args, "f32"))
    out = _out(args)
    result = train(scheme, train_set, tc, validation=validation, log_path=out / "log.ndjson",
                   checkpoint_dir=out / "checkpoint")
    last = result.log[-1]["loss"] if result.log else float("nan")
    print(f"{args.kind}: {scheme.num_parameters()} parameters, final loss {last:.6g}")
    return 0


def cmd_reconstruct(args) -> int:
    geom = Geometry.from_json(Path(args.geometry)) if args.geometry else None
    scheme, params = load_scheme(args.checkpoint, geom)
    dtype = _dtype(args)
    params = {k: Tensor(v.data, dtype=dtype) for k, v in params.items()}
    _save_image(args, "reconstruction", scheme.reconstruct(params, read_tensor(args.data)))
    return 0


def cmd_eval(args) -> int:
    x, ref = read_tensor(args.recon), read_tensor(args.ref)
    rng = None if args.data_range is None else args.data_range
    print(json.dumps({"psnr": psnr(x, ref, rng), "ssim": ssim(x, ref, rng)}))
    return 0


def cmd_compare(args) -> int:
    ds, geom = _dataset(args)
    pairs = [ds[k] for k in range(len(ds))]
    methods = [fbp_method(geom, args.filter, args.bandwidth, ds.mode, ds.mu)]
    if args.lam is not None:
        methods.append(tv_method(geom, args.lam, args.iterations, ds.mode, ds.mu))
    for ckpt in args.checkpoint or []:
        scheme, params = load_scheme(ckpt, geom)
        methods.append(learned_method(scheme, params, Path(ckpt).resolve().parent.name or scheme.kind))
    table = compare(methods, pairs, runs=args.runs)
    table.write(_out(args) / "comparison")
    print(table.to_text(), end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", choices=("f32", "f64"),
                        help="floating-point precision (train: f32, otherwise f64)")
    common.add_argument("--geometry", help="geometry JSON file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--window", type=float, nargs=2, default=(0.0, 1.0), metavar=("LO", "HI"),
                        help="display window for PNG previews")

    forward = argparse.ArgumentParser(add_help=False)
    forward.add_argument("--op-mode", "--mode", dest="mode", choices=("linear", "beer-lambert"),
                         default="linear")
    forward.add_argument("--mu", type=float, default=0.2)

    noise = argparse.ArgumentParser(add_help=False)
    noise.add_argument("--noise-kind", choices=("additive-gaussian", "poisson-photon"),
                       default="additive-gaussian")
    noise.add_argument("--noise-level", type=float, default=0.05, help="0 disables noise")

    parser = argparse.ArgumentParser(prog="lpdrecon", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common, forward, noise], help="write a simulated dataset")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--phantom", choices=("ellipses", "shepp-logan"), default="ellipses")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("shepp-logan", parents=[common], help="write the modified Shepp-Logan phantom")
    p.add_argument("--size", type=int, default=128)
    p.set_defaults(func=cmd_shepp_logan)

    p = sub.add_parser("simulate", parents=[common, forward, noise], help="simulate data for an image")
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fbp", parents=[common, forward], help="filtered back-projection")
    p.add_argument("--data", required=True)
    p.add_argument("--filter", choices=("hann", "ram-lak"), default="hann")
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.set_defaults(func=cmd_fbp)

    p = sub.add_parser("tv", parents=[common, forward], help="TV-regularized reconstruction (PDHG)")
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", "--lam", dest="lam", type=float, required=True)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--sigma", type=float, help="dual step (default 0.99 / ||K||)")
    p.add_argument("--tau", type=float, help="primal step (default 0.99 / ||K||)")
    p.set_defaults(func=cmd_tv)

    p = sub.add_parser("train", parents=[common], help="train a learned scheme on a dataset directory")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--kind", choices=KINDS, default="lpd")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=5)
    p.add_argument("--eta0", type=float, default=1e-3)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--n-iter", type=int, default=10)
    p.add_argument("--init-mode", choices=("zero", "pseudo-inverse"), default="zero")
    p.add_argument("--share-weights", action="store_true")
    p.add_argument("--val-count", type=int, default=8)
    p.add_argument("--val-interval", type=int, default=100)
    p.add_argument("--checkpoint-interval", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", parents=[common], help="PSNR and SSIM of a reconstruction")
    p.add_argument("--recon", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--data-range", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="comparison table on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--filter", choices=("hann", "ram-lak"), default="hann")
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.add_argument("--lambda", "--lam", dest="lam", type=float, help="include TV with this weight")
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--checkpoint", action="append", help="learned checkpoint directory (repeatable)")
    p.add_argument("--runs", type=int, default=5)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

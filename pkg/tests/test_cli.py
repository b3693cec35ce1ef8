import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from lpdrecon.cli import build_parser, default_geometry, main, write_png
from lpdrecon.compare import ComparisonTable
from lpdrecon.geometry import Geometry
from lpdrecon.metrics import psnr
from lpdrecon.phantoms import shepp_logan
from lpdrecon.tnsr import read_tensor, write_tensor


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--count", "6", "--size", "16", "--seed", "3", "--out", str(root / "data")]) == 0
    return root


class TestParser:
    def test_subcommands(self):
        parser = build_parser()
        for cmd in ("gen-data", "shepp-logan", "simulate", "fbp", "tv", "train", "reconstruct", "eval", "compare"):
            args = parser.parse_args([cmd] + {"simulate": ["--image", "x"], "fbp": ["--data", "x"],
                                              "tv": ["--data", "x", "--lambda", "0.1"], "train": ["--data", "x"],
                                              "reconstruct": ["--checkpoint", "c", "--data", "x"],
                                              "eval": ["--recon", "a", "--ref", "b"],
                                              "compare": ["--data", "x"]}.get(cmd, []))
            assert args.command == cmd and args.seed == 0 and args.out == "."

    def test_global_flags(self):
        args = build_parser().parse_args(["fbp", "--data", "d", "--seed", "5", "--precision", "f32",
                                          "--geometry", "g.json", "--out", "o"])
        assert (args.seed, args.precision, args.geometry, args.out) == (5, "f32", "g.json", "o")

    def test_precision_default_not_shared(self):
        parser = build_parser()
        assert parser.parse_args(["shepp-logan"]).precision is None
        assert parser.parse_args(["train", "--data", "d"]).precision is None

    def test_missing_command(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])


class TestPng:
    def test_window(self, tmp_path):
        img = np.array([[0.0, 0.1], [0.16, 0.5]])
        out = np.asarray(Image.open(write_png(tmp_path / "a.png", img, 0.1, 0.4)))
        np.testing.assert_array_equal(out, [[0, 0], [51, 255]])

    def test_invalid_window(self, tmp_path):
        with pytest.raises(ValueError):
            write_png(tmp_path / "a.png", np.zeros((2, 2)), 1.0, 1.0)


def test_default_geometry():
    g = default_geometry(64)
    assert g.image_shape == (64, 64) and g.sinogram_shape == (30, 92)
    assert g.pixel_size == pytest.approx(2 / 64)


class TestPipeline:
    def test_gen_data(self, workdir):
        meta = json.loads((workdir / "data" / "meta.json").read_text())
        assert meta["count"] == 6
        Geometry.from_json(workdir / "data" / "geometry.json")

    def test_shepp_logan(self, tmp_path):
        assert main(["shepp-logan", "--size", "32", "--out", str(tmp_path)]) == 0
        np.testing.assert_array_equal(read_tensor(tmp_path / "shepp_logan.tnsr"), shepp_logan((32, 32)))
        assert (tmp_path / "shepp_logan.png").is_file()

    def test_simulate_fbp_eval(self, tmp_path, capsys):
        image = shepp_logan((32, 32))
        write_tensor(tmp_path / "img.tnsr", image)
        assert main(["simulate", "--image", str(tmp_path / "img.tnsr"), "--noise-level", "0",
                     "--out", str(tmp_path)]) == 0
        geom = str(tmp_path / "geometry.json")
        assert main(["fbp", "--data", str(tmp_path / "sinogram.tnsr"), "--geometry", geom,
                     "--out", str(tmp_path)]) == 0
        capsys.readouterr()
        assert main(["eval", "--recon", str(tmp_path / "fbp.tnsr"), "--ref", str(tmp_path / "img.tnsr")]) == 0
        metrics = json.loads(capsys.readouterr().out)
        assert metrics["psnr"] == pytest.approx(psnr(read_tensor(tmp_path / "fbp.tnsr"), image))
        assert -1 <= metrics["ssim"] <= 1

    def test_tv(self, workdir, tmp_path):
        data = workdir / "data"
        assert main(["tv", "--data", str(data / "000000_sino.tnsr"), "--geometry", str(data / "geometry.json"),
                     "--lambda", "0.01", "--iterations", "20", "--out", str(tmp_path)]) == 0
        assert read_tensor(tmp_path / "tv.tnsr").shape == (16, 16)

    def test_train_reconstruct_compare(self, workdir, tmp_path, capsys):
        data = workdir / "data"
        assert main(["train", "--data", str(data), "--steps", "3", "--batch-size", "2", "--width", "4",
                     "--n-iter", "2", "--val-count", "2", "--val-interval", "1", "--out", str(tmp_path)]) == 0
        log = [json.loads(x) for x in (tmp_path / "log.ndjson").read_text().splitlines()]
        assert len(log) == 3 and all("val_psnr" in r for r in log)
        ck = tmp_path / "checkpoint"
        assert read_tensor(ck / "dual.00.w1.tnsr").dtype == np.float32
        assert main(["reconstruct", "--checkpoint", str(ck), "--data", str(data / "000000_sino.tnsr"),
                     "--out", str(tmp_path)]) == 0
        assert read_tensor(tmp_path / "reconstruction.tnsr").shape == (16, 16)
        assert main(["compare", "--data", str(data), "--lambda", "0.01", "--iterations", "20",
                     "--checkpoint", str(ck), "--runs", "1", "--out", str(tmp_path)]) == 0
        table = ComparisonTable.from_csv((tmp_path / "comparison.csv").read_text())
        assert [r.method for r in table.rows] == ["FBP", "TV", tmp_path.name]
        assert table["FBP"].parameters == 1

    def test_compare_missing_checkpoint(self, workdir, tmp_path):
        with pytest.raises(FileNotFoundError):
            main(["compare", "--data", str(workdir / "data"), "--checkpoint", str(tmp_path / "none"),
                  "--runs", "0", "--out", str(tmp_path)])


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lpdrecon.cli", "shepp-logan", "--size", "16",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "shepp_logan.tnsr").is_file()

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lpdrecon.checkpoint import CheckpointError, load_scheme, save_checkpoint
from lpdrecon.compare import ComparisonTable, Row, compare, fbp_method, learned_method, tv_method
from lpdrecon.dataset import SimulatedDataset
from lpdrecon.geometry import parallel_geometry
from lpdrecon.lpd import LearnedReconstructor, LpdConfig
from lpdrecon.metrics import mean_metric, psnr, ssim
from lpdrecon.noise import NoiseModel
from lpdrecon.projector import ForwardModel, RayTransform
from lpdrecon.trainer import init_params


def loop_ssim(x, y, data_range):
    """Per-window SSIM from explicit weighted sums over every interior 11x11 patch."""
    t = np.arange(11) - 5.0
    w1 = np.exp(-t ** 2 / 4.5)
    w = np.outer(w1, w1) / w1.sum() ** 2
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for i in range(x.shape[0] - 10):
        for j in range(x.shape[1] - 10):
            a, b = x[i:i + 11, j:j + 11], y[i:i + 11, j:j + 11]
            ma, mb = np.sum(w * a), np.sum(w * b)
            va = np.sum(w * (a - ma) ** 2)
            vb = np.sum(w * (b - mb) ** 2)
            cov = np.sum(w * (a - ma) * (b - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


@pytest.fixture(scope="module")
def image():
    yy, xx = np.mgrid[-1:1:32j, -1:1:32j]
    return np.clip(1 - (xx ** 2 + 2 * yy ** 2), 0, 1) + 0.3 * (xx > 0.2)


class TestPsnr:
    def test_identical_is_infinite(self, image):
        assert psnr(image, image) == math.inf

    def test_mse_hundredth_is_20db(self):
        ref = np.zeros((10, 10))
        assert psnr(ref + 0.1, ref, data_range=1.0) == pytest.approx(20.0, abs=1e-12)

    def test_default_range_from_reference(self, image):
        x = image + 0.05
        assert psnr(x, image) == pytest.approx(psnr(x, image, float(image.max() - image.min())))

    def test_more_noise_lower_psnr(self, image, rng):
        e = rng.standard_normal(image.shape)
        assert psnr(image + 0.01 * e, image) > psnr(image + 0.1 * e, image)

    def test_errors(self, image):
        with pytest.raises(ValueError):
            psnr(image, image[:-1])
        with pytest.raises(ValueError):
            psnr(image, np.ones_like(image))


class TestSsim:
    def test_identical_is_one(self, image):
        assert ssim(image, image) == pytest.approx(1.0, abs=1e-12)

    def test_offset_below_one(self, image):
        assert ssim(image + 0.5, image, data_range=1.0) < 1.0

    def test_symmetric(self, image, rng):
        x = image + 0.1 * rng.standard_normal(image.shape)
        assert abs(ssim(x, image, 1.0) - ssim(image, x, 1.0)) < 1e-12

    def test_matches_windowed_loop(self, rng):
        y = rng.uniform(size=(15, 17))
        x = y + 0.2 * rng.standard_normal(y.shape)
        assert ssim(x, y, 1.0) == pytest.approx(loop_ssim(x, y, 1.0), abs=1e-12)

    @pytest.mark.parametrize("shape", [(10, 20), (20, 10), (5, 5, 5)])
    def test_too_small(self, shape):
        with pytest.raises(ValueError):
            ssim(np.zeros(shape), np.ones(shape))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from(["lr", "ud", "rot90", "transpose"]))
    def test_isometry_invariance(self, seed, op):
        rng = np.random.default_rng(seed)
        y = rng.uniform(size=(16, 16))
        x = y + 0.1 * rng.standard_normal(y.shape)
        f = {"lr": np.fliplr, "ud": np.flipud, "rot90": np.rot90, "transpose": np.transpose}[op]
        assert ssim(f(x), f(y), 1.0) == pytest.approx(ssim(x, y, 1.0), abs=1e-12)
        assert psnr(f(x), f(y), 1.0) == pytest.approx(psnr(x, y, 1.0), abs=1e-12)


def test_mean_metric():
    assert mean_metric([1.0, 2.0, 4.0]) == pytest.approx(7 / 3)
    assert mean_metric([1e16, 1.0, -1e16]) == 1 / 3
    with pytest.raises(ValueError):
        mean_metric([])


@pytest.fixture(scope="module")
def setup():
    geom = parallel_geometry((16, 16), 20, 24, pixel_size=2 / 16)
    ds = SimulatedDataset(geom, NoiseModel("additive-gaussian", 0.02, seed=1), seed=2)
    return geom, [ds[k] for k in range(3)]


class TestCompare:
    def test_rows_and_parameters(self, setup):
        geom, pairs = setup
        scheme = LearnedReconstructor("lpd", LpdConfig.with_width(4, n_iter=2), ForwardModel(RayTransform(geom)))
        table = compare([fbp_method(geom), tv_method(geom, 0.01, 50),
                         learned_method(scheme, init_params(scheme, 0), "LPD")], pairs, runs=2)
        assert [r.method for r in table.rows] == ["FBP", "TV", "LPD"]
        assert table["FBP"].parameters == 1 and table["TV"].parameters == 1
        assert table["LPD"].parameters == scheme.num_parameters()
        assert all(r.runtime_s > 0 for r in table.rows)

    def test_deterministic_except_runtime(self, setup):
        geom, pairs = setup
        a = compare([fbp_method(geom), tv_method(geom, 0.01, 50)], pairs, runs=1)
        b = compare([fbp_method(geom), tv_method(geom, 0.01, 50)], pairs, runs=1)
        for ra, rb in zip(a.rows, b.rows):
            assert (ra.method, ra.psnr, ra.ssim, ra.parameters) == (rb.method, rb.psnr, rb.ssim, rb.parameters)

    def test_csv_round_trip(self, setup, tmp_path):
        geom, pairs = setup
        table = compare([fbp_method(geom), tv_method(geom, 0.02, 30)], pairs, runs=1)
        assert ComparisonTable.from_csv(table.to_csv()) == table
        txt, csv_path = table.write(tmp_path / "comparison")
        assert ComparisonTable.from_csv(csv_path.read_text()) == table
        lines = txt.read_text().splitlines()
        assert lines[0].startswith("Method") and len({len(x) for x in lines}) == 1

    def test_csv_header_checked(self):
        with pytest.raises(ValueError):
            ComparisonTable.from_csv("a,b\n1,2\n")

    def test_text_alignment(self):
        table = ComparisonTable([Row("FBP", 22.5, 0.61, 0.001, 1), Row("Learned PD", 31.25, 0.9, 0.05, 12345)])
        lines = table.to_text().splitlines()
        assert len(lines) == 3 and len({len(x) for x in lines}) == 1
        assert lines[2].split()[-1] == "12345"

    def test_empty_pairs(self, setup):
        with pytest.raises(ValueError):
            compare([fbp_method(setup[0])], [])

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_scheme(tmp_path / "absent")

    def test_loaded_checkpoint_row(self, setup, tmp_path):
        geom, pairs = setup
        scheme = LearnedReconstructor("primal", LpdConfig.with_width(4, n_iter=2), ForwardModel(RayTransform(geom)))
        params = init_params(scheme, 0)
        save_checkpoint(tmp_path, scheme, params)
        loaded, p = load_scheme(tmp_path)
        a = compare([learned_method(scheme, params, "x")], pairs, runs=1)
        b = compare([learned_method(loaded, p, "x")], pairs, runs=1)
        assert (a["x"].psnr, a["x"].parameters) == (b["x"].psnr, b["x"].parameters)

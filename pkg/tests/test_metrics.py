import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcattack.metrics import (
    METRICS,
    MetricError,
    MetricReport,
    MetricUnavailable,
    acdm,
    metric_report,
    psnr,
    register_metric,
    ssim,
)

C1 = 0.01**2


def const(value, shape=(16, 16, 3)):
    out = np.zeros(shape)
    out[...] = value
    return out


def image_pairs(size=12):
    seeds = st.integers(0, 2**31 - 1)
    return st.tuples(seeds, seeds).map(
        lambda s: (np.random.default_rng(s[0]).random((size, size, 3)), np.random.default_rng(s[1]).random((size, size, 3)))
    )


class TestGolden:
    def test_psnr_half(self):
        # MSE 0.25 -> 10 log10(4)
        assert psnr(const(0.0), const(0.5)) == pytest.approx(6.0206, abs=1e-3)
        assert psnr(const(0.0), const(0.5)) == pytest.approx(20 * math.log10(2), rel=1e-12)

    def test_psnr_identical(self):
        assert psnr(const(0.3), const(0.3)) == math.inf

    def test_ssim_black_white(self):
        assert ssim(const(0.0), const(1.0)) == pytest.approx(C1 / (1 + C1), abs=1e-6)

    def test_ssim_identical(self, rng):
        a = rng.random((16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_acdm_identical(self, rng):
        a = rng.random((16, 16, 3))
        assert acdm(a, a) == 0.0

    def test_acdm_red_green(self):
        assert acdm(const([1.0, 0.0, 0.0]), const([0.0, 1.0, 0.0])) == pytest.approx(math.sqrt(2), rel=1e-12)

    def test_acdm_red_dark_red(self):
        assert acdm(const([1.0, 0.0, 0.0]), const([0.9, 0.0, 0.0])) == pytest.approx(0.1, rel=1e-12)

    def test_grayscale(self):
        assert psnr(const(0.0, (8, 8, 1)), const(0.5, (8, 8, 1))) == pytest.approx(6.0206, abs=1e-3)
        assert ssim(const(0.0, (16, 16, 1)), const(1.0, (16, 16, 1))) == pytest.approx(C1 / (1 + C1), abs=1e-6)


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(image_pairs())
    def test_symmetric(self, pair):
        a, b = pair
        assert psnr(a, b) == pytest.approx(psnr(b, a), rel=1e-12)
        assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12)
        assert acdm(a, b) == pytest.approx(acdm(b, a), rel=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(image_pairs())
    def test_ranges(self, pair):
        a, b = pair
        assert -1.0 <= ssim(a, b) <= 1.0
        assert acdm(a, b) >= 0.0
        assert psnr(a, b) > 0.0

    def test_psnr_monotone_in_noise(self, rng):
        a = rng.random((16, 16, 3)) * 0.5 + 0.25
        noise = rng.uniform(-1, 1, a.shape)
        values = [psnr(a, a + s * noise) for s in (0.01, 0.02, 0.05, 0.1, 0.2)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_pure(self, rng):
        a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        a0, b0 = a.copy(), b.copy()
        for f in (psnr, ssim, acdm):
            assert f(a, b) == f(a, b)
        np.testing.assert_array_equal(a, a0)
        np.testing.assert_array_equal(b, b0)

    def test_ssim_drops_with_noise(self, rng):
        a = rng.random((16, 16, 3)) * 0.5 + 0.25
        noise = rng.standard_normal(a.shape)
        assert ssim(a, np.clip(a + 0.01 * noise, 0, 1)) > ssim(a, np.clip(a + 0.1 * noise, 0, 1))

    def test_acdm_grows_with_shift(self, rng):
        a = rng.random((16, 16, 3)) * 0.5
        assert acdm(a, a + 0.01) < acdm(a, a + 0.1)


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            psnr(const(0.0), const(0.0, (8, 8, 3)))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            ssim(const(0.0), const(2.0))

    def test_even_window(self):
        with pytest.raises(MetricError):
            ssim(const(0.0), const(0.1), kernel_size=4)

    def test_acdm_needs_rgb(self):
        with pytest.raises(MetricError):
            acdm(const(0.0, (8, 8, 1)), const(0.0, (8, 8, 1)))


class TestReport:
    def test_identical_pair(self, rng):
        a = rng.random((16, 16, 3))
        row = metric_report([(a, a)]).rows[0]
        assert row["psnr"] == math.inf and row["ssim"] == pytest.approx(1.0) and row["acdm"] == 0.0

    def test_mean_and_count(self, rng):
        pairs = [(rng.random((16, 16, 3)), rng.random((16, 16, 3))) for _ in range(2)]
        rep = metric_report(pairs)
        assert rep.count == 2
        for m in ("psnr", "ssim", "acdm"):
            assert rep.aggregates()[m]["mean"] == pytest.approx((rep.rows[0][m] + rep.rows[1][m]) / 2, rel=1e-15)

    def test_aggregates(self):
        pairs = [(const(0.0), const(0.5)), (const(0.2), const(0.2))]
        rep = metric_report(pairs, ["psnr", "acdm"], names=["a", "b"])
        agg = rep.aggregates()
        assert agg["psnr"]["mean"] == math.inf
        assert agg["psnr"]["n_infinite"] == 1
        assert agg["psnr"]["finite_mean"] == pytest.approx(6.0206, abs=1e-3)
        assert agg["acdm"]["mean"] == pytest.approx(math.sqrt(3 * 0.25) / 2, rel=1e-12)
        assert agg["acdm"]["count"] == 2

    def test_csv_round_trip(self, tmp_path, rng):
        pairs = [(rng.random((16, 16, 3)), rng.random((16, 16, 3))) for _ in range(3)]
        rep = metric_report(pairs)
        rep.to_csv(tmp_path / "r.csv")
        back = MetricReport.from_csv(tmp_path / "r.csv")
        assert back.names == rep.names and back.metrics == rep.metrics
        assert back.rows == rep.rows

    def test_json(self, tmp_path):
        rep = metric_report([(const(0.0), const(0.5))], ["psnr"])
        rep.to_json(tmp_path / "r.json")
        assert '"count": 1' in (tmp_path / "r.json").read_text()

    def test_reserved_unavailable(self):
        with pytest.raises(MetricUnavailable):
            metric_report([(const(0.0), const(0.0))], ["lpips"])

    def test_unknown(self):
        with pytest.raises(MetricError):
            metric_report([(const(0.0), const(0.0))], ["nope"])

    def test_empty(self):
        with pytest.raises(MetricError):
            metric_report([])

    def test_register(self):
        register_metric("l1", lambda a, b: float(np.abs(a - b).mean()))
        try:
            rep = metric_report([(const(0.0), const(0.25))], ["l1"])
            assert rep.values("l1")[0] == 0.25
        finally:
            METRICS.pop("l1")

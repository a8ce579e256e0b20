"""DSP tests: median oracle, SNR convention, Welch PSD, Gaussianity."""

import math

import numpy as np
import pytest

from resotrack import dsp
from resotrack.errors import DomainError, ParameterError

SNR_PIN_MEAN = 1.33   # volts, reference operating point
SNR_PIN_STD = 0.0067  # volts
SNR_PIN_DB = 45.955   # 20*log10(1.33/0.0067)


def brute_median(x, window):
    h = (window - 1) // 2
    n = len(x)
    out = np.empty(n)
    for i in range(n):
        k = min(i, n - 1 - i, h)
        out[i] = np.median(np.sort(x[i - k : i + k + 1]))
    return out


# -- median filter -----------------------------------------------------------

def test_median_three_element():
    out = dsp.median_filter([1.0, 5.0, 2.0], 3)
    assert out[1] == 2.0


def test_median_constant_series_unchanged():
    x = np.full(50, 3.7)
    np.testing.assert_array_equal(dsp.median_filter(x, 11), x)


@pytest.mark.parametrize("window", [1, 3, 7, 31, 99])
def test_median_matches_brute_force(rng, window):
    x = rng.normal(size=400)
    np.testing.assert_array_equal(dsp.median_filter(x, window), brute_median(x, window))


def test_median_backends_agree(rng):
    x = rng.normal(size=513)
    a = dsp.median_filter(x, 31, backend="python")
    b = dsp.median_filter(x, 31, backend="numpy")
    np.testing.assert_array_equal(a, b)


def test_median_rejects_even_or_long_window():
    x = np.zeros(10)
    with pytest.raises(ParameterError):
        dsp.median_filter(x, 4)
    with pytest.raises(ParameterError):
        dsp.median_filter(x, 11)
    with pytest.raises(ParameterError):
        dsp.median_filter(x, -3)


def test_median_idempotent_on_monotone(rng):
    x = np.sort(rng.normal(size=200))
    once = dsp.median_filter(x, 21)
    np.testing.assert_array_equal(once, x)


def test_median_stays_within_input_range(rng):
    x = rng.standard_t(3, size=1000)
    out = dsp.median_filter(x, 51)
    assert out.min() >= x.min() and out.max() <= x.max()


def test_median_output_length_matches_input(rng):
    x = rng.normal(size=301)
    assert dsp.median_filter(x, 301).shape == x.shape


# -- streaming median --------------------------------------------------------

def test_streaming_median_matches_trailing_oracle(rng):
    x = rng.normal(size=500)
    sm = dsp.StreamingMedian(31)
    got = sm.push_many(x)
    want = np.array([np.median(x[max(0, i - 30) : i + 1]) for i in range(500)])
    np.testing.assert_allclose(got, want, rtol=0, atol=0)


def test_streaming_median_warm_window_is_exact_order_statistic(rng):
    x = rng.normal(size=100)
    sm = dsp.StreamingMedian(11)
    out = sm.push_many(x)
    assert out[-1] == np.median(x[-11:])
    assert len(sm) == 11


def test_streaming_median_reset():
    sm = dsp.StreamingMedian(5)
    sm.push_many([1.0, 2.0, 3.0])
    sm.reset()
    assert len(sm) == 0
    assert sm.push(7.0) == 7.0


def test_streaming_median_rejects_bad_input():
    with pytest.raises(ParameterError):
        dsp.StreamingMedian(4)
    sm = dsp.StreamingMedian(3)
    with pytest.raises(ParameterError):
        sm.push(math.nan)


# -- snr ---------------------------------------------------------------------

def test_snr_reference_point_pin(rng):
    x = SNR_PIN_MEAN + SNR_PIN_STD * rng.standard_normal(200_000)
    assert dsp.snr(x) == pytest.approx(SNR_PIN_DB, abs=0.1)


def test_snr_exact_formula():
    # two-point series with known sample stats
    x = np.array([1.0, 3.0])      # mean 2, std (ddof=1) = sqrt(2)
    assert dsp.snr(x) == pytest.approx(20 * math.log10(2 / math.sqrt(2)), rel=1e-12)


def test_snr_scale_invariant(rng):
    x = 1.0 + 0.01 * rng.standard_normal(10_000)
    assert dsp.snr(3.7 * x) == pytest.approx(dsp.snr(x), abs=1e-9)


def test_snr_constant_is_infinite():
    assert dsp.snr(np.full(10, 2.0)) == math.inf


def test_snr_rejects_nonpositive_mean_and_short_series():
    with pytest.raises(DomainError):
        dsp.snr(np.array([-1.0, -2.0, 3.0, -4.0]))
    with pytest.raises(ParameterError):
        dsp.snr(np.array([1.0]))


def test_snr_generator_consistency(rng):
    """A stream generated at 67 dB reads back 67 +/- 0.5 dB."""
    mean = 1.33
    std = mean / 10 ** (67.0 / 20.0)
    x = mean + std * rng.standard_normal(100_000)
    assert dsp.snr(x) == pytest.approx(67.0, abs=0.5)


# -- psd ---------------------------------------------------------------------

def test_psd_sine_peak(rng):
    fs = 2272.0
    t = np.arange(8192) / fs
    f0 = 200.0
    x = np.sin(2 * np.pi * f0 * t) + 0.01 * rng.standard_normal(t.size)
    freqs, density = dsp.psd(x, fs)
    peak = freqs[np.argmax(density)]
    assert abs(peak - f0) <= fs / 256


def test_psd_white_noise_flat(rng):
    freqs, density = dsp.psd(rng.standard_normal(262_144), 1000.0)
    band = density[freqs > 0]
    f = freqs[freqs > 0]
    # averages over octave bands stay within 1.5 dB of each other
    edges = np.geomspace(f.min(), f.max(), 9)
    means = [band[(f >= a) & (f < b)].mean() for a, b in zip(edges, edges[1:])]
    ratio_db = 10 * np.log10(max(means) / min(means))
    assert ratio_db < 1.5


def test_psd_parseval(rng):
    x = rng.standard_normal(65_536)
    fs = 500.0
    freqs, density = dsp.psd(x, fs)
    power = np.trapezoid(density, freqs)
    assert power == pytest.approx(np.var(x), rel=0.05)


def test_psd_rejects_short_series(rng):
    with pytest.raises(ParameterError):
        dsp.psd(rng.standard_normal(255), 1000.0)
    with pytest.raises(ParameterError):
        dsp.psd(rng.standard_normal(512), 0.0)


def test_psd_band_average_variance_shrinks(rng):
    """More data -> proportionally tighter Welch band averages."""
    fs = 1000.0

    def band_spread(n, seed):
        r = np.random.default_rng(seed)
        spreads = []
        for _ in range(6):
            freqs, d = dsp.psd(r.standard_normal(n), fs)
            spreads.append(d[freqs > 0].std() / d[freqs > 0].mean())
        return np.mean(spreads)

    small = band_spread(4096, 1)
    large = band_spread(65_536, 2)
    # 16x the segments -> ~4x tighter; require at least 2.5x
    assert small / large > 2.5


def test_psd_decade_ratio_flat_noise_near_zero(rng):
    freqs, density = dsp.psd(rng.standard_normal(262_144), 2272.0)
    assert abs(dsp.psd_decade_ratio_db(freqs, density)) < 1.0


def test_psd_decade_ratio_detects_low_frequency_excess(rng):
    # AR(1) process: strong low-frequency noise shaping
    n = 262_144
    w = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = 0.0
    a = 0.99
    for i in range(1, n):
        x[i] = a * x[i - 1] + w[i]
    freqs, density = dsp.psd(x, 2272.0)
    assert dsp.psd_decade_ratio_db(freqs, density) > 10.0


def test_psd_decade_ratio_needs_two_decades():
    freqs = np.linspace(0, 50, 129)
    with pytest.raises(ParameterError):
        dsp.psd_decade_ratio_db(freqs[1:] + 10.0, np.ones(128))


# -- gaussianity -------------------------------------------------------------

def test_gaussianity_normal_stream(rng):
    rep = dsp.gaussianity(rng.standard_normal(100_000))
    assert rep.verdict == dsp.VERDICT_CONSISTENT
    assert abs(rep.stats.skewness) < 0.1
    assert abs(rep.stats.excess_kurtosis) < 0.2
    assert rep.hist_counts.sum() == 100_000
    assert rep.bin_edges.shape == (65,)
    assert rep.fit_mean == rep.stats.mean and rep.fit_std == rep.stats.std


def test_gaussianity_uniform_negative(rng):
    rep = dsp.gaussianity(rng.uniform(size=100_000))
    assert rep.verdict == dsp.VERDICT_INCONSISTENT
    assert rep.stats.excess_kurtosis == pytest.approx(-1.2, abs=0.05)


def test_gaussianity_constant_not_applicable():
    rep = dsp.gaussianity(np.full(20_000, 1.5))
    assert rep.verdict == dsp.VERDICT_NOT_APPLICABLE
    assert rep.stats.snr_db == math.inf
    assert rep.hist_counts.sum() == 20_000


def test_gaussianity_rejects_short(rng):
    with pytest.raises(ParameterError):
        dsp.gaussianity(rng.standard_normal(9_999))


def test_gaussianity_skewed_negative(rng):
    rep = dsp.gaussianity(rng.exponential(size=100_000))
    assert rep.verdict == dsp.VERDICT_INCONSISTENT
    assert rep.stats.skewness > 1.0


# -- series stats ------------------------------------------------------------

def test_series_stats_fields(rng):
    x = 2.0 + 0.5 * rng.standard_normal(50_000)
    st = dsp.series_stats(x)
    assert st.mean == pytest.approx(2.0, abs=0.02)
    assert st.std == pytest.approx(0.5, abs=0.02)
    assert st.snr_db == pytest.approx(20 * math.log10(st.mean / st.std), rel=1e-12)
    assert st.n == 50_000


def test_series_stats_negative_mean_snr_nan(rng):
    st = dsp.series_stats(-1.0 + 0.1 * rng.standard_normal(1000))
    assert math.isnan(st.snr_db)


# -- csv ---------------------------------------------------------------------

def test_psd_csv_round_trip(tmp_path, rng):
    freqs, density = dsp.psd(rng.standard_normal(4096), 2272.0)
    path = str(tmp_path / "psd.csv")
    dsp.psd_to_csv(freqs, density, path, meta={"source": "unit"})
    f2, d2 = dsp.psd_from_csv(path)
    np.testing.assert_array_equal(freqs, f2)
    np.testing.assert_array_equal(density, d2)


def test_stats_csv_round_trip(tmp_path, rng):
    st = dsp.series_stats(rng.standard_normal(5000) + 3.0)
    path = str(tmp_path / "stats.csv")
    dsp.stats_to_csv(st, path)
    assert dsp.stats_from_csv(path) == st


def test_stats_csv_missing_field(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("key,value\nmean,1.0\n")
    with pytest.raises(ParameterError):
        dsp.stats_from_csv(str(path))

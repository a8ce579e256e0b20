"""Batch and streaming analysis of tracker output.

Median filtering (centered for persisted data, trailing for live streams),
SNR in the 20*log10(mean/std) convention, Welch power spectral density,
and moment-based Gaussianity diagnostics.  All batch functions are pure;
the streaming median keeps an order-statistics window and is safe to run
on a consumer thread away from the tracking loop.
"""

from __future__ import annotations

import bisect
import csv
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from . import kernels
from .constants import SCHEMA_VERSION
from .errors import DomainError, ParameterError

__all__ = [
    "SeriesStats",
    "GaussianityReport",
    "VERDICT_CONSISTENT",
    "VERDICT_INCONSISTENT",
    "VERDICT_NOT_APPLICABLE",
    "median_filter",
    "StreamingMedian",
    "snr",
    "series_stats",
    "psd",
    "psd_decade_ratio_db",
    "gaussianity",
    "psd_to_csv",
    "psd_from_csv",
    "stats_to_csv",
    "stats_from_csv",
]

VERDICT_CONSISTENT = "consistent with Gaussian"
VERDICT_INCONSISTENT = "inconsistent with Gaussian"
VERDICT_NOT_APPLICABLE = "not applicable"

_SKEW_LIMIT = 0.1
_KURT_LIMIT = 0.2
_PSD_SEGMENT = 256
_HIST_BINS = 64


@dataclass(frozen=True)
class SeriesStats:
    """Summary moments of one series; ``snr_db`` is +inf for a constant."""

    mean: float
    std: float
    snr_db: float
    skewness: float
    excess_kurtosis: float
    n: int


@dataclass(frozen=True)
class GaussianityReport:
    stats: SeriesStats
    verdict: str
    hist_counts: np.ndarray   # 64 bins
    bin_edges: np.ndarray     # 65 edges
    fit_mean: float           # parameters of the fitted normal curve
    fit_std: float


def _as_series(series) -> np.ndarray:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ParameterError(f"series must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("series contains non-finite values")
    return x


def median_filter(series, window: int, *, backend: str | None = None) -> np.ndarray:
    """Sliding median; edges shrink the window symmetrically.

    Output length equals input length, so filtered and raw series stay
    aligned sample-for-sample.
    """
    x = _as_series(series)
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 1, got {window}")
    if window > x.shape[0]:
        raise ParameterError(
            f"window {window} exceeds series length {x.shape[0]}"
        )
    if window == 1:
        return x.copy()
    return kernels.median(x, (window - 1) // 2, backend=backend)


class StreamingMedian:
    """Trailing-window median over a live sample stream.

    Keeps the last ``window`` values in arrival order plus a sorted copy;
    each push costs one bisect insert and one delete.  While the window is
    still filling, the median of whatever has arrived is returned, so the
    output stream has no warm-up gap.
    """

    def __init__(self, window: int):
        if window < 1 or window % 2 == 0:
            raise ParameterError(f"window must be odd and >= 1, got {window}")
        self.window = window
        self._fifo: deque[float] = deque()
        self._sorted: list[float] = []

    def push(self, value: float) -> float:
        value = float(value)
        if not math.isfinite(value):
            raise ParameterError("streaming median requires finite values")
        self._fifo.append(value)
        bisect.insort(self._sorted, value)
        if len(self._fifo) > self.window:
            gone = self._fifo.popleft()
            del self._sorted[bisect.bisect_left(self._sorted, gone)]
        s = self._sorted
        m = len(s)
        if m % 2:
            return s[m // 2]
        return 0.5 * (s[m // 2 - 1] + s[m // 2])

    def push_many(self, values) -> np.ndarray:
        return np.array([self.push(v) for v in np.asarray(values, np.float64)])

    def reset(self) -> None:
        self._fifo.clear()
        self._sorted.clear()

    def __len__(self) -> int:
        return len(self._fifo)


def snr(series) -> float:
    """20*log10(mean/std) with sample std (n-1 denominator).

    A constant series reports +inf; a non-positive mean has no SNR in this
    convention and raises.
    """
    x = _as_series(series)
    if x.shape[0] < 2:
        raise ParameterError("snr needs at least 2 samples")
    mean = float(x.mean())
    if mean <= 0.0:
        raise DomainError(f"snr undefined for mean {mean:.6g} <= 0")
    std = float(x.std(ddof=1))
    if std == 0.0:
        return math.inf
    return 20.0 * math.log10(mean / std)


def series_stats(series) -> SeriesStats:
    x = _as_series(series)
    if x.shape[0] < 2:
        raise ParameterError("series_stats needs at least 2 samples")
    mean = float(x.mean())
    std = float(x.std(ddof=1))
    if std == 0.0:
        return SeriesStats(mean, 0.0, math.inf, math.nan, math.nan, x.shape[0])
    snr_db = 20.0 * math.log10(mean / std) if mean > 0.0 else math.nan
    return SeriesStats(
        mean=mean,
        std=std,
        snr_db=snr_db,
        skewness=float(stats.skew(x)),
        excess_kurtosis=float(stats.kurtosis(x, fisher=True)),
        n=x.shape[0],
    )


def psd(series, sample_rate: float):
    """One-sided Welch PSD: 256-point Hann segments, 50% overlap, per-segment
    mean removal.  Returns ``(freqs, density)`` with density in V^2/Hz."""
    x = _as_series(series)
    if not (sample_rate > 0.0):
        raise ParameterError("sample_rate must be positive")
    if x.shape[0] < _PSD_SEGMENT:
        raise ParameterError(
            f"psd needs at least {_PSD_SEGMENT} samples, got {x.shape[0]}"
        )
    freqs, density = signal.welch(
        x,
        fs=sample_rate,
        window="hann",
        nperseg=_PSD_SEGMENT,
        noverlap=_PSD_SEGMENT // 2,
        detrend="constant",
        return_onesided=True,
        scaling="density",
    )
    return freqs, density


def psd_decade_ratio_db(freqs, density) -> float:
    """Mean density over the lowest decade minus the highest, in dB.

    The decades are anchored at the smallest nonzero frequency and at the
    top of the axis; positive values mean excess low-frequency power.
    """
    f = np.asarray(freqs, np.float64)
    p = np.asarray(density, np.float64)
    keep = f > 0.0
    f, p = f[keep], p[keep]
    if f.shape[0] < 4:
        raise ParameterError("too few nonzero-frequency bins for decade ratio")
    f_lo, f_hi = float(f.min()), float(f.max())
    if f_hi / f_lo < 100.0:
        raise ParameterError(
            f"axis spans {f_hi / f_lo:.1f}x; need >= 2 separated decades"
        )
    low = p[f < 10.0 * f_lo]
    high = p[f > f_hi / 10.0]
    return 10.0 * math.log10(float(low.mean()) / float(high.mean()))


def gaussianity(series) -> GaussianityReport:
    """Moment-based normality check plus a histogram with a fitted curve.

    Deterministic thresholds (|skew| < 0.1, |excess kurtosis| < 0.2) stand
    in for a formal hypothesis test so repeated runs give one answer.
    """
    x = _as_series(series)
    if x.shape[0] < 10_000:
        raise ParameterError(
            f"gaussianity needs >= 10000 samples, got {x.shape[0]}"
        )
    st = series_stats(x)
    if st.std == 0.0:
        counts = np.zeros(_HIST_BINS)
        counts[_HIST_BINS // 2] = x.shape[0]
        edges = np.linspace(st.mean - 0.5, st.mean + 0.5, _HIST_BINS + 1)
        return GaussianityReport(st, VERDICT_NOT_APPLICABLE, counts, edges,
                                 st.mean, 0.0)
    verdict = (
        VERDICT_CONSISTENT
        if abs(st.skewness) < _SKEW_LIMIT and abs(st.excess_kurtosis) < _KURT_LIMIT
        else VERDICT_INCONSISTENT
    )
    counts, edges = np.histogram(x, bins=_HIST_BINS)
    return GaussianityReport(st, verdict, counts.astype(np.float64), edges,
                             st.mean, st.std)


# ---------------------------------------------------------------------------
# CSV


def psd_to_csv(freqs, density, path: str, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        for key in sorted(meta or {}):
            fh.write(f"# {key}={meta[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(["frequency", "density"])
        for f, p in zip(freqs, density):
            writer.writerow([repr(float(f)), repr(float(p))])


def psd_from_csv(path: str):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(
            line for line in fh if not line.startswith("#")
        ) if r]
    if not rows or rows[0] != ["frequency", "density"]:
        raise ParameterError(f"{path}: missing frequency,density header")
    freqs = np.array([float(r[0]) for r in rows[1:]])
    density = np.array([float(r[1]) for r in rows[1:]])
    return freqs, density


def stats_to_csv(st: SeriesStats, path: str, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        for key in sorted(meta or {}):
            fh.write(f"# {key}={meta[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        for key in ("mean", "std", "snr_db", "skewness", "excess_kurtosis"):
            writer.writerow([key, repr(float(getattr(st, key)))])
        writer.writerow(["n", st.n])


def stats_from_csv(path: str) -> SeriesStats:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(
            line for line in fh if not line.startswith("#")
        ) if r]
    if not rows or rows[0] != ["key", "value"]:
        raise ParameterError(f"{path}: missing key,value header")
    vals = {r[0]: r[1] for r in rows[1:]}
    try:
        return SeriesStats(
            mean=float(vals["mean"]),
            std=float(vals["std"]),
            snr_db=float(vals["snr_db"]),
            skewness=float(vals["skewness"]),
            excess_kurtosis=float(vals["excess_kurtosis"]),
            n=int(vals["n"]),
        )
    except KeyError as exc:
        raise ParameterError(f"{path}: missing stats field {exc}") from exc

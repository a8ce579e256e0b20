"""Frequency-scan calibration: dip location, modulation amplitude, loop gain.

The calibration pass drives the DAC over a voltage grid, records averaged
ADC readings, and derives everything the tracker needs: the dip voltage
``v0``, the modulation amplitude ``a_m`` (one eighth of the separation of
the transmittance-derivative extrema), the integral gain ``k_gain`` (the
reciprocal least-squares slope of the derivative around the dip), and the
resonator figures Q and depth read back off the measured trace.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import savgol_filter

from .config import PlantConfig, VcoConfig
from .constants import (
    AM_WIDTH_DIVISOR,
    DEFAULT_SCAN_AVERAGING,
    DEFAULT_SCAN_POINTS,
    K_REGRESSION_SPAN_AM,
    SCHEMA_VERSION,
)
from .errors import CalibrationError, DomainError, NoDipError, ParameterError
from .plant import Plant, dip_voltage, tuning_slope

__all__ = [
    "ScanTrace",
    "CalibrationResult",
    "scan",
    "find_dip",
    "derivative",
    "compute_am",
    "compute_k",
    "estimate_q",
    "estimate_depth",
    "local_sensitivity",
    "calibrate",
    "am_closed_form",
    "k_closed_form",
    "scan_to_csv",
    "scan_from_csv",
    "calibration_to_csv",
    "calibration_from_csv",
]

# Pre-smoothing applied before the minimum search and differentiation.
# Short quadratic window: preserves curvature, knocks single-code chatter
# off the quantizer staircase.
_SMOOTH_WINDOW = 5
_SMOOTH_ORDER = 2

# Extremum-locator geometry for compute_am, as fractions of the rough
# extremum separation.  Quantization turns the trace into a staircase whose
# error term is a slowly chirping sawtooth; the short-baseline derivative
# keeps that ripple, so a naive argmax on t_prime wanders by several grid
# steps on the nearly-flat extremum top.  Wide quartic least-squares
# smoothing windows integrate over whole sawtooth periods, the median over
# three window widths decorrelates the residual alias phase, and a short
# parabola fit resolves the extremum below the grid pitch.  Sweeps over
# both plant profiles and a randomized family of compliant scan steps put
# the worst-case amplitude error at 1.5%; the frozen values live in tests.
_AM_WINDOW_FRACTIONS = (0.6, 0.7, 0.8)
_AM_SMOOTH_ORDER = 4
_AM_VERTEX_FRACTION = 0.07

_GRID_UNIFORM_TOL = 1e-9  # volts


@dataclass(frozen=True)
class ScanTrace:
    """One completed frequency scan: the DAC grid and averaged ADC readback."""

    v_dac: np.ndarray
    v_adc: np.ndarray
    averaging: int
    settings: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        vd = np.asarray(self.v_dac, dtype=np.float64)
        va = np.asarray(self.v_adc, dtype=np.float64)
        if vd.ndim != 1 or va.shape != vd.shape:
            raise ParameterError("scan arrays must be 1-D and equal length")
        if vd.size < 32:
            raise ParameterError("scan needs at least 32 points")
        d = np.diff(vd)
        if not np.all(d > 0):
            raise ParameterError("scan grid must be strictly increasing")
        if np.ptp(d) > _GRID_UNIFORM_TOL:
            raise ParameterError("scan grid must be uniform to 1e-9 V")
        if self.averaging < 1:
            raise ParameterError("averaging must be >= 1")
        object.__setattr__(self, "v_dac", vd)
        object.__setattr__(self, "v_adc", va)

    @property
    def step(self) -> float:
        return float(self.v_dac[1] - self.v_dac[0])

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.v_dac, self.v_adc])


@dataclass(frozen=True)
class CalibrationResult:
    """Derived tracker parameters plus spectrum readbacks.

    ``t_prime`` carries the (v_dac, dT/dV) samples the amplitude and gain
    estimates were drawn from, for plotting and downstream checks.
    """

    v0: float
    a_m: float
    k_gain: float
    q_est: float
    delta_t_est: float
    t_prime: np.ndarray
    fwhm_v: float = float("nan")
    settings: dict = field(default_factory=dict)


def scan(
    plant: Plant,
    *,
    n_points: int = DEFAULT_SCAN_POINTS,
    averaging: int = DEFAULT_SCAN_AVERAGING,
    v_start: float | None = None,
    v_stop: float | None = None,
) -> ScanTrace:
    """Sweep the DAC over ``[v_start, v_stop]`` and average repeated readings.

    Each grid point is converted ``averaging`` times back-to-back and the
    readings averaged; the plant's disturbance streams advance exactly
    ``n_points * averaging`` conversions regardless of grid choice.
    """
    if n_points < 32:
        raise ParameterError("scan needs at least 32 points")
    if averaging < 1:
        raise ParameterError("averaging must be >= 1")
    lo, hi = plant.config.vco.v_range
    v_start = lo if v_start is None else float(v_start)
    v_stop = hi if v_stop is None else float(v_stop)
    if not (lo - 1e-12 <= v_start < v_stop <= hi + 1e-12):
        raise ParameterError("scan window must lie inside the DAC range")
    grid = np.linspace(v_start, v_stop, n_points)
    adc, _ = plant.sample_many(np.repeat(grid, averaging))
    avg = adc.reshape(n_points, averaging).mean(axis=1)
    return ScanTrace(
        v_dac=grid,
        v_adc=avg,
        averaging=averaging,
        settings={
            "n_points": n_points,
            "averaging": averaging,
            "v_start": v_start,
            "v_stop": v_stop,
            "seed": plant.config.seed,
        },
    )


def _smoothed(trace: ScanTrace) -> np.ndarray:
    return savgol_filter(trace.v_adc, _SMOOTH_WINDOW, _SMOOTH_ORDER)


def _dip_index(trace: ScanTrace) -> int:
    sm = _smoothed(trace)
    resid = trace.v_adc - sm
    sigma = 1.4826 * float(np.median(np.abs(resid - np.median(resid))))
    contrast = float(np.median(sm) - np.min(sm))
    if contrast <= 4.0 * max(sigma, 1e-12):
        raise NoDipError(
            f"no dip found: contrast {contrast:.3e} V within noise floor {sigma:.3e} V"
        )
    return int(np.argmin(sm))  # first occurrence == lowest voltage on ties


def find_dip(trace: ScanTrace) -> float:
    """DAC voltage of the transmission dip.

    Global minimum of the smoothed trace; ties resolve toward lower
    voltage.  Raises :class:`NoDipError` when the contrast sits below four
    robust sigma of the smoothing residual.
    """
    return float(trace.v_dac[_dip_index(trace)])


def derivative(trace: ScanTrace) -> np.ndarray:
    """Transmittance derivative samples, shape (n, 2): (v_dac, dT/dV).

    Central differences on the smoothed trace, one-sided at the endpoints.
    """
    tp = np.gradient(_smoothed(trace), trace.v_dac)
    return np.column_stack([trace.v_dac, tp])


def _as_tprime(t_prime: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(t_prime, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 8:
        raise ParameterError("t_prime must be an (n, 2) array of (v_dac, slope)")
    return arr[:, 0], arr[:, 1]


def _vertex(grid: np.ndarray, y: np.ndarray, idx: int, hw: int, step: float) -> float:
    lo, hi = max(0, idx - hw), min(len(y), idx + hw + 1)
    x = grid[lo:hi] - grid[idx]
    c = np.polyfit(x, y[lo:hi], 2)
    if c[0] == 0.0:
        return float(grid[idx])
    v = -c[1] / (2.0 * c[0])
    span = hw * step
    return float(grid[idx] + min(max(v, -span), span))


def compute_am(t_prime: np.ndarray, v0: float) -> float:
    """Modulation amplitude from the derivative-extrema separation.

    ``a_m`` is one eighth of the DAC-voltage separation between the
    locations of the maximum and minimum of the transmittance derivative.
    The maximum is searched above ``v0`` and the minimum below it.
    """
    grid, tp = _as_tprime(t_prime)
    step = float(np.median(np.diff(grid)))
    right = grid >= v0
    left = grid <= v0
    if not right.any() or not left.any():
        raise CalibrationError("v0 outside the t_prime span")
    ia = int(np.flatnonzero(right)[np.argmax(tp[right])])
    ib = int(np.flatnonzero(left)[np.argmin(tp[left])])
    rough = float(grid[ia] - grid[ib])
    if rough < 4 * step:
        raise CalibrationError("derivative extrema unresolved on this grid")
    if ia >= len(grid) - 1 or ib <= 0:
        raise CalibrationError("derivative extrema not bracketed by the scan")
    hw = max(2, int(round(_AM_VERTEX_FRACTION * rough / step)))
    highs, lows = [], []
    for frac in _AM_WINDOW_FRACTIONS:
        w = int(round(frac * rough / step)) // 2 * 2 + 1
        w = max(7, min(w, (len(tp) - 1) // 2 * 2 + 1))
        ts = savgol_filter(tp, w, _AM_SMOOTH_ORDER)
        ih = int(np.flatnonzero(right)[np.argmax(ts[right])])
        il = int(np.flatnonzero(left)[np.argmin(ts[left])])
        highs.append(_vertex(grid, ts, ih, hw, step))
        lows.append(_vertex(grid, ts, il, hw, step))
    sep = float(np.median(highs)) - float(np.median(lows))
    if sep <= 0.0:
        raise CalibrationError("degenerate derivative extrema")
    return sep / AM_WIDTH_DIVISOR


def compute_k(
    t_prime: np.ndarray,
    v0: float,
    a_m: float,
    *,
    span_am: float = K_REGRESSION_SPAN_AM,
) -> float:
    """Integral gain: reciprocal least-squares slope of the derivative.

    Ordinary least squares of the (v_dac, dT/dV) samples restricted to
    ``[v0 - span_am*a_m, v0 + span_am*a_m]``; ``k_gain`` is one over that
    slope, so a single integral step cancels a small displacement.
    """
    if a_m <= 0.0:
        raise ParameterError("a_m must be positive")
    if span_am <= 0.0:
        raise ParameterError("span_am must be positive")
    grid, tp = _as_tprime(t_prime)
    lo, hi = v0 - span_am * a_m, v0 + span_am * a_m
    if lo < grid[0] - 1e-12 or hi > grid[-1] + 1e-12:
        raise CalibrationError("regression window falls outside the scan")
    sel = (grid >= lo) & (grid <= hi)
    if int(sel.sum()) < 8:
        raise CalibrationError("regression window too sparse on this grid")
    slope = float(np.polyfit(grid[sel], tp[sel], 1)[0])
    if slope <= 0.0:
        raise CalibrationError(f"derivative slope {slope:.3e} not positive")
    return 1.0 / slope


def estimate_q(trace: ScanTrace, vco: VcoConfig) -> tuple[float, float]:
    """Q factor read back from the measured dip width.

    Interpolates the two half-depth crossings on the smoothed trace,
    converts the voltage width to hertz through the tuning-polynomial slope
    at the dip, and returns ``(q, fwhm_volts)``.
    """
    sm = _smoothed(trace)
    idx = _dip_index(trace)
    top = float(np.max(sm))
    floor = float(sm[idx])
    half = 0.5 * (top + floor)
    grid = trace.v_dac

    def crossing(lo_i: int, hi_i: int, from_left: bool) -> float:
        seg, vs = sm[lo_i:hi_i], grid[lo_i:hi_i]
        below = np.nonzero(seg <= half)[0]
        if below.size == 0:
            raise CalibrationError("half-depth crossing not bracketed")
        i = below[0] - 1 if from_left else below[-1]
        if i < 0 or i + 1 >= seg.size:
            raise CalibrationError("half-depth crossing not bracketed")
        y0, y1 = seg[i], seg[i + 1]
        frac = (half - y0) / (y1 - y0)
        return float(vs[i] + frac * (vs[i + 1] - vs[i]))

    v_left = crossing(0, idx + 1, from_left=True)
    v_right = crossing(idx, len(sm), from_left=False)
    fwhm_v = v_right - v_left
    if fwhm_v <= 0.0:
        raise CalibrationError("non-positive dip width")
    v0 = float(grid[idx])
    slope = abs(tuning_slope(vco, v0))
    f_center = float(np.polyval(list(vco.tuning)[::-1], v0))
    return f_center / (fwhm_v * slope), float(fwhm_v)


def estimate_depth(trace: ScanTrace) -> float:
    """Dip depth in ADC volts: top minus bottom of the smoothed trace."""
    sm = _smoothed(trace)
    idx = _dip_index(trace)
    return float(np.max(sm) - sm[idx])


def local_sensitivity(df_dr_deps: float, area_m2: float) -> float:
    """Frequency response per unit permittivity per unit sensing area."""
    if area_m2 <= 0.0:
        raise DomainError("area must be positive")
    return df_dr_deps / area_m2


def calibrate(
    plant: Plant,
    *,
    n_points: int = DEFAULT_SCAN_POINTS,
    averaging: int = DEFAULT_SCAN_AVERAGING,
    v_start: float | None = None,
    v_stop: float | None = None,
) -> tuple[CalibrationResult, ScanTrace]:
    """Full calibration pass: scan, locate dip, derive a_m and k, readbacks."""
    trace = scan(
        plant,
        n_points=n_points,
        averaging=averaging,
        v_start=v_start,
        v_stop=v_stop,
    )
    v0 = find_dip(trace)
    t_prime = derivative(trace)
    a_m = compute_am(t_prime, v0)
    k_gain = compute_k(t_prime, v0, a_m)
    q_est, fwhm_v = estimate_q(trace, plant.config.vco)
    delta_t_est = estimate_depth(trace)
    result = CalibrationResult(
        v0=v0,
        a_m=a_m,
        k_gain=k_gain,
        q_est=q_est,
        delta_t_est=delta_t_est,
        t_prime=t_prime,
        fwhm_v=fwhm_v,
        settings=dict(trace.settings),
    )
    return result, trace


def am_closed_form(plant_config: PlantConfig) -> float:
    """Ideal modulation amplitude in DAC volts for a symmetric dip.

    The derivative extrema of the dip sit at normalized detuning
    ``x = +/- 1/sqrt(3)``, a frequency separation of ``f_r / (sqrt(3) Q)``;
    dividing by the width divisor and the tuning slope converts to volts.
    """
    res = plant_config.resonator
    v0 = dip_voltage(plant_config)
    slope = abs(tuning_slope(plant_config.vco, v0))
    return res.f_r0 / (AM_WIDTH_DIVISOR * math.sqrt(3.0) * res.q_factor) / slope


def k_closed_form(plant_config: PlantConfig) -> float:
    """Small-displacement analytic gain for the simulated plant.

    Differentiating the dip response twice at its center gives the
    derivative slope ``8 g dT Q^2 s^2 / f_r^2`` in ADC volts per DAC volt
    squared; ``k`` is its reciprocal.  The least-squares gain over a finite
    window exceeds this because the window includes sub-linear tails.
    """
    res = plant_config.resonator
    v0 = dip_voltage(plant_config)
    s = abs(tuning_slope(plant_config.vco, v0))
    g = plant_config.detector.gain
    return res.f_r0**2 / (8.0 * g * res.delta_t * res.q_factor**2 * s**2)


# ---------------------------------------------------------------------------
# CSV persistence.  Metadata rides in '#'-prefixed 'key=value' lines before
# the column header row.


def _write_meta(fh: io.TextIOBase, meta: dict) -> None:
    fh.write(f"# schema={SCHEMA_VERSION}\n")
    for key in sorted(meta):
        fh.write(f"# {key}={meta[key]}\n")


def _read_meta(lines: list[str]) -> tuple[dict, int]:
    meta: dict = {}
    i = 0
    for i, line in enumerate(lines):
        if not line.startswith("#"):
            break
        body = line[1:].strip()
        if "=" in body:
            key, _, val = body.partition("=")
            meta[key.strip()] = val.strip()
    return meta, i


def scan_to_csv(trace: ScanTrace, path: str) -> None:
    with open(path, "w", newline="") as fh:
        _write_meta(fh, {**trace.settings, "averaging": trace.averaging})
        writer = csv.writer(fh)
        writer.writerow(["v_dac", "v_adc"])
        for vd, va in zip(trace.v_dac, trace.v_adc):
            writer.writerow([repr(float(vd)), repr(float(va))])


def scan_from_csv(path: str) -> ScanTrace:
    with open(path, newline="") as fh:
        lines = fh.readlines()
    meta, start = _read_meta(lines)
    rows = list(csv.reader(lines[start:]))
    if not rows or rows[0][:2] != ["v_dac", "v_adc"]:
        raise ParameterError(f"{path}: missing scan header row")
    body = [r for r in rows[1:] if r]
    v_dac = np.array([float(r[0]) for r in body])
    v_adc = np.array([float(r[1]) for r in body])
    averaging = int(meta.pop("averaging", 1))
    meta.pop("schema", None)
    return ScanTrace(v_dac=v_dac, v_adc=v_adc, averaging=averaging, settings=meta)


_SCALAR_FIELDS = ("v0", "a_m", "k_gain", "q_est", "delta_t_est", "fwhm_v")


def calibration_to_csv(result: CalibrationResult, path: str) -> None:
    """Scalar quantities as (quantity, value) rows; t_prime rides along
    as (t_prime_v, t_prime_slope) rows after the scalars."""
    with open(path, "w", newline="") as fh:
        _write_meta(fh, result.settings)
        writer = csv.writer(fh)
        writer.writerow(["quantity", "value"])
        for name in _SCALAR_FIELDS:
            writer.writerow([name, repr(float(getattr(result, name)))])
        for v, s in np.asarray(result.t_prime, dtype=np.float64):
            writer.writerow(["t_prime", f"{float(v)!r};{float(s)!r}"])


def calibration_from_csv(path: str) -> CalibrationResult:
    with open(path, newline="") as fh:
        lines = fh.readlines()
    meta, start = _read_meta(lines)
    rows = list(csv.reader(lines[start:]))
    if not rows or rows[0][:2] != ["quantity", "value"]:
        raise ParameterError(f"{path}: missing calibration header row")
    values: dict[str, float] = {}
    tp_rows: list[tuple[float, float]] = []
    for r in rows[1:]:
        if not r:
            continue
        if r[0] == "t_prime":
            v, _, s = r[1].partition(";")
            tp_rows.append((float(v), float(s)))
        else:
            values[r[0]] = float(r[1])
    missing = {"v0", "a_m", "k_gain"} - values.keys()
    if missing:
        raise ParameterError(f"{path}: missing quantities {sorted(missing)}")
    meta.pop("schema", None)
    return CalibrationResult(
        v0=values["v0"],
        a_m=values["a_m"],
        k_gain=values["k_gain"],
        q_est=values.get("q_est", float("nan")),
        delta_t_est=values.get("delta_t_est", float("nan")),
        t_prime=np.array(tp_rows, dtype=np.float64).reshape(-1, 2),
        fwhm_v=values.get("fwhm_v", float("nan")),
        settings=meta,
    )

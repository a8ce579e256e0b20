"""Discrete resonance-tracking loop: modulation, error signal, feedback.

Each square-wave iteration takes two ADC conversions, one on either side of
the current lock point, forms the normalized two-point slope estimate, and
applies an integral correction scaled by the calibrated gain.  Proportional
and derivative terms exist for the operator console but default to zero.
Lock is considered lost on an oversized correction step, a DAC range exit,
or a long run of saturated conversions; recovery is a full relock
(scan -> calibrate -> re-initialize).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import kernels
from .constants import POINT_RATE_BENCH, SCHEMA_VERSION
from .errors import ParameterError, RangeError
from .plant import Plant

__all__ = [
    "TrackerConfig",
    "TrackerState",
    "TrackerSample",
    "step_square",
    "step_sine",
    "detect_lock_loss",
    "relock",
    "run",
    "run_arrays",
    "error_square",
    "error_sine",
    "config_from_calibration",
    "run_log_to_csv",
    "run_log_from_csv",
]

_RUN_BLOCK = 4096  # iterations per kernel batch inside run()


@dataclass(frozen=True)
class TrackerConfig:
    """Loop parameters; ``k_i`` carries the calibrated gain (or a fraction)."""

    k_i: float
    a_m: float
    k_p: float = 0.0
    k_d: float = 0.0
    modulation: str = "square"
    sine_samples_per_period: int = 16
    lock_loss_step_limit: float = 5.0   # multiples of a_m
    point_rate: float = POINT_RATE_BENCH

    def __post_init__(self) -> None:
        if not (self.k_i > 0.0):
            raise ParameterError("k_i must be positive")
        if not (self.a_m > 0.0):
            raise ParameterError("a_m must be positive")
        if self.modulation not in ("square", "sine"):
            raise ParameterError(f"unknown modulation {self.modulation!r}")
        n = self.sine_samples_per_period
        if n < 4 or n % 2:
            raise ParameterError("sine_samples_per_period must be even and >= 4")
        if not (self.lock_loss_step_limit > 0.0):
            raise ParameterError("lock_loss_step_limit must be positive")
        if not (self.point_rate > 0.0):
            raise ParameterError("point_rate must be positive")


@dataclass
class TrackerState:
    """Mutable loop state between iterations."""

    v_center: float
    integral_acc: float = 0.0
    locked: bool = True
    iteration: int = 0
    sat_streak: int = 0
    err_prev: float = 0.0
    err_prev2: float = 0.0


class TrackerSample(NamedTuple):
    iteration: int
    v_out: float
    error: float
    locked: bool
    saturated: bool


def _dac_quantize(v: float, lsb: float, lo: float, hi: float) -> float:
    v = min(max(v, lo), hi)
    vq = float(np.rint(v / lsb) * lsb)
    return min(max(vq, lo), hi)


def step_square(state: TrackerState, config: TrackerConfig, plant: Plant) -> TrackerSample:
    """One square-wave iteration: sample at v_center +/- a_m, correct, emit.

    Consumes exactly two plant conversions.  Runs the same compiled
    recurrence as :func:`run`, so stepping and batching are bit-identical.
    """
    samples = run_arrays(1, state, config, plant)
    return TrackerSample(
        iteration=state.iteration - 1,
        v_out=float(samples[0][0]),
        error=float(samples[1][0]),
        locked=bool(samples[2][0]),
        saturated=bool(samples[3][0]),
    )


def step_sine(state: TrackerState, config: TrackerConfig, plant: Plant) -> TrackerSample:
    """One sinusoidal iteration: N samples around a full modulation period.

    Drives ``v_center + a_m sin(2 pi n/N)``, demodulates against the same
    sine, and scales by ``2/(a_m N)`` so the small-signal error slope
    matches the square-wave generator; the feedback update is identical.
    """
    lo, hi = plant.config.vco.v_range
    n = config.sine_samples_per_period
    phases = np.sin(2.0 * np.pi * np.arange(n) / n)
    cmd = state.v_center + config.a_m * phases
    range_exit = bool(np.any(cmd < lo) or np.any(cmd > hi))
    adc, sat = _measure_chain(plant, cmd)

    e = float(2.0 / (config.a_m * n) * np.dot(adc, phases))
    delta = (
        config.k_i * e
        + config.k_p * (e - state.err_prev)
        + config.k_d * (e - 2.0 * state.err_prev + state.err_prev2)
    )
    # saturation streak: consecutive saturated conversions across iterations
    for s in sat:
        state.sat_streak = state.sat_streak + 1 if s else 0
        if state.sat_streak >= kernels._SAT_STREAK_LIMIT:
            state.locked = False
    if abs(config.k_i * e) > config.lock_loss_step_limit * config.a_m or range_exit:
        state.locked = False
    state.v_center -= delta
    state.integral_acc -= config.k_i * e
    state.err_prev2 = state.err_prev
    state.err_prev = e
    state.iteration += 1
    return TrackerSample(
        iteration=state.iteration - 1,
        v_out=state.v_center,
        error=e,
        locked=state.locked,
        saturated=bool(np.any(sat)),
    )


def detect_lock_loss(
    state: TrackerState,
    config: TrackerConfig,
    sample: TrackerSample,
    *,
    v_range: tuple[float, float] = (0.0, 3.3),
) -> bool:
    """True when this iteration's evidence says lock is gone.

    Trip conditions: correction step strictly above the limit, modulation
    span leaving the DAC range, or 100 consecutive saturated conversions.
    """
    if abs(config.k_i * sample.error) > config.lock_loss_step_limit * config.a_m:
        return True
    lo, hi = v_range
    if state.v_center + config.a_m > hi or state.v_center - config.a_m < lo:
        return True
    return state.sat_streak >= kernels._SAT_STREAK_LIMIT


def relock(plant: Plant, *, n_points: int | None = None, averaging: int | None = None):
    """Full reacquisition: scan, calibrate, re-initialize at the new dip.

    Returns ``(CalibrationResult, TrackerState)``; the previous integral
    accumulation is discarded.  Calibration failures (for example no dip)
    propagate, leaving the caller's tracker unlocked.
    """
    from . import calib

    kwargs = {}
    if n_points is not None:
        kwargs["n_points"] = n_points
    if averaging is not None:
        kwargs["averaging"] = averaging
    result, _ = calib.calibrate(plant, **kwargs)
    return result, TrackerState(v_center=result.v0, locked=True)


def config_from_calibration(result, *, k_fraction: float = 1.0, **overrides) -> TrackerConfig:
    """TrackerConfig with the auto-computed gain and modulation amplitude."""
    if not (k_fraction > 0.0):
        raise ParameterError("k_fraction must be positive")
    return TrackerConfig(
        k_i=result.k_gain * k_fraction, a_m=result.a_m, **overrides
    )


def run_arrays(
    duration_points: int,
    state: TrackerState,
    config: TrackerConfig,
    plant: Plant,
    *,
    backend: str | None = None,
    sink: Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], None] | None = None,
):
    """Square-wave tracking for ``duration_points`` iterations, array form.

    Returns ``(v_out, error, locked, saturated)`` arrays and mutates
    ``state`` in place.  ``sink``, when given, receives each kernel block
    as four array slices and must not block (the caller owns buffering).
    """
    if duration_points < 0:
        raise ParameterError("duration_points must be >= 0")
    if config.modulation != "square":
        raise ParameterError("run_arrays drives square modulation only")
    cfg = plant.config
    lo, hi = cfg.vco.v_range
    v_out = np.empty(duration_points)
    err = np.empty(duration_points)
    locked = np.empty(duration_points, np.bool_)
    sat = np.empty(duration_points, np.bool_)
    done = 0
    while done < duration_points:
        n = min(_RUN_BLOCK, duration_points - done)
        jitter, noise, emi, f_r = plant.stage_disturbances(2 * n)
        out = kernels.track_square(
            state.v_center,
            config.a_m,
            config.k_i,
            config.k_p,
            config.k_d,
            n,
            jitter,
            f_r,
            noise,
            emi,
            *plant.chain_args()[:10],
            cfg.quantizer.lsb,
            cfg.quantizer.full_scale,
            lo,
            hi,
            config.lock_loss_step_limit,
            state.locked,
            state.sat_streak,
            state.err_prev,
            state.err_prev2,
            backend=backend,
        )
        plant.advance(2 * n)
        bv, be, bl, bs, v_c, e1, e2, lk, streak = out
        v_out[done : done + n] = bv
        err[done : done + n] = be
        locked[done : done + n] = bl
        sat[done : done + n] = bs
        state.v_center = float(v_c)
        state.err_prev = float(e1)
        state.err_prev2 = float(e2)
        state.locked = bool(lk)
        state.sat_streak = int(streak)
        # sequential fold keeps the accumulator bit-identical to stepping
        acc = state.integral_acc
        for e in be:
            acc -= config.k_i * float(e)
        state.integral_acc = acc
        state.iteration += n
        if sink is not None:
            sink(bv, be, bl, bs)
        done += n
    return v_out, err, locked, sat


def run(
    duration_points: int,
    state: TrackerState,
    config: TrackerConfig,
    plant: Plant,
    sink: Callable[[TrackerSample], None] | None = None,
) -> list[TrackerSample]:
    """Emit exactly ``duration_points`` TrackerSamples (square or sine).

    Lock loss mid-run keeps emitting flagged samples; the stream never
    stops on its own.  Deterministic under a fixed plant seed.
    """
    if config.modulation == "sine":
        samples = [step_sine(state, config, plant) for _ in range(duration_points)]
        if sink is not None:
            for s in samples:
                sink(s)
        return samples
    start = state.iteration
    v_out, err, locked, sat = run_arrays(duration_points, state, config, plant)
    samples = [
        TrackerSample(start + i, float(v_out[i]), float(err[i]), bool(locked[i]), bool(sat[i]))
        for i in range(duration_points)
    ]
    if sink is not None:
        for s in samples:
            sink(s)
    return samples


def _measure_chain(plant: Plant, cmd: np.ndarray):
    cfg = plant.config
    lo, hi = cfg.vco.v_range
    lsb = cfg.quantizer.lsb
    vq = np.clip(np.rint(np.clip(cmd, lo, hi) / lsb) * lsb, lo, hi)
    jitter, noise, emi, f_r = plant.stage_disturbances(cmd.shape[0])
    args = plant.chain_args()
    adc, sat = kernels.chain(
        vq, *args[:4], jitter, f_r, *args[4:10], noise, emi, *args[10:]
    )
    plant.advance(cmd.shape[0])
    return adc, sat


def error_square(plant: Plant, v_center: float, a_m: float) -> float:
    """Open-loop square-wave error at ``v_center`` (no feedback applied)."""
    if a_m <= 0.0:
        raise ParameterError("a_m must be positive")
    adc, _ = _measure_chain(plant, np.array([v_center + a_m, v_center - a_m]))
    return float((adc[0] - adc[1]) / (2.0 * a_m))


def error_sine(plant: Plant, v_center: float, a_m: float, n_per_period: int = 16) -> float:
    """Open-loop demodulated sine error at ``v_center`` (no feedback)."""
    if a_m <= 0.0:
        raise ParameterError("a_m must be positive")
    if n_per_period < 4 or n_per_period % 2:
        raise ParameterError("n_per_period must be even and >= 4")
    phases = np.sin(2.0 * np.pi * np.arange(n_per_period) / n_per_period)
    adc, _ = _measure_chain(plant, v_center + a_m * phases)
    return float(2.0 / (a_m * n_per_period) * np.dot(adc, phases))


# ---------------------------------------------------------------------------
# run-log CSV


def run_log_to_csv(samples, path: str, meta: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={SCHEMA_VERSION}\n")
        for key in sorted(meta or {}):
            fh.write(f"# {key}={meta[key]}\n")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "v_out", "error", "locked", "saturated"])
        for s in samples:
            writer.writerow(
                [s.iteration, repr(float(s.v_out)), repr(float(s.error)),
                 int(s.locked), int(s.saturated)]
            )


def run_log_from_csv(path: str) -> list[TrackerSample]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(
            line for line in fh if not line.startswith("#")
        ) if r]
    if not rows or rows[0][0] != "iteration":
        raise ParameterError(f"{path}: missing run-log header")
    return [
        TrackerSample(int(r[0]), float(r[1]), float(r[2]), bool(int(r[3])), bool(int(r[4])))
        for r in rows[1:]
    ]

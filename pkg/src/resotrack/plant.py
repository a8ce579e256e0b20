"""Deterministic simulation of the sensor front end.

The signal chain per ADC conversion is

    quantize_DAC -> VCO tuning polynomial (+ frequency jitter)
    -> Lorentzian dip transmittance at the current resonance
    -> detector (gain*T + offset + nonlinearity*T^2 + thermal noise)
    -> additive interference -> quantize_ADC (clamped, saturation-flagged)

Determinism contract: a plant draws exactly two standard-normal values per
conversion (jitter, then detector noise) from one ``numpy`` PCG64 stream, and
batches draw ``standard_normal((m, 2))``, which walks the identical stream.
Identical seed + config + command sequence therefore reproduces bit-identical
ADC sequences whether samples are taken one at a time or in batches, with any
kernel backend, regardless of which noise sources are enabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .config import PlantConfig, QuantizerConfig, ResonatorConfig, VcoConfig
from .errors import DomainError, RangeError


def transmittance(f, f_r, cfg: ResonatorConfig):
    """Lorentzian power-transmittance dip.

    T = baseline - delta_t / (1 + x^2) with x = 2 Q (f - f_r) / f_r; the
    half-depth points sit at f_r (1 +/- 1/(2Q)), so FWHM = f_r / Q.
    """
    f = np.asarray(f, dtype=np.float64)
    if np.any(f <= 0) or f_r <= 0:
        raise DomainError("transmittance needs positive f and f_r")
    x = 2.0 * cfg.q_factor * (f - f_r) / f_r
    out = cfg.baseline - cfg.delta_t / (1.0 + x * x)
    return out if out.ndim else float(out)


def vco_frequency(v_dac, cfg: VcoConfig):
    """Noiseless tuning-curve evaluation (jitter lives in sampling paths)."""
    v_dac = np.asarray(v_dac, dtype=np.float64)
    lo, hi = cfg.v_range
    if np.any(v_dac < lo) or np.any(v_dac > hi):
        raise RangeError(f"v_dac outside VCO range [{lo}, {hi}]")
    out = np.polyval(cfg.tuning[::-1], v_dac)
    return out if out.ndim else float(out)


def tuning_slope(cfg: VcoConfig, v: float) -> float:
    """d(frequency)/d(volts) of the tuning polynomial at ``v``."""
    deriv = np.polyder(np.poly1d(cfg.tuning[::-1]))
    return float(deriv(v))


def dip_voltage(cfg: PlantConfig) -> float:
    """DAC voltage whose (noiseless) VCO frequency equals the nominal dip."""
    lo, hi = cfg.vco.v_range
    target = cfg.resonator.f_r0

    def g(v):
        return np.polyval(cfg.vco.tuning[::-1], v) - target

    if g(lo) > 0 or g(hi) < 0:
        raise RangeError("nominal resonance lies outside the VCO tuning range")
    if len(cfg.vco.tuning) == 2:  # linear: solve directly
        c0, c1 = cfg.vco.tuning
        return (target - c0) / c1
    return float(brentq(g, lo, hi, xtol=1e-15))


def quantize(v, cfg: QuantizerConfig):
    """Round to the code grid and clamp to [0, full_scale]; idempotent."""
    q = np.rint(np.asarray(v, dtype=np.float64) / cfg.lsb) * cfg.lsb
    q = np.clip(q, 0.0, cfg.full_scale)
    return q if q.ndim else float(q)


@dataclass(frozen=True)
class PlantState:
    time_index: int
    f_r_current: float
    seed: int


class Plant:
    """Owns the simulated chain plus its RNG/time state.

    Not thread-safe by design: all mutation flows through :meth:`sample` /
    :meth:`sample_many`, serialized by the caller (the tracker or service).
    """

    def __init__(self, config: PlantConfig):
        config.validate()
        self.config = config
        self.time_index = 0
        self._rng = np.random.default_rng(config.seed)
        c = list(config.vco.tuning) + [0.0] * (4 - len(config.vco.tuning))
        self._coeffs = tuple(float(x) for x in c[:4])

    # -- state -----------------------------------------------------------
    @property
    def state(self) -> PlantState:
        return PlantState(self.time_index, self.resonance_at(self.time_index),
                          self.config.seed)

    def resonance_at(self, t_index: int) -> float:
        """Resonance frequency at a sample index, per the stimulus program."""
        if t_index < 0:
            raise DomainError("sample index must be >= 0")
        return float(self.resonance_trajectory(t_index, 1)[0])

    def resonance_trajectory(self, start: int, n: int) -> np.ndarray:
        cfg = self.config
        t = (start + np.arange(n)) / cfg.sample_rate_hz
        drive = cfg.stimulus.values(t)
        if cfg.stimulus.domain == "permittivity":
            return cfg.resonator.f_r0 + cfg.resonator.sensitivity * drive
        return cfg.resonator.f_r0 + drive

    # -- sampling --------------------------------------------------------
    def sample(self, v_dac: float):
        """One ADC conversion; returns ``(v_adc, saturated)``."""
        v, s = self.sample_many(np.array([v_dac], dtype=np.float64))
        return float(v[0]), bool(s[0])

    def sample_many(self, v_dac: np.ndarray, backend=None):
        """Batch of conversions; advances time and the RNG identically to the
        same sequence of single :meth:`sample` calls."""
        cfg = self.config
        v_dac = np.ascontiguousarray(v_dac, dtype=np.float64)
        if not np.all(np.isfinite(v_dac)):
            raise DomainError("v_dac must be finite")
        vq = quantize(v_dac, cfg.quantizer)
        lo, hi = cfg.vco.v_range
        tol = 1e-12
        if np.any(vq < lo - tol) or np.any(vq > hi + tol):
            raise RangeError(
                f"v_dac outside VCO range [{lo}, {hi}] after DAC quantization"
            )
        m = v_dac.shape[0]
        jitter, noise, emi = self._draw_disturbances(m)
        f_r = self.resonance_trajectory(self.time_index, m)
        out, sat = kernels.chain(
            vq, *self._coeffs, jitter, f_r,
            cfg.resonator.q_factor, cfg.resonator.delta_t,
            cfg.resonator.baseline, cfg.detector.gain, cfg.detector.offset,
            cfg.detector.nonlinearity, noise, emi,
            cfg.quantizer.lsb, cfg.quantizer.full_scale,
            backend=backend,
        )
        self.time_index += m
        return out, sat

    def _draw_disturbances(self, m: int):
        # exactly 2 draws per conversion, always, so enabling a noise source
        # never shifts the stream consumed by the others
        z = self._rng.standard_normal((m, 2))
        jitter = z[:, 0] * self.config.vco.jitter_std
        noise = z[:, 1] * self.config.detector.noise_std
        emi_cfg = self.config.emi
        if emi_cfg.enabled and emi_cfg.amplitude > 0.0:
            t = (self.time_index + np.arange(m)) / self.config.sample_rate_hz
            emi = emi_cfg.amplitude * np.sin(
                2.0 * np.pi * emi_cfg.frequency * t + emi_cfg.phase
            )
        else:
            emi = np.zeros(m)
        return np.ascontiguousarray(jitter), np.ascontiguousarray(noise), \
            np.ascontiguousarray(emi)

    # arrays for a tracker batch: the tracker consumes plant samples through
    # its own loop kernel but must advance this plant exactly like
    # sample_many would; it calls this, then commits with advance()
    def stage_disturbances(self, m: int):
        jitter, noise, emi = self._draw_disturbances(m)
        f_r = self.resonance_trajectory(self.time_index, m)
        return jitter, noise, emi, f_r

    def advance(self, m: int):
        self.time_index += m

    def chain_args(self):
        cfg = self.config
        return (*self._coeffs, cfg.resonator.q_factor, cfg.resonator.delta_t,
                cfg.resonator.baseline, cfg.detector.gain,
                cfg.detector.offset, cfg.detector.nonlinearity,
                cfg.quantizer.lsb, cfg.quantizer.full_scale)
